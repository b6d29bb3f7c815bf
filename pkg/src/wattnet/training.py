"""Losses, RMSprop, undersampling, classification metrics and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, batches
from .errors import ContractError, InvalidInputError, NumericError
from .nn import BatchNorm2d, Module, Parameter
from .tensor import Tensor, _wrap, no_grad, softmax

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_EPS = 1e-12


@dataclass
class LossConfig:
    ce_weight: float = 1.0
    cosine_weight: float = 1.0
    l2_coeff: float = 1e-4

    def __post_init__(self):
        if min(self.ce_weight, self.cosine_weight, self.l2_coeff) < 0:
            raise ContractError(f"loss weights must be non-negative: {self}")


# ---------------------------------------------------------------------------
# losses


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _targets(targets, like: Tensor) -> np.ndarray:
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if t.ndim == 1 and like.ndim == 2 and np.issubdtype(t.dtype, np.integer):
        t = one_hot(t, like.shape[1])
    if t.shape != like.shape:
        raise ContractError(f"targets shape {t.shape} does not match outputs {like.shape}")
    return t.astype(like.dtype)


def categorical_cross_entropy(probs, targets) -> Tensor:
    """Mean of -log p_true with p clamped to [1e-12, 1]."""
    probs = _wrap(probs)
    t = _targets(targets, probs)
    picked = (probs.clip(PROB_FLOOR, 1.0).log() * t).sum(axis=1)
    return -picked.mean()


def cosine_loss(embeddings, targets) -> Tensor:
    """Mean of 1 - cos(x, t) with t the one-hot target direction."""
    x = _wrap(embeddings)
    t = _targets(targets, x)
    sq = (x * x).sum(axis=1)
    if np.any(sq.data == 0):
        log.warning("cosine loss: %d zero-norm embedding row(s)", int(np.sum(sq.data == 0)))
    # guard the sqrt derivative at zero norm as well as the division
    norm = (sq + NORM_EPS * NORM_EPS).sqrt() + NORM_EPS
    t_norm = np.sqrt((t * t).sum(axis=1))
    cos = (x * t).sum(axis=1) / (norm * t_norm)
    return 1.0 - cos.mean()


def l2_penalty(kernels, coeff: float = 1e-4):
    total = None
    for w in kernels:
        term = (w * w).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.array(0.0))
    return total * coeff


def loss_terms(logits, targets, kernels, config: LossConfig | None = None) -> dict:
    """The three weighted summands; ``combined_loss`` is their sum."""
    config = config or LossConfig()
    logits = _wrap(logits)
    return {
        "ce": categorical_cross_entropy(softmax(logits, axis=1), targets) * config.ce_weight,
        "cosine": cosine_loss(logits, targets) * config.cosine_weight,
        "l2": l2_penalty(kernels, config.l2_coeff),
    }


def combined_loss(logits, targets, kernels, config: LossConfig | None = None) -> Tensor:
    """CE on softmax(logits) + cosine loss on logits + l2 over kernel weights."""
    terms = loss_terms(logits, targets, kernels, config)
    return terms["ce"] + terms["cosine"] + terms["l2"]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-7
    decay: float = 1e-6
    iterations: int = 0
    accumulators: list = field(default_factory=list)

    @property
    def effective_lr(self) -> float:
        return self.learning_rate / (1.0 + self.decay * self.iterations)


def rmsprop_step(state: OptimizerState, params, grads) -> None:
    """In-place RMSprop update of ``params`` (arrays or Parameters)."""
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    grads = [np.zeros_like(a) if g is None else np.asarray(g) for a, g in zip(arrays, grads)]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {i} (shape {g.shape}) "
                               f"at iteration {state.iterations}")
    if not state.accumulators:
        state.accumulators = [np.zeros_like(a) for a in arrays]
    if len(state.accumulators) != len(arrays):
        raise ContractError(f"{len(state.accumulators)} accumulators for {len(arrays)} parameters")
    lr = state.effective_lr
    for a, g, v in zip(arrays, grads, state.accumulators):
        if v.shape != a.shape or g.shape != a.shape:
            raise ContractError(f"accumulator {v.shape} / gradient {g.shape} do not match parameter {a.shape}")
        v *= state.rho
        v += (1.0 - state.rho) * g * g
        a -= (lr * g / (np.sqrt(v) + state.epsilon)).astype(a.dtype)
    state.iterations += 1


class RMSprop:
    def __init__(self, params, lr: float = 1e-3, rho: float = 0.9, eps: float = 1e-7, decay: float = 1e-6):
        self.params = list(params)
        self.state = OptimizerState(lr, rho, eps, decay)

    def step(self) -> None:
        rmsprop_step(self.state, self.params, [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# class balancing


def undersample_indices(labels, seed: int | np.random.SeedSequence = 0, num_classes: int | None = None) -> np.ndarray:
    """Indices keeping min-class-count samples of every class, sorted."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes or 0)
    if counts.size == 0 or counts.min() == 0:
        empty = [i for i, c in enumerate(counts) if c == 0]
        raise InvalidInputError(f"cannot undersample: class(es) {empty or 'all'} have no samples")
    rng = np.random.default_rng(seed)
    keep = counts.min()
    chosen = [rng.choice(np.flatnonzero(labels == c), size=keep, replace=False) for c in range(counts.size)]
    return np.sort(np.concatenate(chosen))


def undersample(dataset: LabeledDataset, seed: int | np.random.SeedSequence = 0) -> LabeledDataset:
    return dataset.subset(undersample_indices(dataset.labels, seed, dataset.num_classes))


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _safe_div(num, den, empty):
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    return np.where(den > 0, num / np.where(den > 0, den, 1), empty)


def per_class_scores(cm: np.ndarray):
    """(precision, recall, f1) per class; 0 wherever the denominator is 0."""
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0), 0.0)
    recall = _safe_div(tp, cm.sum(axis=1), 0.0)
    f1 = _safe_div(2 * precision * recall, precision + recall, 0.0)
    return precision, recall, f1


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean F1 over classes, in percent."""
    return float(per_class_scores(cm)[2].mean() * 100.0)


PR_THRESHOLDS = np.linspace(0.0, 1.0, 101)


def pr_curve(scores, is_positive, thresholds=PR_THRESHOLDS) -> np.ndarray:
    """Rows of (threshold, precision, recall); precision is 1 when nothing is predicted."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    pred = scores[None, :] >= np.asarray(thresholds)[:, None]
    tp = (pred & pos[None]).sum(axis=1)
    n_pred = pred.sum(axis=1)
    precision = _safe_div(tp, n_pred, 1.0)
    recall = _safe_div(tp, np.full_like(tp, pos.sum()), 0.0)
    return np.column_stack([thresholds, precision, recall])


@dataclass
class EvalReport:
    confusion: np.ndarray  # integer counts, rows = true class
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float  # percent
    pr_curves: list  # per class, array of (threshold, precision, recall)
    class_names: list = field(default_factory=list)

    @property
    def normalized(self) -> np.ndarray:
        """Row-normalized confusion matrix (fractions); empty rows stay zero."""
        rows = self.confusion.sum(axis=1, keepdims=True)
        return _safe_div(self.confusion, rows, 0.0)

    @property
    def percent(self) -> np.ndarray:
        return self.normalized * 100.0

    @classmethod
    def from_predictions(cls, y_true, scores, class_names=None) -> "EvalReport":
        scores = np.asarray(scores, dtype=np.float64)
        y_true = np.asarray(y_true, dtype=np.int64)
        n = scores.shape[1]
        cm = confusion_matrix(y_true, scores.argmax(axis=1), n)
        p, r, f = per_class_scores(cm)
        curves = [pr_curve(scores[:, c], y_true == c) for c in range(n)]
        return cls(cm, p, r, f, float(f.mean() * 100.0), curves, list(class_names or range(n)))

    def confusion_csv(self) -> str:
        names = [str(c) for c in self.class_names]
        lines = ["true\\pred," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def pr_csv(self, c: int) -> str:
        lines = ["threshold,precision,recall"]
        lines += [f"{t:.2f},{p!r},{r!r}" for t, p, r in self.pr_curves[c].tolist()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "confusion.csv"]
        written[0].write_text(self.confusion_csv(), newline="\n")
        for c in range(len(self.pr_curves)):
            path = out_dir / f"pr_class{c}.csv"
            path.write_text(self.pr_csv(c), newline="\n")
            written.append(path)
        return written


def predict_scores(model: Module, dataset: LabeledDataset, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for x, _ in batches(dataset, batch_size):
            out.append(model(x).data.astype(np.float64))
    model.train(was_training)
    n = model.config.num_classes if hasattr(model, "config") else 0
    return np.concatenate(out) if out else np.zeros((0, n))


def evaluate(model: Module, dataset: LabeledDataset, batch_size: int = 64) -> EvalReport:
    return EvalReport.from_predictions(dataset.labels, predict_scores(model, dataset, batch_size), dataset.class_names)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_f1: float


def history_csv(history: list[HistoryRow]) -> str:
    lines = ["epoch,train_loss,valid_loss,valid_f1"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.valid_loss!r},{h.valid_f1!r}" for h in history]
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_f1: float
    best_state: list  # arrays in Module.state_arrays order
    seconds: float = 0.0


def snapshot(model: Module) -> list[np.ndarray]:
    return [a.copy() for _, a in model.state_arrays()]


def recalibrate_bn(model: Module, dataset: LabeledDataset, batch_size: int = 32) -> None:
    """Set BN running statistics to population moments over ``dataset`` (fixed order)."""
    bns = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    if not bns or len(dataset) == 0:
        return
    for bn in bns:
        bn.begin_accumulate()
    with no_grad():
        for x, _ in batches(dataset, batch_size):
            model(x)
    for bn in bns:
        bn.end_accumulate()


def dataset_loss(model: Module, dataset: LabeledDataset, config: LossConfig, batch_size: int = 64):
    """Inference-mode combined loss (sample-weighted mean) and the class scores."""
    model.eval()
    total, scores = 0.0, []
    with no_grad():
        for x, y in batches(dataset, batch_size):
            logits = model.logits(x)
            terms = loss_terms(logits, y, [], config)
            total += float((terms["ce"] + terms["cosine"]).data) * len(y)
            scores.append(softmax(logits, axis=1).data.astype(np.float64))
        penalty = float(l2_penalty(model.kernels(), config.l2_coeff).data) if hasattr(model, "kernels") else 0.0
    model.train()
    return total / max(len(dataset), 1) + penalty, np.concatenate(scores)


def train(model: Module, train_set: LabeledDataset, valid_set: LabeledDataset, epochs: int = 300, seed: int = 0,
          lr: float = 1e-3, batch_size: int = 32, loss_config: LossConfig | None = None,
          balance: bool = True, progress=None) -> TrainResult:
    """RMSprop training; keeps (and finally loads) the best-validation-F1 weights,
    ties broken by validation loss.

    With ``balance`` both sets are undersampled, from independent seeds derived
    from ``seed``. After every epoch BN statistics are recomputed over the train
    set and the history losses are taken in inference mode.
    """
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    config = loss_config or LossConfig()
    train_seq, valid_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(3)
    if balance:
        train_set, valid_set = undersample(train_set, train_seq), undersample(valid_set, valid_seq)
    rng = np.random.default_rng(shuffle_seq)
    params = model.parameters()
    kernels = [p for p in params if getattr(p, "kernel", False)]
    opt = RMSprop(params, lr=lr)
    best_state, best_f1, best_loss, best_epoch = snapshot(model), -1.0, np.inf, 0
    history = []
    start = time.perf_counter()
    model.train()
    for epoch in range(1, epochs + 1):
        for x, y in batches(train_set, batch_size, rng):
            opt.zero_grad()
            loss = combined_loss(model.logits(x), y, kernels, config)
            if not np.isfinite(loss.data):
                model.load_state_arrays(best_state)
                raise NumericError(f"non-finite loss at epoch {epoch}", state=best_state)
            loss.backward()
            try:
                opt.step()
            except NumericError as exc:
                model.load_state_arrays(best_state)
                raise NumericError(str(exc), state=best_state) from None
        recalibrate_bn(model, train_set, batch_size)
        train_loss, _ = dataset_loss(model, train_set, config)
        valid_loss, scores = dataset_loss(model, valid_set, config)
        if not (np.isfinite(train_loss) and np.isfinite(valid_loss)):
            model.load_state_arrays(best_state)
            raise NumericError(f"non-finite evaluation loss at epoch {epoch}", state=best_state)
        f1 = EvalReport.from_predictions(valid_set.labels, scores).macro_f1
        history.append(HistoryRow(epoch, train_loss, valid_loss, f1))
        # ties on F1 (common once validation saturates) go to the lower validation loss
        if f1 > best_f1 or (f1 == best_f1 and valid_loss < best_loss):
            best_state, best_f1, best_loss, best_epoch = snapshot(model), f1, valid_loss, epoch
        if progress is not None:
            progress(history[-1])
    model.load_state_arrays(best_state)
    model.eval()
    return TrainResult(history, best_epoch, best_f1, best_state, time.perf_counter() - start)
