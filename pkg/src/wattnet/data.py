"""Image ingestion: PPM/PNG decoding, resizing, stratified splits, batching."""

from __future__ import annotations

import csv
import logging
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DecodeError, IngestionError, InvalidInputError, SplitError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".png")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class LabeledDataset:
    """Images (channel-first arrays) with integer labels.

    ``images`` is a list of [C,H,W] arrays straight after decoding, or one
    stacked [N,C,H,W] float array once prepared.
    """

    images: list | np.ndarray
    labels: np.ndarray
    class_names: list
    paths: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidInputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InvalidInputError("label index outside class_names")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        if isinstance(self.images, np.ndarray):
            images = self.images[indices]
        else:
            images = [self.images[i] for i in indices]
        paths = [self.paths[i] for i in indices] if self.paths else []
        return LabeledDataset(images, self.labels[indices], list(self.class_names), paths)


# ---------------------------------------------------------------------------
# decoding


def _ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError("PPM header truncated", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Binary PPM (P6) to float [3,H,W] in 0..255; other maxvals are rescaled."""
    if buf[:2] != b"P6":
        raise DecodeError("not a binary PPM (missing P6 magic)", 0)
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _ppm_token(buf, pos)
        if not tok.isdigit():
            raise DecodeError(f"bad PPM header field {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"invalid PPM dimensions {width}x{height} maxval {maxval}", 2)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM header", pos)
    pos += 1
    bpp = 1 if maxval < 256 else 2
    need = width * height * 3 * bpp
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise DecodeError(f"PPM payload truncated: expected {need} bytes, got {len(payload)}", pos + len(payload))
    dt = np.uint8 if bpp == 1 else np.dtype(">u2")
    arr = np.frombuffer(payload, dtype=dt).reshape(height, width, 3).astype(np.float64)
    if maxval != 255:
        arr *= 255.0 / maxval
    return arr.transpose(2, 0, 1)


def encode_ppm(img: np.ndarray) -> bytes:
    """[3,H,W] values in 0..255 to P6 bytes."""
    c, h, w = img.shape
    if c != 3:
        raise ContractError(f"PPM encoding needs 3 channels, got {c}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def decode_png(buf: bytes) -> np.ndarray:
    """8-bit non-interlaced PNG (gray, RGB or RGBA) to float [3,H,W] in 0..255."""
    if buf[:8] != PNG_SIGNATURE:
        raise DecodeError("not a PNG (bad signature)", 0)
    pos = 8
    header = None
    idat = bytearray()
    while True:
        if pos + 8 > len(buf):
            raise DecodeError("PNG truncated before IEND", pos)
        length, ctype = struct.unpack(">I4s", buf[pos : pos + 8])
        data = buf[pos + 8 : pos + 8 + length]
        if len(data) < length or pos + 12 + length > len(buf):
            raise DecodeError(f"PNG chunk {ctype!r} truncated", pos)
        crc = struct.unpack(">I", buf[pos + 8 + length : pos + 12 + length])[0]
        if zlib.crc32(ctype + data) & 0xFFFFFFFF != crc:
            raise DecodeError(f"PNG chunk {ctype!r} CRC mismatch", pos)
        if ctype == b"IHDR":
            if length != 13:
                raise DecodeError(f"IHDR has length {length}, expected 13", pos)
            header = struct.unpack(">IIBBBBB", data)
            width, height, depth, color, _, _, interlace = header
            if depth != 8 or color not in (0, 2, 6) or interlace:
                raise DecodeError(f"unsupported PNG (bit depth {depth}, color type {color}, interlace {interlace})",
                                  pos + 8)
        elif ctype == b"IDAT":
            idat += data
        elif ctype == b"IEND":
            break
        pos += 12 + length
    if header is None:
        raise DecodeError("PNG missing IHDR", 8)
    width, height, _, color, _, _, _ = header
    channels = {0: 1, 2: 3, 6: 4}[color]
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise DecodeError(f"PNG image data corrupt: {exc}", pos) from None
    stride = width * channels
    if len(raw) < height * (stride + 1):
        raise DecodeError("PNG image data truncated", pos)
    rows = np.frombuffer(raw, dtype=np.uint8)[: height * (stride + 1)].reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            # running sum per channel
            cur = (np.cumsum(line.reshape(width, channels), axis=0) & 0xFF).reshape(-1)
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                a = cur[x - channels] if x >= channels else 0
                if ftype == 3:
                    pred = (a + prev[x]) >> 1
                else:
                    c = prev[x - channels] if x >= channels else 0
                    pred = int(_paeth(np.int32(a), prev[x], np.int32(c)))
                cur[x] = (line[x] + pred) & 0xFF
        else:
            raise DecodeError(f"unknown PNG filter type {ftype}", pos)
        out[y] = cur
        prev = cur
    img = out.reshape(height, width, channels).astype(np.float64)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img[:, :, :3].transpose(2, 0, 1)


def decode_image(buf: bytes, fmt: str | None = None) -> np.ndarray:
    fmt = (fmt or ("png" if buf[:8] == PNG_SIGNATURE else "ppm")).lower().lstrip(".")
    if fmt == "ppm":
        return decode_ppm(buf)
    if fmt == "png":
        return decode_png(buf)
    raise DecodeError(f"unsupported image format {fmt!r}", 0)


# ---------------------------------------------------------------------------
# preparation


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of [C,H,W] with half-pixel centers (align_corners=False)."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.astype(np.float64, copy=True)

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    img = img.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def prepare(img: np.ndarray, size: int = 224, dtype=np.float32) -> np.ndarray:
    """Resize to size x size and scale 0..255 -> 0..1."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"prepare expects an RGB [3,H,W] image, got shape {img.shape}")
    return (resize_bilinear(img, size, size) / 255.0).astype(dtype)


def prepare_dataset(ds: LabeledDataset, size: int = 224, dtype=np.float32) -> LabeledDataset:
    images = np.stack([prepare(im, size, dtype) for im in ds.images]) if len(ds) else np.zeros((0, 3, size, size), dtype)
    return LabeledDataset(images, ds.labels.copy(), list(ds.class_names), list(ds.paths))


# ---------------------------------------------------------------------------
# ingestion


def worker_count() -> int:
    env = os.environ.get("WATT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer WATT_THREADS=%r", env)
    return os.cpu_count() or 1


def _read_decode(path: Path):
    try:
        return decode_image(path.read_bytes(), path.suffix)
    except (DecodeError, OSError) as exc:
        return exc


def _ingest(entries: list[tuple[Path, int]], class_names: list, size: int | None) -> LabeledDataset:
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        decoded = list(pool.map(_read_decode, [p for p, _ in entries]))
    images, labels, paths, skipped = [], [], [], 0
    for (path, label), img in zip(entries, decoded):
        if isinstance(img, Exception):
            skipped += 1
            log.warning("skipping %s: %s", path, img)
            continue
        images.append(img)
        labels.append(label)
        paths.append(str(path))
    if skipped:
        log.warning("skipped %d unreadable file(s)", skipped)
    if not images:
        raise IngestionError("no valid images found")
    ds = LabeledDataset(images, np.array(labels), class_names, paths)
    ds.skipped = skipped
    return prepare_dataset(ds, size) if size else ds


def load_directory(root, size: int | None = None) -> LabeledDataset:
    """Read ``root/<class_name>/*.{ppm,png}``; classes sorted by name.

    ``size`` additionally prepares (resize + scale) every image.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"data root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"data root {root} has no class subdirectories")
    entries = []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES and f.is_file():
                entries.append((f, label))
    return _ingest(entries, [d.name for d in class_dirs], size)


def load_manifest(path, size: int | None = None) -> LabeledDataset:
    """Read a ``path,class`` CSV; relative paths resolve against the CSV's folder."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    if not rows:
        raise IngestionError(f"manifest {path} is empty")
    class_names = sorted({r["class"] for r in rows})
    index = {c: i for i, c in enumerate(class_names)}
    entries = sorted(
        ((path.parent / r["path"] if not os.path.isabs(r["path"]) else Path(r["path"]), index[r["class"]]) for r in rows),
        key=lambda e: (e[1], str(e[0])),
    )
    return _ingest(entries, class_names, size)


def write_directory(ds: LabeledDataset, root) -> None:
    """Write images (0..1 prepared or 0..255 raw) as PPM under root/<class>/."""
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    counters = {}
    for img, label in zip(ds.images, ds.labels):
        name = ds.class_names[label]
        i = counters.get(name, 0)
        counters[name] = i + 1
        arr = np.asarray(img, dtype=np.float64)
        if arr.max() <= 1.0:
            arr = arr * 255.0
        (root / name / f"{i:05d}.ppm").write_bytes(encode_ppm(arr))


# ---------------------------------------------------------------------------
# splitting and batching


def largest_remainder(total: int, ratios) -> list[int]:
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = total * ratios / ratios.sum()
    base = np.floor(exact).astype(int)
    short = total - base.sum()
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base.tolist()


@dataclass
class SplitSpec:
    ratios: tuple = (4, 1, 2)
    seed: int = 0
    counts: dict | None = None  # class name -> (train, valid, test)


def split(ds: LabeledDataset, spec: SplitSpec | None = None):
    """Per-class stratified shuffle into (train, valid, test).

    Ratio mode rounds with largest remainder; count mode takes the explicit
    per-class sizes from ``spec.counts``.
    """
    spec = spec or SplitSpec()
    if len(spec.ratios) != 3 or min(spec.ratios) <= 0:
        raise SplitError(f"split ratios must be three positive numbers, got {spec.ratios}")
    rng = np.random.default_rng(spec.seed)
    parts = ([], [], [])
    for label, name in enumerate(ds.class_names):
        idx = np.flatnonzero(ds.labels == label)
        if spec.counts is not None:
            if name not in spec.counts:
                raise SplitError(f"no explicit counts for class {name!r}")
            sizes = list(spec.counts[name])
            if sum(sizes) > len(idx):
                raise SplitError(f"class {name!r} has {len(idx)} samples, counts ask for {sum(sizes)}")
        else:
            if len(idx) < 7:
                raise SplitError(f"class {name!r} has only {len(idx)} samples; need at least 7")
            sizes = largest_remainder(len(idx), spec.ratios)
        idx = rng.permutation(idx)
        start = 0
        for part, n in zip(parts, sizes):
            part.extend(sorted(idx[start : start + n].tolist()))
            start += n
    return tuple(ds.subset(sorted(p)) for p in parts)


def batches(ds: LabeledDataset, batch_size: int = 32, rng: np.random.Generator | None = None):
    """Yield (images, labels) batches; shuffled when ``rng`` is given."""
    if not isinstance(ds.images, np.ndarray):
        raise ContractError("batching needs a prepared (stacked) dataset")
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        sel = order[start : start + batch_size]
        yield ds.images[sel], ds.labels[sel]


# ---------------------------------------------------------------------------
# synthetic data

SYNTHETIC_CLASSES = ("checker", "diagonal", "disk", "hstripes", "vstripes")


def make_synthetic(n: int = 500, size: int = 32, seed: int = 0, noise: float = 0.15) -> LabeledDataset:
    """Five classes of noisy geometric patterns, balanced, values in 0..255."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for i in range(n):
        label = i % len(SYNTHETIC_CLASSES)
        period = rng.uniform(size / 6, size / 3)
        phase = rng.uniform(0, 2 * np.pi)
        kind = SYNTHETIC_CLASSES[label]
        if kind == "hstripes":
            mask = np.sin(2 * np.pi * yy / period + phase) > 0
        elif kind == "vstripes":
            mask = np.sin(2 * np.pi * xx / period + phase) > 0
        elif kind == "diagonal":
            mask = np.sin(2 * np.pi * (xx + yy) / (period * 1.4) + phase) > 0
        elif kind == "checker":
            mask = (np.sin(2 * np.pi * xx / period + phase) > 0) ^ (np.sin(2 * np.pi * yy / period) > 0)
        else:
            cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
            r = rng.uniform(size * 0.15, size * 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        fg = rng.uniform(0.55, 1.0, 3)
        bg = rng.uniform(0.0, 0.45, 3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = np.clip(img + rng.normal(0, noise, img.shape), 0, 1) * 255.0
        images.append(img)
        labels.append(label)
    return LabeledDataset(images, np.array(labels), list(SYNTHETIC_CLASSES))
