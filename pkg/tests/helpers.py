"""Shared test utilities."""

def randomize_state(module, rng):
    """Random biases, BN affine terms and running statistics.

    Freshly initialised zeros put pre-activations exactly on the ReLU kink (an
    all-zero input plus zero bias and beta), where finite differences are not a
    valid oracle; a trained-like state avoids that.
    """
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta", "squeeze_bias", "excite_bias", "spatial_bias"):
            p.data[...] = rng.normal(0.0, 0.3, p.shape)
        elif leaf == "gamma":
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
    for name, b in module.named_buffers():
        b[...] = rng.normal(0.0, 0.3, b.shape) if name.endswith("mean") else rng.uniform(0.5, 1.5, b.shape)
    return module


ACCEPTANCE: list[str] = []


class criterion:
    """Record one PASS/FAIL line for an acceptance criterion around a block."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return False
