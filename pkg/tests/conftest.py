import numpy as np
import pytest

from dicap import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at x (x is modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_grads(build, params, eps=1e-6):
    """Autodiff vs finite differences for a scalar graph ``build()``."""
    with ad.Tape() as tape:
        out = build()
    grads = ad.backward(tape, out, params)
    worst = 0.0
    for p in params:
        fd = numeric_grad(lambda: build().item(), p.value, eps)
        worst = max(worst, rel_err(grads[p], fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, printed once at the end of the session
_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per criterion: ``acceptance(key, ok, detail)``."""

    def record(key: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[key] = f"{'PASS' if ok else 'FAIL'}  {key}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[1])):
        terminalreporter.write_line(_ACCEPTANCE[key])
