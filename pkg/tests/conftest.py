import numpy as np
import pytest

from diff2flow.net import TimeEmbedding, ToyModel


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def finite_difference(model, loss_fn, eps=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every trainable parameter."""
    out = {}
    for name, arr in model.trainable_parameters().items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            model.mark_updated()
            up = loss_fn()
            arr[idx] = orig - eps
            model.mark_updated()
            down = loss_fn()
            arr[idx] = orig
            model.mark_updated()
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


@pytest.fixture
def tiny_model():
    """Two dense layers, 74 parameters."""
    return ToyModel(hidden=(8,), embedding=TimeEmbedding(4), param="v", rng=np.random.default_rng(42))


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``with criterion(n, "title") as note:``; outcome is recorded even on failure."""
    from contextlib import contextmanager

    @contextmanager
    def run(number, title):
        details = []
        ACCEPTANCE[number] = (False, title)
        try:
            yield details
        except BaseException:
            ACCEPTANCE[number] = (False, f"{title}: {'; '.join(details)}" if details else title)
            raise
        ACCEPTANCE[number] = (True, f"{title}: {'; '.join(details)}" if details else title)

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
