import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_spd(rng, d, n=None):
    """Gram of a random tall input matrix, so it is SPD with a realistic spectrum."""
    n = 3 * d if n is None else n
    X = rng.normal(size=(n, d))
    return X.T @ X


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**kw):
    from slmkit.toylm.model import ModelConfig

    base = dict(vocab_size=12, d_model=8, n_layers=2, n_heads=2, head_dim=4, d_intermediate=12, max_seq_len=10)
    base.update(kw)
    return ModelConfig(**base)


def grad_check(model, tokens, G, n_coords=4, h=1e-5, seed=0):
    """Worst relative error of analytic vs central-difference gradients of sum(G * logits).

    Returns {tensor name: worst relative error} over ``n_coords`` random
    coordinates per tensor plus one random direction per tensor.
    """
    from slmkit.toylm.model import backward, forward

    rng = np.random.default_rng(seed)
    grads = backward(model, tokens, G)

    def f():
        return float(np.sum(G * forward(model, tokens).logits))

    worst = {}
    for name, W in model.tensors.items():
        errs = []
        dirs = []
        for _ in range(n_coords):
            e = np.zeros_like(W)
            e[np.unravel_index(rng.integers(W.size), W.shape)] = 1.0
            dirs.append(e)
        dirs.append(rng.normal(size=W.shape))
        for e in dirs:
            orig = W.copy()
            W += h * e
            fp = f()
            W[...] = orig - h * e
            fm = f()
            W[...] = orig
            fd = (fp - fm) / (2 * h)
            an = float(np.sum(grads[name] * e))
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        worst[name] = max(errs)
    return worst


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
