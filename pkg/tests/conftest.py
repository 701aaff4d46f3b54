import numpy as np
import pytest

from prefrank import kernel

np.seterr(all="raise", under="ignore")


def numeric_grads(f, params, h=1e-5):
    """Central finite differences of the scalar ``f()`` wrt each param tensor.

    ``f`` must recompute the loss from the live param data on every call.
    """
    out = {}
    with kernel.no_grad():
        for name, p in params.items():
            g = np.zeros_like(p.data)
            flat, gf = p.data.ravel(), g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                gf[i] = (fp - fm) / (2.0 * h)
            out[name] = g
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    for name, num in numeric.items():
        ana = analytic[name]
        assert ana.shape == num.shape, name
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        rel = np.abs(ana - num) / denom
        worst = float(rel.max()) if rel.size else 0.0
        assert worst < rtol, f"{name}: max rel err {worst:.3e}"


def gradcheck(loss_fn, params, h=1e-5, rtol=1e-4):
    """loss_fn() -> Tensor scalar built from ``params``; checks tape vs FD."""
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: kernel.grad_or_zeros(p) for name, p in params.items()}

    def f():
        return loss_fn().item()

    assert_grads_close(analytic, numeric_grads(f, params, h=h), rtol=rtol)


@pytest.fixture
def tiny_vocab():
    from prefrank.policy import build_vocab

    return build_vocab(["alpha beta gamma delta", "beta epsilon zeta eta theta"])


@pytest.fixture
def tiny_policy(tiny_vocab):
    from prefrank.policy import PolicyConfig, create_policy

    cfg = PolicyConfig(model_dim=8, n_layers=1, n_heads=2, context_len=16, ffn_dim=8)
    return create_policy(tiny_vocab, cfg, seed=0)
