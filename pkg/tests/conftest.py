"""Shared helpers: finite-difference gradient checking."""

import numpy as np

import seqswap.autodiff as ad


def numeric_grad(fn, x, step=1e-6):
    """Central-difference gradient of scalar-valued fn at x (numpy array)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def gradcheck(build, inputs, step=1e-6, tol=1e-5):
    """Compare tape gradients of build(*tensors) against finite differences.

    build maps Tensor inputs to a scalar Tensor. inputs is a list of numpy
    arrays. Relative error uses max(|g_ad|, |g_fd|, 1) as the scale so tiny
    gradients are compared absolutely.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    with ad.Tape() as tape:
        tensors = [ad.param(a.copy()) for a in inputs]
        out = build(*tensors)
        ad.backward(out)
    grads = [t.grad.copy() for t in tensors]
    tape.clear()

    for k, a in enumerate(inputs):
        def scalar_fn(x, k=k):
            args = [v.copy() for v in inputs]
            args[k] = x
            with ad.Tape() as t2:
                ts = [ad.Tensor(v, requires_grad=False) for v in args]
                val = build(*ts)
            t2.clear()
            return float(val.data.reshape(-1)[0])

        g_fd = numeric_grad(scalar_fn, a.copy(), step=step)
        g_ad = grads[k]
        scale = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1.0)
        rel = np.abs(g_ad - g_fd) / scale
        assert rel.max() < tol, (
            f"input {k}: max rel err {rel.max():.3e} at {np.unravel_index(rel.argmax(), rel.shape)}"
        )
    return grads
