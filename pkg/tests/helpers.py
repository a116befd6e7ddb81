"""Shared test oracles: central finite differences against analytic grads."""

import numpy as np

import coprompt.autodiff as ad
from coprompt.autodiff import Tensor


def finite_diff_grad(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(arrays) w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    """Elementwise |a-b| / max(1, |a|, |b|): relative error with a unit floor."""
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def assert_grads_match(build, arrays, rtol=1e-6, h=1e-5):
    """Backward through `build` must match central finite differences.

    `build` maps a list of Tensors to a scalar Tensor and must be a pure
    function of its inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    ad.backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad.copy()
                for a, t in zip(arrays, tensors)]

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    numeric = finite_diff_grad(f, [a.copy() for a in arrays], h=h)
    for an, nu in zip(analytic, numeric):
        worst = rel_err(an, nu).max() if an.size else 0.0
        assert worst < rtol, f"gradient mismatch: worst relative error {worst:.3e}"


def random_projection(rng, shape):
    """Fixed random linear functional to reduce a non-scalar op to a scalar."""
    return Tensor(rng.normal(size=shape))
