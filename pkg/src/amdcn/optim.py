"""Adam."""

from dataclasses import dataclass, field

import numpy as np

from amdcn.tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update.  ``params``/``grads`` are name-keyed dicts; returns ``(new_params, state)``.

    Parameters may be :class:`Tensor` or ndarray; the returned dict mirrors the input type.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        theta = p.data if isinstance(p, Tensor) else np.asarray(p)
        g = np.asarray(grads[name])
        if g.shape != theta.shape:
            raise ShapeError(f"adam: gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = (theta - step).astype(theta.dtype, copy=False)
        out[name] = Tensor._wrap(new, requires_grad=p.requires_grad) if isinstance(p, Tensor) else new
    return out, state
