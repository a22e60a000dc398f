from __future__ import annotations

import numpy as np

from fedifl.nn.functional import ShapeError


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             frozen: bool = False) -> dict[str, np.ndarray]:
    """In-place ``p -= lr * g`` over matching names; returns ``params``.

    Frozen parameters are left untouched bit-for-bit.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if frozen:
        return params
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}", g.shape, p.shape)
        p -= (lr * g).astype(p.dtype, copy=False)
    return params


def step_network(net, lr: float):
    """SGD over every unfrozen layer of a ``Sequential``."""
    for _, layer in net.layers:
        if layer.params and layer.grads:
            sgd_step(layer.params, layer.grads, lr, frozen=layer.frozen)


def clip_grad_norm(net, max_norm: float) -> float:
    """Rescale a network's gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    grads = [g for _, layer in net.layers for g in layer.grads.values()]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
