"""Small building blocks shared by the backbone and the generator."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Value


def uniform(rng: np.random.Generator, shape, bound: float, name: str) -> Value:
    return Value(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str) -> Value:
    return Value(np.zeros(shape), requires_grad=True, name=name)


def gru_params(rng: np.random.Generator, in_dim: int, hidden: int, prefix: str) -> dict[str, Value]:
    """Gate blocks are laid out as [reset | update | candidate] along the last axis."""
    bound = 1.0 / np.sqrt(hidden)
    return {
        f"{prefix}.w_ih": uniform(rng, (in_dim, 3 * hidden), bound, f"{prefix}.w_ih"),
        f"{prefix}.w_hh": uniform(rng, (hidden, 3 * hidden), bound, f"{prefix}.w_hh"),
        f"{prefix}.b_ih": uniform(rng, (3 * hidden,), bound, f"{prefix}.b_ih"),
        f"{prefix}.b_hh": uniform(rng, (3 * hidden,), bound, f"{prefix}.b_hh"),
    }


def gru(x: Value, w_ih: Value, w_hh: Value, b_ih: Value, b_hh: Value) -> Value:
    """Run a gated recurrent cell over ``x`` of shape (batch, steps, in_dim).

    Returns every hidden state, shape (batch, steps, hidden); the initial
    state is zero.
    """
    batch, steps = x.shape[0], x.shape[1]
    hid = w_hh.shape[0]
    xp = x @ w_ih + b_ih
    h = Value(np.zeros((batch, hid)))
    outs = []
    for t in range(steps):
        xt = xp[:, t]
        hp = h @ w_hh + b_hh
        rz = nc.sigmoid(xt[:, :2 * hid] + hp[:, :2 * hid])
        r, z = rz[:, :hid], rz[:, hid:]
        n = nc.tanh(xt[:, 2 * hid:] + r * hp[:, 2 * hid:])
        h = n + z * (h - n)
        outs.append(h)
    return nc.stack(outs, axis=1)


def step_mask(lengths: np.ndarray, steps: int) -> np.ndarray:
    """(batch, steps) float mask, 1 where the step index is below the length."""
    return (np.arange(steps)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
