"""Forward/backward pairs for the layers the force estimators are built from.

Every forward returns (output, cache); the matching *_backward takes the
upstream gradient and the cache. Arrays are float64 throughout.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, huber, softmax

from fbgforce.core import FbgForceError

LEAKY_SLOPE = 0.01

Params = dict[str, np.ndarray]


class ShapeMismatch(FbgForceError, ValueError):
    pass


class HeadDivisibility(FbgForceError, ValueError):
    pass


# -- linear ------------------------------------------------------------------


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """y = x W^T + b over the last axis of x."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeMismatch(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b, (x, W)


def linear_backward(dy: np.ndarray, cache):
    x, W = cache
    dy2 = dy.reshape(-1, W.shape[0])
    dW = dy2.T @ x.reshape(-1, W.shape[1])
    db = dy2.sum(axis=0)
    return dy @ W, dW, db


# -- leaky ReLU --------------------------------------------------------------


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE):
    """x where x > 0, slope * x elsewhere; the gradient at exactly 0 is slope."""
    positive = x > 0
    return np.where(positive, x, slope * x), (positive, slope)


def leaky_relu_backward(dy: np.ndarray, cache):
    positive, slope = cache
    return np.where(positive, dy, slope * dy)


# -- GRU ---------------------------------------------------------------------


def gru_init_shapes(input_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    """Gate blocks are stacked in reset, update, candidate order."""
    return {
        "W_ih": (3 * hidden, input_dim),
        "W_hh": (3 * hidden, hidden),
        "b_ih": (3 * hidden,),
        "b_hh": (3 * hidden,),
    }


def gru_cell(x: np.ndarray, h_prev: np.ndarray, p: Params):
    """One GRU step for a batch: x (B, in), h_prev (B, H)."""
    H = h_prev.shape[-1]
    if p["W_hh"].shape != (3 * H, H) or x.shape[-1] != p["W_ih"].shape[1]:
        raise ShapeMismatch(f"gru_cell: x {x.shape}, h {h_prev.shape}, W_ih {p['W_ih'].shape}")
    gi = x @ p["W_ih"].T + p["b_ih"]
    gh = h_prev @ p["W_hh"].T + p["b_hh"]
    r = expit(gi[:, :H] + gh[:, :H])
    z = expit(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    hn = gh[:, 2 * H :]
    n = np.tanh(gi[:, 2 * H :] + r * hn)
    h = (1.0 - z) * n + z * h_prev
    return h, (x, h_prev, r, z, n, hn)


def gru_cell_backward(dh: np.ndarray, cache, p: Params):
    """Returns (dx, dh_prev, grads) for one step."""
    x, h_prev, r, z, n, hn = cache
    dz = dh * (h_prev - n)
    dn = dh * (1.0 - z)
    dh_prev = dh * z

    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * hn
    dhn = dn_pre * r
    dr_pre = dr * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)

    dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
    dgh = np.concatenate([dr_pre, dz_pre, dhn], axis=1)
    grads = {
        "W_ih": dgi.T @ x,
        "W_hh": dgh.T @ h_prev,
        "b_ih": dgi.sum(axis=0),
        "b_hh": dgh.sum(axis=0),
    }
    return dgi @ p["W_ih"], dh_prev + dgh @ p["W_hh"], grads


def gru_sequence(xs: np.ndarray, h0: np.ndarray, p: Params):
    """Unroll over xs (B, T, in); returns hidden states (B, T, H)."""
    B, T, _ = xs.shape
    hs = np.empty((B, T, h0.shape[-1]))
    caches = []
    h = h0
    for t in range(T):
        h, cache = gru_cell(xs[:, t], h, p)
        hs[:, t] = h
        caches.append(cache)
    return hs, caches


def gru_sequence_backward(dhs: np.ndarray, caches, p: Params, dh_last: np.ndarray | None = None):
    """Backpropagation through time; dh_last is the gradient on the carried final state."""
    B, T, H = dhs.shape
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    dxs = np.empty((B, T, p["W_ih"].shape[1]))
    dh_next = np.zeros((B, H)) if dh_last is None else dh_last
    for t in reversed(range(T)):
        dx, dh_next, step = gru_cell_backward(dhs[:, t] + dh_next, caches[t], p)
        dxs[:, t] = dx
        for name, g in step.items():
            grads[name] += g
    return dxs, dh_next, grads


# -- causal attention --------------------------------------------------------


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    B, T, D = a.shape
    return a.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    B, h, T, dh = a.shape
    return a.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int):
    """Multi-head scaled dot-product attention where position t sees positions <= t."""
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if heads < 1 or q.shape[-1] % heads:
        raise HeadDivisibility(f"model dim {q.shape[-1]} is not divisible by {heads} heads")
    T = q.shape[1]
    scale = 1.0 / np.sqrt(q.shape[-1] // heads)
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    scores = qh @ kh.transpose(0, 1, 3, 2) * scale
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    attn = softmax(scores, axis=-1)
    return _merge_heads(attn @ vh), (qh, kh, vh, attn, scale, heads)


def causal_attention_backward(dy: np.ndarray, cache):
    qh, kh, vh, attn, scale, heads = cache
    dyh = _split_heads(dy, heads)
    dv = attn.transpose(0, 1, 3, 2) @ dyh
    da = dyh @ vh.transpose(0, 1, 3, 2)
    ds = attn * (da - np.sum(da * attn, axis=-1, keepdims=True))
    dq = ds @ kh * scale
    dk = ds.transpose(0, 1, 3, 2) @ qh * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


# -- loss and optimiser ------------------------------------------------------


def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0):
    """Mean Huber loss and its gradient with respect to pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"huber: pred {pred.shape}, target {target.shape}")
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    r = pred - target
    if r.size == 0:
        return 0.0, np.zeros_like(r)
    return float(np.mean(huber(delta, r))), np.clip(r, -delta, delta) / r.size


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """Bias-corrected Adam; no weight decay and no learning-rate schedule."""
    if params.keys() != grads.keys():
        raise ShapeMismatch(f"params {sorted(params)} and grads {sorted(grads)} differ")
    step = state.step + 1
    new_params: Params = {}
    m: Params = {}
    v: Params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: param {p.shape}, grad {g.shape}")
        m[name] = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        m_hat = m[name] / (1.0 - state.beta1**step)
        v_hat = v[name] / (1.0 - state.beta2**step)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=step, m=m, v=v
    )
    return new_params, new_state


# -- verification ------------------------------------------------------------


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    f maps x to (value, gradient). With max_coords, a seeded random subset of
    coordinates is checked.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    coords = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        coords = np.random.default_rng(seed).choice(x.size, size=max_coords, replace=False)

    flat = x.ravel()
    worst = 0.0
    for i in coords:
        saved = flat[i]
        flat[i] = saved + eps
        plus, _ = f(x)
        flat[i] = saved - eps
        minus, _ = f(x)
        flat[i] = saved
        numeric = (plus - minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst
