"""Small numpy scorers with hand-written backward passes.

``TwoTower`` embeds user and item separately and scores by dot product;
``Mlp`` scores the concatenation ``[user, item, user * item]``. Both map a
user batch ``(B, d)`` and item lists ``(B, N, d)`` to scores ``(B, N)``.
Parameters live in flat ``{name: ndarray}`` dicts so the optimizer and the
checkpoint code stay model-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import InvalidArgument

Params = dict[str, np.ndarray]


def init_dense_stack(rng: np.random.Generator, dims: Sequence[int], prefix: str) -> Params:
    """He-initialised weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}.{i}.W"] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"{prefix}.{i}.b"] = np.zeros(fan_out)
    return params


def _stack_forward(params: Params, prefix: str, n_layers: int, x: np.ndarray, relu_last: bool = False):
    cache = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[f"{prefix}.{i}.W"] + params[f"{prefix}.{i}.b"]
        last = i == n_layers - 1
        h = z if (last and not relu_last) else np.maximum(z, 0.0)
        cache.append(z)
    return h, cache


def _stack_backward(params: Params, prefix: str, n_layers: int, cache, dh: np.ndarray, grads: Params,
                    relu_last: bool = False) -> np.ndarray:
    for i in reversed(range(n_layers)):
        z = cache[i + 1]
        last = i == n_layers - 1
        dz = dh if (last and not relu_last) else dh * (z > 0.0)
        if i == 0:
            inp = cache[0]
        else:
            zp = cache[i]
            inp = np.maximum(zp, 0.0)
        W = params[f"{prefix}.{i}.W"]
        flat_in = inp.reshape(-1, inp.shape[-1])
        flat_dz = dz.reshape(-1, dz.shape[-1])
        grads[f"{prefix}.{i}.W"] = grads.get(f"{prefix}.{i}.W", 0.0) + flat_in.T @ flat_dz
        grads[f"{prefix}.{i}.b"] = grads.get(f"{prefix}.{i}.b", 0.0) + flat_dz.sum(axis=0)
        dh = dz @ W.T
    return dh


def _check_inputs(user, items, feature_dim: int):
    u = np.asarray(user, dtype=np.float64)
    x = np.asarray(items, dtype=np.float64)
    single = u.ndim == 1
    if single:
        u = u[None, :]
        x = x[None, :, :]
    if u.ndim != 2 or x.ndim != 3 or u.shape[0] != x.shape[0]:
        raise InvalidArgument("expected user (B, d) and items (B, N, d)")
    if u.shape[1] != feature_dim or x.shape[2] != feature_dim:
        raise InvalidArgument(f"feature dimension mismatch: model expects {feature_dim}")
    return u, x, single


@dataclass
class TwoTower:
    feature_dim: int = 16
    hidden: tuple[int, ...] = (32,)
    embedding_dim: int = 16
    params: Params = field(default_factory=dict)
    kind: str = "two_tower"

    @property
    def dims(self) -> list[int]:
        return [self.feature_dim, *self.hidden, self.embedding_dim]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @classmethod
    def init(cls, seed, feature_dim: int = 16, hidden=(32,), embedding_dim: int = 16) -> "TwoTower":
        m = cls(feature_dim, tuple(hidden), embedding_dim)
        rng = np.random.default_rng(seed)
        m.params = {**init_dense_stack(rng, m.dims, "user"), **init_dense_stack(rng, m.dims, "item")}
        return m

    def forward(self, user, items):
        u, x, single = _check_inputs(user, items, self.feature_dim)
        eu, cu = _stack_forward(self.params, "user", self.n_layers, u)
        ei, ci = _stack_forward(self.params, "item", self.n_layers, x)
        scores = np.einsum("bne,be->bn", ei, eu)
        cache = (cu, ci, eu, ei, single)
        return (scores[0] if single else scores), cache

    def backward(self, cache, d_scores) -> Params:
        cu, ci, eu, ei, single = cache
        ds = np.asarray(d_scores, dtype=np.float64)
        ds = ds[None, :] if single else ds
        if ds.shape != ei.shape[:2]:
            raise InvalidArgument(f"upstream gradient shape {ds.shape} != scores shape {ei.shape[:2]}")
        grads: Params = {}
        d_eu = np.einsum("bn,bne->be", ds, ei)
        d_ei = ds[:, :, None] * eu[:, None, :]
        _stack_backward(self.params, "user", self.n_layers, cu, d_eu, grads)
        _stack_backward(self.params, "item", self.n_layers, ci, d_ei, grads)
        return grads

    def score(self, user, items) -> np.ndarray:
        return self.forward(user, items)[0]


@dataclass
class Mlp:
    feature_dim: int = 16
    hidden: tuple[int, ...] = (32,)
    params: Params = field(default_factory=dict)
    kind: str = "mlp"

    @property
    def dims(self) -> list[int]:
        return [3 * self.feature_dim, *self.hidden, 1]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @classmethod
    def init(cls, seed, feature_dim: int = 16, hidden=(32,)) -> "Mlp":
        m = cls(feature_dim, tuple(hidden))
        m.params = init_dense_stack(np.random.default_rng(seed), m.dims, "mlp")
        return m

    def forward(self, user, items):
        u, x, single = _check_inputs(user, items, self.feature_dim)
        ub = np.broadcast_to(u[:, None, :], x.shape)
        h = np.concatenate([ub, x, ub * x], axis=-1)
        out, cache = _stack_forward(self.params, "mlp", self.n_layers, h)
        scores = out[..., 0]
        return (scores[0] if single else scores), (cache, single)

    def backward(self, cache, d_scores) -> Params:
        cache, single = cache
        ds = np.asarray(d_scores, dtype=np.float64)
        ds = ds[None, :] if single else ds
        if ds.shape != cache[-1].shape[:2]:
            raise InvalidArgument(f"upstream gradient shape {ds.shape} != scores shape {cache[-1].shape[:2]}")
        grads: Params = {}
        _stack_backward(self.params, "mlp", self.n_layers, cache, ds[..., None], grads)
        return grads

    def score(self, user, items) -> np.ndarray:
        return self.forward(user, items)[0]


def score_two_tower(params: Params, user, items, hidden=None) -> np.ndarray:
    d = params["user.0.W"].shape[0]
    n_layers = sum(1 for k in params if k.startswith("user.") and k.endswith(".W"))
    emb = params[f"user.{n_layers - 1}.W"].shape[1]
    hidden = tuple(params[f"user.{i}.W"].shape[1] for i in range(n_layers - 1)) if hidden is None else hidden
    return TwoTower(d, tuple(hidden), emb, params).score(user, items)


def score_mlp(params: Params, user, items) -> np.ndarray:
    n_layers = sum(1 for k in params if k.startswith("mlp.") and k.endswith(".W"))
    d = params["mlp.0.W"].shape[0] // 3
    hidden = tuple(params[f"mlp.{i}.W"].shape[1] for i in range(n_layers - 1))
    return Mlp(d, hidden, params).score(user, items)


def backprop_scores(model, cache, d_scores) -> Params:
    """Chain ``dL/dscores`` into parameter gradients for ``model``."""
    return model.backward(cache, d_scores)


# --- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient are left alone."""
    t = state.step + 1
    m_new, v_new, p_new = dict(state.m), dict(state.v), dict(params)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_new[name], v_new[name] = m, v
        p_new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return p_new, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m_new, v_new)


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, namespaces: dict[str, Params]) -> None:
    """Store several parameter dicts under ``namespace/name`` keys, sorted."""
    flat = {}
    for ns, params in namespaces.items():
        for name, arr in params.items():
            flat[f"{ns}/{name}"] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: flat[k] for k in sorted(flat)})


def load_checkpoint(path, namespace: str | None = None) -> dict[str, Params]:
    """Load a checkpoint; with ``namespace`` only that model's tensors are read."""
    out: dict[str, Params] = {}
    with np.load(path) as data:
        for key in sorted(data.files):
            ns, name = key.split("/", 1)
            if namespace is not None and ns != namespace:
                continue
            out.setdefault(ns, {})[name] = data[key].copy()
    return out
