"""Minimal differentiable kernel: dense, LSTM, additive attention, BCE, KLD.

Everything is float64 numpy with hand-written analytic gradients; the test
suite checks every backward pass against central finite differences. There
is no autodiff graph: each layer's forward returns a cache and its backward
consumes it, accumulating parameter gradients into the shared ParamStore.

Layer outputs are health-checked: a NaN or Inf anywhere raises
NumericHealthError instead of silently corrupting a training run.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NumericHealthError, ParseError, SchemaError

CLAMP = 1e-7
KLD_VAR_FLOOR = 1e-5

PARAMS_HEADER = "#uplift-mtd-params v1"


def check_health(arr: np.ndarray, what: str) -> np.ndarray:
    # a non-finite entry makes the sum non-finite; cheaper than isfinite().all()
    if not np.isfinite(float(arr.sum())):
        raise NumericHealthError(f"non-finite values in {what}")
    return arr


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with matching gradient slots.

    Flattening order is the sorted name list, so gradient checks and
    checkpoints are stable regardless of registration order.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise SchemaError(f"parameter {name!r} registered twice")
        self.params[name] = np.asarray(value, dtype=float)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list[str]:
        return sorted(self.params)

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([self.grads[n].ravel() for n in self.names()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise SchemaError(f"flat vector has {vec.shape}, store holds {self.size}")
        at = 0
        for n in self.names():
            p = self.params[n]
            p[...] = vec[at : at + p.size].reshape(p.shape)
            at += p.size

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.copy() for n, p in self.params.items()}

    def restore_values(self, snapshot: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p[...] = snapshot[n]

    # -- checkpoint text format (docs/file-formats.md) --

    def dumps(self) -> str:
        lines = [PARAMS_HEADER]
        for n in self.names():
            p = self.params[n]
            shape = " ".join(str(d) for d in p.shape)
            lines.append(f"{n} {len(p.shape)} {shape}".rstrip())
            lines.append(" ".join(repr(float(v)) for v in p.ravel()))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def load(self, path) -> None:
        self.loads(Path(path).read_text(encoding="utf-8"))

    def loads(self, text: str) -> None:
        lines = text.splitlines()
        if not lines or lines[0] != PARAMS_HEADER:
            raise ParseError(f"bad checkpoint header; expected {PARAMS_HEADER!r}", line=1)
        seen = set()
        i = 1
        while i < len(lines):
            if not lines[i].strip():
                i += 1
                continue
            head = lines[i].split()
            name, ndim = head[0], int(head[1])
            shape = tuple(int(d) for d in head[2 : 2 + ndim])
            if len(shape) != ndim:
                raise ParseError(f"truncated shape for {name}", line=i + 1)
            if name not in self.params:
                raise SchemaError(f"checkpoint parameter {name!r} unknown to this model")
            if self.params[name].shape != shape:
                raise SchemaError(
                    f"checkpoint {name}: shape {shape} != model {self.params[name].shape}"
                )
            vals = np.array([float(v) for v in lines[i + 1].split()])
            if vals.size != self.params[name].size:
                raise ParseError(f"wrong value count for {name}", line=i + 2)
            self.params[name][...] = vals.reshape(shape)
            seen.add(name)
            i += 2
        missing = set(self.params) - seen
        if missing:
            raise SchemaError(f"checkpoint missing parameters: {sorted(missing)}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------

ACTIVATIONS = ("identity", "relu", "sigmoid")


class Dense:
    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_out: int,
                 activation: str, rng: np.random.Generator):
        if activation not in ACTIVATIONS:
            raise SchemaError(f"unknown activation {activation!r}")
        self.prefix = prefix
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.store = store
        self.w = store.add(f"{prefix}.w", glorot_uniform(rng, n_in, n_out, (n_in, n_out)))
        self.b = store.add(f"{prefix}.b", np.zeros(n_out))

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise SchemaError(f"{self.prefix}: input shape {x.shape} != (*, {self.n_in})")
        pre = x @ self.w + self.b
        if self.activation == "relu":
            out = np.maximum(pre, 0.0)
        elif self.activation == "sigmoid":
            out = sigmoid(pre)
        else:
            out = pre
        check_health(out, f"{self.prefix} output")
        return out, (x, pre, out)

    def backward(self, d_out: np.ndarray, cache) -> np.ndarray:
        x, pre, out = cache
        if self.activation == "relu":
            d_pre = d_out * (pre > 0)
        elif self.activation == "sigmoid":
            d_pre = d_out * out * (1.0 - out)
        else:
            d_pre = d_out
        self.store.grads[f"{self.prefix}.w"] += x.T @ d_pre
        self.store.grads[f"{self.prefix}.b"] += d_pre.sum(axis=0)
        return d_pre @ self.w.T


class DenseStack:
    """Sequential dense layers."""

    def __init__(self, store, prefix, sizes: list[int], activations: list[str], rng):
        if len(activations) != len(sizes) - 1:
            raise SchemaError("need one activation per layer")
        self.layers = [
            Dense(store, f"{prefix}.{i}", sizes[i], sizes[i + 1], act, rng)
            for i, act in enumerate(activations)
        ]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, d_out, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d_out = layer.backward(d_out, cache)
        return d_out


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


class Lstm:
    """Single-layer LSTM over padded sequences.

    Gate order in the stacked weight matrices is (input, forget, candidate,
    output). Masked steps copy (h, c) forward unchanged, so padding neither
    changes the output nor leaks gradient into the parameters. The forget
    gate bias starts at +1.
    """

    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator):
        self.prefix = prefix
        self.n_in, self.n_hidden = n_in, n_hidden
        self.store = store
        h = n_hidden
        self.wx = store.add(f"{prefix}.wx", glorot_uniform(rng, n_in, h, (n_in, 4 * h)))
        self.wh = store.add(f"{prefix}.wh", glorot_uniform(rng, h, h, (h, 4 * h)))
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        self.b = store.add(f"{prefix}.b", b)

    def forward(self, x: np.ndarray, mask: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise SchemaError(f"{self.prefix}: input shape {x.shape} != (B, S, {self.n_in})")
        if mask.shape != x.shape[:2]:
            raise SchemaError(f"{self.prefix}: mask shape {mask.shape} != {x.shape[:2]}")
        n_b, n_s, _ = x.shape
        h_dim = self.n_hidden
        h = np.zeros((n_b, h_dim))
        c = np.zeros((n_b, h_dim))
        hs = np.zeros((n_b, n_s, h_dim))
        steps = []
        for t in range(n_s):
            m = mask[:, t : t + 1]
            z = x[:, t, :] @ self.wx + h @ self.wh + self.b
            i = sigmoid(z[:, :h_dim])
            f = sigmoid(z[:, h_dim : 2 * h_dim])
            g = np.tanh(z[:, 2 * h_dim : 3 * h_dim])
            o = sigmoid(z[:, 3 * h_dim :])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            steps.append((x[:, t, :], h, c, i, f, g, o, c_new, tc, m))
            h = m * h_new + (1.0 - m) * h
            c = m * c_new + (1.0 - m) * c
            hs[:, t, :] = h
        check_health(hs, f"{self.prefix} hidden states")
        return hs, steps

    def backward(self, d_hs: np.ndarray, caches) -> np.ndarray:
        n_b, n_s, h_dim = d_hs.shape
        g_wx = self.store.grads[f"{self.prefix}.wx"]
        g_wh = self.store.grads[f"{self.prefix}.wh"]
        g_b = self.store.grads[f"{self.prefix}.b"]
        d_x = np.zeros((n_b, n_s, self.n_in))
        dh = np.zeros((n_b, h_dim))
        dc = np.zeros((n_b, h_dim))
        for t in range(n_s - 1, -1, -1):
            x_t, h_prev, c_prev, i, f, g, o, c_new, tc, m = caches[t]
            dh_total = dh + d_hs[:, t, :]
            dh_new = m * dh_total
            dh_prev = (1.0 - m) * dh_total
            dc_new = m * dc
            dc_prev = (1.0 - m) * dc
            d_o = dh_new * tc
            dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
            d_f = dc_new * c_prev
            d_i = dc_new * g
            d_g = dc_new * i
            dc_prev = dc_prev + dc_new * f
            dz = np.concatenate(
                [
                    d_i * i * (1.0 - i),
                    d_f * f * (1.0 - f),
                    d_g * (1.0 - g * g),
                    d_o * o * (1.0 - o),
                ],
                axis=1,
            )
            g_wx += x_t.T @ dz
            g_wh += h_prev.T @ dz
            g_b += dz.sum(axis=0)
            d_x[:, t, :] = dz @ self.wx.T
            dh = dz @ self.wh.T + dh_prev
            dc = dc_prev
        return d_x


# ---------------------------------------------------------------------------
# Additive attention
# ---------------------------------------------------------------------------


class AdditiveAttention:
    """Pool LSTM hidden states with scores e_t = v . tanh(Wh h_t + Wx q).

    The softmax runs over unmasked steps only; a fully masked row (control
    sample) yields zero weights and a zero pooled vector.
    """

    def __init__(self, store: ParamStore, prefix: str, n_hidden: int, n_query: int,
                 n_attn: int, rng: np.random.Generator):
        self.prefix = prefix
        self.n_hidden, self.n_query, self.n_attn = n_hidden, n_query, n_attn
        self.store = store
        self.wh = store.add(f"{prefix}.wh", glorot_uniform(rng, n_hidden, n_attn, (n_hidden, n_attn)))
        self.wx = store.add(f"{prefix}.wx", glorot_uniform(rng, n_query, n_attn, (n_query, n_attn)))
        self.v = store.add(f"{prefix}.v", glorot_uniform(rng, n_attn, 1, (n_attn,)))

    def forward(self, hs: np.ndarray, query: np.ndarray, mask: np.ndarray):
        if hs.ndim != 3 or hs.shape[2] != self.n_hidden:
            raise SchemaError(f"{self.prefix}: hidden shape {hs.shape}")
        if query.shape != (hs.shape[0], self.n_query):
            raise SchemaError(f"{self.prefix}: query shape {query.shape}")
        pre = hs @ self.wh + (query @ self.wx)[:, None, :]
        tan = np.tanh(pre)
        e = tan @ self.v
        live = mask > 0.0
        e_shift = np.where(live, e, -np.inf)
        row_max = np.max(e_shift, axis=1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)  # all-masked rows
        ex = np.where(live, np.exp(e_shift - row_max), 0.0)
        denom = ex.sum(axis=1, keepdims=True)
        alpha = np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)
        z = np.einsum("bs,bsh->bh", alpha, hs)
        check_health(z, f"{self.prefix} pooled vector")
        return alpha, z, (hs, query, tan, alpha)

    def backward(self, d_alpha: Optional[np.ndarray], d_z: np.ndarray, cache):
        hs, query, tan, alpha = cache
        d_alpha_total = np.einsum("bh,bsh->bs", d_z, hs)
        if d_alpha is not None:
            d_alpha_total = d_alpha_total + d_alpha
        d_hs = alpha[:, :, None] * d_z[:, None, :]
        # softmax backward; rows with alpha all-zero produce zeros throughout
        inner = (alpha * d_alpha_total).sum(axis=1, keepdims=True)
        d_e = alpha * (d_alpha_total - inner)
        d_tan = d_e[:, :, None] * self.v[None, None, :]
        d_pre = d_tan * (1.0 - tan * tan)
        self.store.grads[f"{self.prefix}.v"] += np.einsum("bs,bsa->a", d_e, tan)
        self.store.grads[f"{self.prefix}.wh"] += np.einsum("bsh,bsa->ha", hs, d_pre)
        d_q = d_pre.sum(axis=1)
        self.store.grads[f"{self.prefix}.wx"] += query.T @ d_q
        d_hs = d_hs + d_pre @ self.wh.T
        d_query = d_q @ self.wx.T
        return d_hs, d_query


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_loss(pred: np.ndarray, label: np.ndarray):
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7].

    Returns (loss, d_loss/d_pred); the gradient is zero where the clamp is
    active.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise SchemaError("pred/label shape mismatch")
    if pred.size == 0:
        raise SchemaError("empty loss batch")
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    loss = float(-np.mean(label * np.log(p) + (1.0 - label) * np.log1p(-p)))
    inside = (pred > CLAMP) & (pred < 1.0 - CLAMP)
    grad = np.where(inside, (p - label) / (p * (1.0 - p) * pred.size), 0.0)
    return loss, grad


def gaussian_kld(treated_repr: np.ndarray, control_repr: np.ndarray,
                 eps: float = KLD_VAR_FLOOR):
    """KL(treated || control) between moment-matched diagonal Gaussians.

    Each batch is summarized by per-dimension mean and population variance
    clamped below by eps; the closed-form KL is summed over dimensions.
    Returns (value, d_treated, d_control); the variance part of the gradient
    is zero where the clamp is active, mirroring the BCE clamp.
    """
    a = np.asarray(treated_repr, dtype=float)
    b = np.asarray(control_repr, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise SchemaError("representation batches must be 2-D with equal width")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise SchemaError("each representation batch needs at least 2 rows")
    n_a, n_b = a.shape[0], b.shape[0]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    raw_var_a = a.var(axis=0)
    raw_var_b = b.var(axis=0)
    var_a = np.maximum(raw_var_a, eps)
    var_b = np.maximum(raw_var_b, eps)
    diff = mu_a - mu_b
    kl = 0.5 * (np.log(var_b / var_a) + (var_a + diff * diff) / var_b - 1.0)
    value = float(kl.sum())

    # d kl / d mu_a = diff / var_b ; d kl / d var_a = 0.5 (1/var_b - 1/var_a)
    d_mu_a = diff / var_b
    d_mu_b = -diff / var_b
    d_var_a = np.where(raw_var_a > eps, 0.5 * (1.0 / var_b - 1.0 / var_a), 0.0)
    d_var_b = np.where(
        raw_var_b > eps,
        0.5 * (1.0 / var_b - (var_a + diff * diff) / (var_b * var_b)),
        0.0,
    )
    # var = mean(x^2) - mean(x)^2 ; d var / d x_i = 2 (x_i - mu) / n
    d_a = d_mu_a / n_a + d_var_a * 2.0 * (a - mu_a) / n_a
    d_b = d_mu_b / n_b + d_var_b * 2.0 * (b - mu_b) / n_b
    return value, d_a, d_b


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam moments with decoupled L2 decay (applied to every parameter)."""

    def __init__(self, store: ParamStore, learning_rate: float, l2: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = learning_rate
        self.l2 = l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in store.params.items()}
        self.v = {n: np.zeros_like(p) for n, p in store.params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for n in self.store.names():
            g = self.store.grads[n]
            check_health(g, f"gradient of {n}")
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p = self.store.params[n]
            p -= self.lr * update
            if self.l2:
                p -= self.lr * self.l2 * p
