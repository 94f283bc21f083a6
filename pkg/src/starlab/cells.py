"""The five recurrent cell types: forward dynamics, hand-derived backward
passes, closed-form input/state Jacobians, parameter accounting, and a flat
binary checkpoint format.

Conventions: states and inputs are column vectors, batched as (n, B)
matrices (a 1-D array is the batch-1 case and round-trips as 1-D). All
arithmetic is float64. Gate derivatives are taken from cached
post-activations: sigmoid' = s(1-s), tanh' = 1 - t^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import Rng, orthogonal_matrix, orthogonal_stack


class CellKind(str, Enum):
    VRNN = "vrnn"
    LSTM = "lstm"
    LSTMWF = "lstmwf"
    GRU = "gru"
    STAR = "star"


# Weight shape table. "x" marks an input projection (n_hidden x n_in),
# "h" a recurrent one (n_hidden x n_hidden). Order is the (fixed) init and
# serialization order.
_WEIGHTS: dict[CellKind, tuple[tuple[str, str], ...]] = {
    CellKind.VRNN: (("W_x", "x"), ("W_h", "h")),
    CellKind.LSTM: (
        ("W_xi", "x"), ("W_hi", "h"),
        ("W_xf", "x"), ("W_hf", "h"),
        ("W_xo", "x"), ("W_ho", "h"),
        ("W_xz", "x"), ("W_hz", "h"),
    ),
    CellKind.LSTMWF: (
        ("W_xf", "x"), ("W_hf", "h"),
        ("W_xz", "x"), ("W_hz", "h"),
    ),
    CellKind.GRU: (
        ("W_xz", "x"), ("W_hz", "h"),
        ("W_xr", "x"), ("W_hr", "h"),
        ("W_xh", "x"), ("W_hh", "h"),
    ),
    CellKind.STAR: (("W_z", "x"), ("W_x", "x"), ("W_h", "h")),
}

_BIASES: dict[CellKind, tuple[str, ...]] = {
    CellKind.VRNN: ("b",),
    CellKind.LSTM: ("b_i", "b_f", "b_o", "b_z"),
    CellKind.LSTMWF: ("b_f", "b_z"),
    CellKind.GRU: ("b_z", "b_r", "b_h"),
    CellKind.STAR: ("b_z", "b_k"),
}


@dataclass
class CellParams:
    kind: CellKind
    n_in: int
    n_hidden: int
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]

    def named_arrays(self):
        """(name, array) pairs in the canonical order, weights then biases."""
        for name, _ in _WEIGHTS[self.kind]:
            yield name, self.weights[name]
        for name in _BIASES[self.kind]:
            yield name, self.biases[name]

    def copy(self) -> "CellParams":
        return CellParams(
            self.kind, self.n_in, self.n_hidden,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.biases.items()},
        )


@dataclass
class CellGrads:
    kind: CellKind
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: CellParams) -> "CellGrads":
        return cls(
            params.kind,
            {k: np.zeros_like(v) for k, v in params.weights.items()},
            {k: np.zeros_like(v) for k, v in params.biases.items()},
        )

    def named_arrays(self):
        for name, _ in _WEIGHTS[self.kind]:
            yield name, self.weights[name]
        for name in _BIASES[self.kind]:
            yield name, self.biases[name]

    def iadd(self, other: "CellGrads") -> "CellGrads":
        for k, v in other.weights.items():
            self.weights[k] += v
        for k, v in other.biases.items():
            self.biases[k] += v
        return self

    def scaled(self, factor: float) -> "CellGrads":
        return CellGrads(
            self.kind,
            {k: v * factor for k, v in self.weights.items()},
            {k: v * factor for k, v in self.biases.items()},
        )

    def sq_norm(self) -> float:
        total = 0.0
        for _, arr in self.named_arrays():
            total += float(np.dot(arr.ravel(), arr.ravel()))
        return total

    def norm(self) -> float:
        """L2 norm over every weight and bias entry together."""
        return float(np.sqrt(self.sq_norm()))


@dataclass
class ForwardCache:
    """Everything the backward pass needs, post-activations only."""
    kind: CellKind
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray
    gates: dict[str, np.ndarray] = field(default_factory=dict)
    c_prev: np.ndarray | None = None
    c: np.ndarray | None = None
    squeeze: bool = False


def param_count(kind: CellKind, n_in: int, n_hidden: int) -> int:
    """Exact trainable scalar count for one cell."""
    if n_in < 1 or n_hidden < 1:
        raise ValueError("dims must be >= 1")
    total = 0
    for _, role in _WEIGHTS[kind]:
        total += n_hidden * (n_in if role == "x" else n_hidden)
    total += n_hidden * len(_BIASES[kind])
    return total


def chrono_bias(n: int, t_max: int, rng: Rng) -> np.ndarray:
    """-log(u) with u ~ U[1, t_max - 1]: biases a gate toward retaining memory
    over horizons up to t_max. The train module re-exports this as the public
    chrono initializer; LSTM uses the +log(u) flip for its forget gate."""
    if t_max < 2:
        raise ValueError("t_max must be >= 2")
    u = 1.0 + rng.uniforms(n) * (t_max - 2)
    return -np.log(u)


def init_params(
    kind: CellKind,
    n_in: int,
    n_hidden: int,
    t_max: int,
    rng: Rng,
    analysis: bool = False,
) -> CellParams:
    """Semi-orthogonal weights; chrono-initialized gate biases (training) or
    all-zero biases (analysis, the fixed-point setting)."""
    if n_in < 1 or n_hidden < 1:
        raise ValueError("dims must be >= 1")
    weights = {}
    if n_in == n_hidden:
        stack = orthogonal_stack(rng.derive(100), n_hidden, len(_WEIGHTS[kind]))
        for i, (name, _) in enumerate(_WEIGHTS[kind]):
            weights[name] = np.ascontiguousarray(stack[i])
    else:
        for i, (name, role) in enumerate(_WEIGHTS[kind]):
            cols = n_in if role == "x" else n_hidden
            weights[name] = orthogonal_matrix(rng.derive(100, i), n_hidden, cols)
    biases = {name: np.zeros(n_hidden) for name in _BIASES[kind]}
    if not analysis:
        crng = rng.derive(200)
        if kind == CellKind.STAR:
            biases["b_k"] = chrono_bias(n_hidden, t_max, crng)
        elif kind == CellKind.LSTM:
            biases["b_f"] = -chrono_bias(n_hidden, t_max, crng)  # +log(u)
            biases["b_i"] = -biases["b_f"]
        elif kind == CellKind.LSTMWF:
            biases["b_f"] = -chrono_bias(n_hidden, t_max, crng)
        elif kind == CellKind.GRU:
            biases["b_z"] = chrono_bias(n_hidden, t_max, crng)
    return CellParams(kind, n_in, n_hidden, weights, biases)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_cols(v: np.ndarray, n: int, what: str) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        if v.shape[0] != n:
            raise ValueError(f"{what}: expected length {n}, got {v.shape[0]}")
        return v[:, None], True
    if v.ndim == 2:
        if v.shape[0] != n:
            raise ValueError(f"{what}: expected {n} rows, got {v.shape[0]}")
        return v, False
    raise ValueError(f"{what}: expected 1-D or 2-D array")


def forward(
    params: CellParams,
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray | None = None,
):
    """One cell update. Returns (h, c, cache); c is None except for LSTM."""
    kind = params.kind
    x2, sq = _as_cols(x, params.n_in, "x")
    h2, _ = _as_cols(h_prev, params.n_hidden, "h_prev")
    if x2.shape[1] != h2.shape[1]:
        raise ValueError("x and h_prev batch sizes differ")
    if (c_prev is not None) != (kind == CellKind.LSTM):
        raise ValueError("c_prev must be given exactly for LSTM cells")
    w, b = params.weights, params.biases

    if kind == CellKind.VRNN:
        h = np.tanh(w["W_x"] @ x2 + w["W_h"] @ h2 + b["b"][:, None])
        cache = ForwardCache(kind, x2, h2, h, squeeze=sq)
        return (h[:, 0] if sq else h), None, cache

    if kind == CellKind.STAR:
        z = np.tanh(w["W_z"] @ x2 + b["b_z"][:, None])
        k = _sigmoid(w["W_x"] @ x2 + w["W_h"] @ h2 + b["b_k"][:, None])
        h = np.tanh((1.0 - k) * h2 + k * z)
        cache = ForwardCache(kind, x2, h2, h, gates={"z": z, "k": k}, squeeze=sq)
        return (h[:, 0] if sq else h), None, cache

    if kind == CellKind.LSTM:
        c2, _ = _as_cols(c_prev, params.n_hidden, "c_prev")
        i = _sigmoid(w["W_xi"] @ x2 + w["W_hi"] @ h2 + b["b_i"][:, None])
        f = _sigmoid(w["W_xf"] @ x2 + w["W_hf"] @ h2 + b["b_f"][:, None])
        o = _sigmoid(w["W_xo"] @ x2 + w["W_ho"] @ h2 + b["b_o"][:, None])
        z = np.tanh(w["W_xz"] @ x2 + w["W_hz"] @ h2 + b["b_z"][:, None])
        c = f * c2 + i * z
        h = o * np.tanh(c)
        cache = ForwardCache(
            kind, x2, h2, h, gates={"i": i, "f": f, "o": o, "z": z},
            c_prev=c2, c=c, squeeze=sq,
        )
        return (h[:, 0] if sq else h), (c[:, 0] if sq else c), cache

    if kind == CellKind.LSTMWF:
        f = _sigmoid(w["W_xf"] @ x2 + w["W_hf"] @ h2 + b["b_f"][:, None])
        z = np.tanh(w["W_xz"] @ x2 + w["W_hz"] @ h2 + b["b_z"][:, None])
        h = np.tanh(f * h2 + (1.0 - f) * z)
        cache = ForwardCache(kind, x2, h2, h, gates={"f": f, "z": z}, squeeze=sq)
        return (h[:, 0] if sq else h), None, cache

    if kind == CellKind.GRU:
        zg = _sigmoid(w["W_xz"] @ x2 + w["W_hz"] @ h2 + b["b_z"][:, None])
        r = _sigmoid(w["W_xr"] @ x2 + w["W_hr"] @ h2 + b["b_r"][:, None])
        hc = np.tanh(w["W_xh"] @ x2 + w["W_hh"] @ (r * h2) + b["b_h"][:, None])
        h = (1.0 - zg) * h2 + zg * hc
        cache = ForwardCache(kind, x2, h2, h, gates={"z": zg, "r": r, "hc": hc}, squeeze=sq)
        return (h[:, 0] if sq else h), None, cache

    raise ValueError(f"unknown cell kind {kind}")


# Parameter-gradient assembly tables: every weight gradient is (gate
# pre-activation gradient) @ (right vector)^T, every bias gradient is the
# batch sum of a gate pre-activation gradient. Keys into the dict that
# backward_pre returns; right vectors are "x", "h" (previous hidden state),
# or "rh" (GRU's reset-gated state).
_W_FACTORS: dict[CellKind, tuple[tuple[str, str, str], ...]] = {
    CellKind.VRNN: (("W_x", "pre", "x"), ("W_h", "pre", "h")),
    CellKind.LSTM: (
        ("W_xi", "i", "x"), ("W_hi", "i", "h"),
        ("W_xf", "f", "x"), ("W_hf", "f", "h"),
        ("W_xo", "o", "x"), ("W_ho", "o", "h"),
        ("W_xz", "z", "x"), ("W_hz", "z", "h"),
    ),
    CellKind.LSTMWF: (
        ("W_xf", "f", "x"), ("W_hf", "f", "h"),
        ("W_xz", "z", "x"), ("W_hz", "z", "h"),
    ),
    CellKind.GRU: (
        ("W_xz", "z", "x"), ("W_hz", "z", "h"),
        ("W_xr", "r", "x"), ("W_hr", "r", "h"),
        ("W_xh", "hc", "x"), ("W_hh", "hc", "rh"),
    ),
    CellKind.STAR: (("W_z", "z", "x"), ("W_x", "k", "x"), ("W_h", "k", "h")),
}

_B_FACTORS: dict[CellKind, tuple[tuple[str, str], ...]] = {
    CellKind.VRNN: (("b", "pre"),),
    CellKind.LSTM: (("b_i", "i"), ("b_f", "f"), ("b_o", "o"), ("b_z", "z")),
    CellKind.LSTMWF: (("b_f", "f"), ("b_z", "z")),
    CellKind.GRU: (("b_z", "z"), ("b_r", "r"), ("b_h", "hc")),
    CellKind.STAR: (("b_z", "z"), ("b_k", "k")),
}


def right_vector(cache: ForwardCache, key: str) -> np.ndarray:
    if key == "x":
        return cache.x
    if key == "h":
        return cache.h_prev
    if key == "rh":
        return cache.gates["r"] * cache.h_prev
    raise KeyError(key)


def backward_pre(
    params: CellParams,
    cache: ForwardCache,
    g_h: np.ndarray,
    g_c: np.ndarray | None = None,
):
    """Reverse-mode core: input/state gradients plus the gate pre-activation
    gradients from which all parameter gradients assemble (see _W_FACTORS).

    Inputs and outputs are (n, B) column batches. backward() composes this
    with assemble_grads; the lattice sweep consumes it directly so it can
    batch the parameter-gradient outer products across time.
    """
    kind = params.kind
    n = params.n_hidden
    g2, _ = _as_cols(g_h, n, "g_h")
    if g2.shape[1] != cache.h.shape[1]:
        raise ValueError("g_h batch size does not match cache")
    w = params.weights
    h2 = cache.h_prev

    if kind == CellKind.VRNN:
        g_pre = (1.0 - cache.h * cache.h) * g2
        return w["W_x"].T @ g_pre, w["W_h"].T @ g_pre, None, {"pre": g_pre}

    if kind == CellKind.STAR:
        z, k = cache.gates["z"], cache.gates["k"]
        g_a = (1.0 - cache.h * cache.h) * g2
        g_sk = (k * (1.0 - k)) * ((z - h2) * g_a)
        g_sz = (1.0 - z * z) * (k * g_a)
        g_x = w["W_z"].T @ g_sz + w["W_x"].T @ g_sk
        g_hp = (1.0 - k) * g_a + w["W_h"].T @ g_sk
        return g_x, g_hp, None, {"z": g_sz, "k": g_sk}

    if kind == CellKind.LSTM:
        i, f, o, z = (cache.gates[g] for g in ("i", "f", "o", "z"))
        tc = np.tanh(cache.c)
        g_ct = o * (1.0 - tc * tc) * g2
        if g_c is not None:
            g_ct = g_ct + _as_cols(g_c, n, "g_c")[0]
        g_si = (i * (1.0 - i)) * (z * g_ct)
        g_sf = (f * (1.0 - f)) * (cache.c_prev * g_ct)
        g_so = (o * (1.0 - o)) * (tc * g2)
        g_sz = (1.0 - z * z) * (i * g_ct)
        g_x = (w["W_xi"].T @ g_si + w["W_xf"].T @ g_sf
               + w["W_xo"].T @ g_so + w["W_xz"].T @ g_sz)
        g_hp = (w["W_hi"].T @ g_si + w["W_hf"].T @ g_sf
                + w["W_ho"].T @ g_so + w["W_hz"].T @ g_sz)
        return g_x, g_hp, f * g_ct, {"i": g_si, "f": g_sf, "o": g_so, "z": g_sz}

    if kind == CellKind.LSTMWF:
        f, z = cache.gates["f"], cache.gates["z"]
        g_a = (1.0 - cache.h * cache.h) * g2
        g_sf = (f * (1.0 - f)) * ((h2 - z) * g_a)
        g_sz = (1.0 - z * z) * ((1.0 - f) * g_a)
        g_x = w["W_xf"].T @ g_sf + w["W_xz"].T @ g_sz
        g_hp = f * g_a + w["W_hf"].T @ g_sf + w["W_hz"].T @ g_sz
        return g_x, g_hp, None, {"f": g_sf, "z": g_sz}

    if kind == CellKind.GRU:
        zg, r, hc = cache.gates["z"], cache.gates["r"], cache.gates["hc"]
        g_sh = (1.0 - hc * hc) * (zg * g2)
        g_rh = w["W_hh"].T @ g_sh  # gradient w.r.t. r*h_prev
        g_sr = (r * (1.0 - r)) * (h2 * g_rh)
        g_szg = (zg * (1.0 - zg)) * ((hc - h2) * g2)
        g_x = w["W_xz"].T @ g_szg + w["W_xr"].T @ g_sr + w["W_xh"].T @ g_sh
        g_hp = (1.0 - zg) * g2 + r * g_rh + w["W_hz"].T @ g_szg + w["W_hr"].T @ g_sr
        return g_x, g_hp, None, {"z": g_szg, "r": g_sr, "hc": g_sh}

    raise ValueError(f"unknown cell kind {kind}")


def assemble_grads(params: CellParams, cache: ForwardCache, pres: dict) -> CellGrads:
    """Materialize the parameter gradients from gate pre-activation gradients."""
    grads = CellGrads(params.kind, {}, {})
    for name, gate, rkey in _W_FACTORS[params.kind]:
        grads.weights[name] = pres[gate] @ right_vector(cache, rkey).T
    for name, gate in _B_FACTORS[params.kind]:
        grads.biases[name] = pres[gate].sum(axis=1)
    return grads


def backward(
    params: CellParams,
    cache: ForwardCache,
    g_h: np.ndarray,
    g_c: np.ndarray | None = None,
):
    """Exact reverse-mode step for one cell.

    g_h (and g_c for LSTM) are the loss gradients arriving at this cell's
    outputs. Returns (g_x, g_hprev, g_cprev, grads); parameter gradients are
    summed over the batch columns.
    """
    sq = np.asarray(g_h).ndim == 1
    g_x, g_hp, g_cp, pres = backward_pre(params, cache, g_h, g_c)
    grads = assemble_grads(params, cache, pres)

    def _out(v):
        return v[:, 0] if sq else v

    return _out(g_x), _out(g_hp), None if g_cp is None else _out(g_cp), grads


def jacobians_at(
    params: CellParams,
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Input Jacobian J = dh/dx and state Jacobian H = dh/dh_prev at a point,
    assembled from the diagonal-times-weight closed forms."""
    kind = params.kind
    _, c, cache = forward(params, np.asarray(x, dtype=np.float64).ravel(),
                          np.asarray(h_prev, dtype=np.float64).ravel(),
                          None if c_prev is None else np.asarray(c_prev, dtype=np.float64).ravel())
    w = params.weights
    x1 = cache.x[:, 0]
    h1 = cache.h_prev[:, 0]
    hn = cache.h[:, 0]

    def dg(v):  # diag(v) @ M done by broadcasting
        return v[:, None]

    if kind == CellKind.VRNN:
        d = dg(1.0 - hn * hn)
        return d * w["W_x"], d * w["W_h"]

    if kind == CellKind.STAR:
        z = cache.gates["z"][:, 0]
        k = cache.gates["k"][:, 0]
        d_out = dg(1.0 - hn * hn)
        dk = (z - h1) * (k * (1.0 - k))
        jac = d_out * (dg(dk) * w["W_x"] + dg(k * (1.0 - z * z)) * w["W_z"])
        hmat = d_out * (np.diag(1.0 - k) + dg(dk) * w["W_h"])
        return jac, hmat

    if kind == CellKind.LSTM:
        i, f, o, z = (cache.gates[g][:, 0] for g in ("i", "f", "o", "z"))
        c2 = cache.c_prev[:, 0]
        tc = np.tanh(cache.c[:, 0])
        outer = dg(tc * o * (1.0 - o))
        inner = dg((1.0 - tc * tc) * o)
        jac = outer * w["W_xo"] + inner * (
            dg(c2 * f * (1.0 - f)) * w["W_xf"]
            + dg(z * i * (1.0 - i)) * w["W_xi"]
            + dg(i * (1.0 - z * z)) * w["W_xz"]
        )
        hmat = outer * w["W_ho"] + inner * (
            dg(c2 * f * (1.0 - f)) * w["W_hf"]
            + dg(z * i * (1.0 - i)) * w["W_hi"]
            + dg(i * (1.0 - z * z)) * w["W_hz"]
        )
        return jac, hmat

    if kind == CellKind.LSTMWF:
        f = cache.gates["f"][:, 0]
        z = cache.gates["z"][:, 0]
        d_out = dg(1.0 - hn * hn)
        df = (h1 - z) * (f * (1.0 - f))
        jac = d_out * (dg(df) * w["W_xf"] + dg((1.0 - f) * (1.0 - z * z)) * w["W_xz"])
        hmat = d_out * (np.diag(f) + dg(df) * w["W_hf"]
                        + dg((1.0 - f) * (1.0 - z * z)) * w["W_hz"])
        return jac, hmat

    if kind == CellKind.GRU:
        zg = cache.gates["z"][:, 0]
        r = cache.gates["r"][:, 0]
        hc = cache.gates["hc"][:, 0]
        dz = (hc - h1) * (zg * (1.0 - zg))
        dcand = dg(zg * (1.0 - hc * hc))
        jac = dg(dz) * w["W_xz"] + dcand * (
            w["W_xh"] + w["W_hh"] @ (dg(h1 * r * (1.0 - r)) * w["W_xr"])
        )
        hmat = (np.diag(1.0 - zg) + dg(dz) * w["W_hz"]
                + dcand * (w["W_hh"] @ (np.diag(r) + dg(h1 * r * (1.0 - r)) * w["W_hr"])))
        return jac, hmat

    raise ValueError(f"unknown cell kind {kind}")


# --- checkpoint container: magic, manifest length, JSON manifest, then the
# --- raw float64 little-endian payload in manifest order.

_MAGIC = b"STARPK01"


def save_cells(path, cells: list[CellParams], extras: dict[str, np.ndarray] | None = None):
    extras = extras or {}
    manifest = {
        "format": 1,
        "cells": [
            {
                "kind": p.kind.value,
                "n_in": p.n_in,
                "n_hidden": p.n_hidden,
                "weights": {k: list(v.shape) for k, v in p.named_arrays() if k in p.weights},
                "biases": {k: list(v.shape) for k, v in p.named_arrays() if k in p.biases},
            }
            for p in cells
        ],
        "extras": {k: list(np.asarray(v).shape) for k, v in extras.items()},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint64(len(blob)).astype("<u8").tobytes())
        fh.write(blob)
        for p in cells:
            for _, arr in p.named_arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for k in sorted(extras):
            fh.write(np.ascontiguousarray(extras[k], dtype="<f8").tobytes())


def load_cells(path) -> tuple[list[CellParams], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a starlab checkpoint")
        (blob_len,) = np.frombuffer(fh.read(8), dtype="<u8")
        manifest = json.loads(fh.read(int(blob_len)).decode("utf-8"))
        payload = fh.read()

    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).astype(np.float64)

    cells = []
    for entry in manifest["cells"]:
        kind = CellKind(entry["kind"])
        weights, biases = {}, {}
        for name, _ in _WEIGHTS[kind]:
            weights[name] = take(entry["weights"][name])
        for name in _BIASES[kind]:
            biases[name] = take(entry["biases"][name])
        cells.append(CellParams(kind, entry["n_in"], entry["n_hidden"], weights, biases))
    extras = {k: take(shape) for k, shape in sorted(manifest["extras"].items())}
    return cells, extras
