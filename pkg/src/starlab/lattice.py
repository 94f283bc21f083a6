"""Heterogeneous cell stacks unrolled over time: the depth x time lattice.

The forward pass fills a grid of per-cell caches (bottom to top, left to
right); the backward pass sweeps it in reverse, combining at every cell the
gradient arriving from the layer above with the one arriving from the next
time step, and records the per-cell gradient magnitudes that the analysis
module aggregates over Monte-Carlo runs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cells import (CellGrads, CellKind, CellParams, _B_FACTORS, _W_FACTORS,
                    backward, backward_pre, forward, init_params, right_vector)
from .numerics import Rng


@dataclass(frozen=True)
class StackSpec:
    """Ordered (kind, width) layers fed by n_in-wide inputs, unrolled to t_max."""
    n_in: int
    layers: tuple[tuple[CellKind, int], ...]
    t_max: int

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("need at least one layer")
        if self.n_in < 1 or self.t_max < 1:
            raise ValueError("n_in and t_max must be >= 1")

    def layer_input_width(self, layer: int) -> int:
        return self.n_in if layer == 0 else self.layers[layer - 1][1]


class LossMode(str, Enum):
    FINAL_STEP = "final"
    ALL_STEPS = "all"
    MEAN_POOL = "mean"


@dataclass
class Lattice:
    spec: StackSpec
    cells: list[CellParams]

    @property
    def n_layers(self) -> int:
        return len(self.cells)


def build(spec: StackSpec, mode: str, rng: Rng) -> Lattice:
    """Per-layer init: 'analysis' forces zero biases (the fixed-point
    setting), 'training' applies chrono gate biases for horizon t_max."""
    if mode not in ("analysis", "training"):
        raise ValueError(f"unknown build mode {mode!r}")
    cells = []
    for l, (kind, width) in enumerate(spec.layers):
        cells.append(
            init_params(
                kind, spec.layer_input_width(l), width,
                max(spec.t_max, 2), rng.derive(l),
                analysis=(mode == "analysis"),
            )
        )
    return Lattice(spec, cells)


@dataclass
class Grid:
    """Retained forward state of one unrolled run (no checkpointing)."""
    caches: list[list]  # [layer][t] ForwardCache
    batch: int
    steps: int

    def top_h(self, t: int) -> np.ndarray:
        return self.caches[-1][t].h

    def hidden(self, layer: int, t: int) -> np.ndarray:
        return self.caches[layer][t].h


def _input_columns(inputs, n_in: int):
    cols = []
    for t, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != n_in:
            raise ValueError(f"input at t={t}: expected {n_in} rows")
        cols.append(x)
    if not cols:
        raise ValueError("empty input sequence")
    widths = {c.shape[1] for c in cols}
    if len(widths) != 1:
        raise ValueError("inconsistent batch sizes across time steps")
    return cols


def forward_sequence(lattice: Lattice, inputs) -> Grid:
    """Run the stacked recurrence over a T-long input sequence.

    inputs: sequence of (n_in,) or (n_in, B) arrays, or an equivalent
    (T, n_in[, B]) array. Initial hidden (and LSTM cell) states are zero.
    """
    spec = lattice.spec
    cols = _input_columns(inputs, spec.n_in)
    steps = len(cols)
    if steps > spec.t_max:
        raise ValueError(f"sequence length {steps} exceeds t_max {spec.t_max}")
    batch = cols[0].shape[1]

    caches: list[list] = [[] for _ in lattice.cells]
    below = cols
    for l, params in enumerate(lattice.cells):
        h = np.zeros((params.n_hidden, batch))
        c = np.zeros((params.n_hidden, batch)) if params.kind == CellKind.LSTM else None
        outs = []
        for t in range(steps):
            h, c, cache = forward(params, below[t], h, c)
            caches[l].append(cache)
            outs.append(h)
        below = outs
    return Grid(caches=caches, batch=batch, steps=steps)


def fixed_point_grid(lattice: Lattice, inputs) -> Grid:
    """Caches with every hidden (and LSTM cell) state pinned at zero — the
    fixed-point evaluation. Layer 1 still sees the real input sequence, the
    layers above see the zero hidden states below them, so a backward sweep
    over this grid propagates gradients through the zero-point Jacobians
    whose singular values the fixed-point analysis predicts."""
    spec = lattice.spec
    cols = _input_columns(inputs, spec.n_in)
    steps = len(cols)
    if steps > spec.t_max:
        raise ValueError(f"sequence length {steps} exceeds t_max {spec.t_max}")
    batch = cols[0].shape[1]

    caches: list[list] = []
    below = cols
    for params in lattice.cells:
        zero_h = np.zeros((params.n_hidden, batch))
        zero_c = np.zeros((params.n_hidden, batch)) if params.kind == CellKind.LSTM else None
        if below is None:
            # all upper layers see identical zero inputs; one cache serves all t
            _, _, cache = forward(params, np.zeros((params.n_in, batch)), zero_h, zero_c)
            caches.append([cache] * steps)
        else:
            caches.append([forward(params, below[t], zero_h, zero_c)[2] for t in range(steps)])
        below = None
    return Grid(caches=caches, batch=batch, steps=steps)


@dataclass
class FieldSample:
    """Per-cell magnitudes from one backward sweep (layer-major, t-minor)."""
    gparam_norm: np.ndarray  # (L, T)
    gh_norm: np.ndarray      # (L, T)
    path_cosine: np.ndarray | None = None  # (L, T), NaN where undefined
    layer_total_norms: np.ndarray | None = None  # (L,) norms of cross-time sums


@dataclass
class GradientField:
    """Running per-cell statistics over Monte-Carlo backward sweeps.

    Welford accumulators per lattice cell for the parameter-gradient
    contribution norm and the hidden-state gradient norm; mergeable so
    independent workers can be combined associatively.
    """
    n_layers: int
    steps: int
    runs: int = 0
    mean_gp: np.ndarray = field(default=None)
    m2_gp: np.ndarray = field(default=None)
    mean_gh: np.ndarray = field(default=None)
    m2_gh: np.ndarray = field(default=None)
    mean_layer_total: np.ndarray = field(default=None)
    m2_layer_total: np.ndarray = field(default=None)
    mean_cos: np.ndarray = field(default=None)
    cos_runs: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (self.n_layers, self.steps)
        for name in ("mean_gp", "m2_gp", "mean_gh", "m2_gh", "mean_cos", "cos_runs"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
        for name in ("mean_layer_total", "m2_layer_total"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_layers))

    def add(self, sample: FieldSample):
        self.runs += 1
        pairs = [
            (self.mean_gp, self.m2_gp, sample.gparam_norm),
            (self.mean_gh, self.m2_gh, sample.gh_norm),
        ]
        if sample.layer_total_norms is not None:
            pairs.append((self.mean_layer_total, self.m2_layer_total,
                          sample.layer_total_norms))
        for mean, m2, x in pairs:
            delta = x - mean
            mean += delta / self.runs
            m2 += delta * (x - mean)
        if sample.path_cosine is not None:
            ok = np.isfinite(sample.path_cosine)
            self.cos_runs[ok] += 1
            d = np.where(ok, sample.path_cosine - self.mean_cos, 0.0)
            self.mean_cos += np.divide(d, self.cos_runs, out=np.zeros_like(d),
                                       where=self.cos_runs > 0)

    def merge(self, other: "GradientField") -> "GradientField":
        if (self.n_layers, self.steps) != (other.n_layers, other.steps):
            raise ValueError("field shapes differ")
        if other.runs == 0:
            return self
        if self.runs == 0:
            for name in ("mean_gp", "m2_gp", "mean_gh", "m2_gh",
                         "mean_layer_total", "m2_layer_total", "mean_cos", "cos_runs"):
                setattr(self, name, getattr(other, name).copy())
            self.runs = other.runs
            return self
        n1, n2 = self.runs, other.runs
        n = n1 + n2
        for mean, m2, omean, om2 in (
            (self.mean_gp, self.m2_gp, other.mean_gp, other.m2_gp),
            (self.mean_gh, self.m2_gh, other.mean_gh, other.m2_gh),
            (self.mean_layer_total, self.m2_layer_total,
             other.mean_layer_total, other.m2_layer_total),
        ):
            delta = omean - mean
            m2 += om2 + delta * delta * (n1 * n2 / n)
            mean += delta * (n2 / n)
        ctot = self.cos_runs + other.cos_runs
        num = self.mean_cos * self.cos_runs + other.mean_cos * other.cos_runs
        self.mean_cos = np.divide(num, ctot, out=np.zeros_like(num), where=ctot > 0)
        self.cos_runs = ctot
        self.runs = n
        return self

    def std_gp(self) -> np.ndarray:
        if self.runs == 0:
            return np.zeros_like(self.m2_gp)
        return np.sqrt(self.m2_gp / self.runs)

    def std_gh(self) -> np.ndarray:
        if self.runs == 0:
            return np.zeros_like(self.m2_gh)
        return np.sqrt(self.m2_gh / self.runs)

    def mean_normalized_std_gp(self) -> np.ndarray:
        """std/mean of the parameter-gradient norm; NaN where mean == 0."""
        std = self.std_gp()
        return np.divide(std, self.mean_gp, out=np.full_like(std, np.nan),
                         where=self.mean_gp > 0)

    def to_csv(self, out) -> None:
        """Schema: layer,t,mean_gparam_norm,std_gparam_norm,mean_gh_norm,runs
        (layer and t are 1-based, layer 1 at the bottom of the stack)."""
        close = False
        if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
            out = open(out, "w", encoding="utf-8", newline="\n")
            close = True
        try:
            out.write("layer,t,mean_gparam_norm,std_gparam_norm,mean_gh_norm,runs\n")
            std = self.std_gp()
            for l in range(self.n_layers):
                for t in range(self.steps):
                    out.write(
                        f"{l + 1},{t + 1},{self.mean_gp[l, t]!r},"
                        f"{std[l, t]!r},{self.mean_gh[l, t]!r},{self.runs}\n"
                    )
        finally:
            if close:
                out.close()

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def analysis_seeds(loss_mode: LossMode, steps: int, n_top: int, batch: int = 1):
    """Unit-L2 seed (1/sqrt(n)) 1 at each loss-attached top cell, scaled
    1/T for mean pooling (the derivative of a mean-of-units readout)."""
    u = np.full((n_top, batch), 1.0 / np.sqrt(n_top))
    if loss_mode == LossMode.FINAL_STEP:
        return [None] * (steps - 1) + [u]
    if loss_mode == LossMode.ALL_STEPS:
        return [u.copy() for _ in range(steps)]
    if loss_mode == LossMode.MEAN_POOL:
        return [u / steps for _ in range(steps)]
    raise ValueError(f"unknown loss mode {loss_mode}")


def backward_sequence(
    lattice: Lattice,
    grid: Grid,
    loss_mode: LossMode = LossMode.FINAL_STEP,
    seeds=None,
    record: bool = True,
    record_cosine: bool = False,
):
    """Reverse sweep over the full lattice (top to bottom, late to early).

    seeds: per-time-step gradients w.r.t. the top layer's hidden state
    (None entries mean no loss attached there). When omitted, deterministic
    unit seeds for loss_mode are used (the analysis setting). Returns
    (FieldSample, per-layer CellGrads totals); the totals are the cross-time
    sums an optimizer consumes, the sample holds per-cell magnitudes before
    that summation.
    """
    n_layers = lattice.n_layers
    steps = grid.steps
    n_top = lattice.cells[-1].n_hidden
    if seeds is None:
        seeds = analysis_seeds(loss_mode, steps, n_top, grid.batch)
    if len(seeds) != steps:
        raise ValueError("need one (possibly None) seed per time step")

    gp_norm = np.zeros((n_layers, steps)) if record else None
    gh_norm = np.zeros((n_layers, steps)) if record else None
    cosine = np.full((n_layers, steps), np.nan) if record_cosine else None

    totals = [CellGrads.zeros_like(p) for p in lattice.cells]
    # Gradients flowing down into each layer, one slot per time step. For the
    # top layer these are the loss seeds.
    down = [np.zeros((n_top, grid.batch)) if s is None else np.array(s, dtype=np.float64)
            for s in seeds]
    for s, d in zip(seeds, down):
        if d.shape != (n_top, grid.batch):
            raise ValueError("seed shape does not match top layer")

    fast = grid.batch == 1  # defer outer products to one matmul per layer
    for l in range(n_layers - 1, -1, -1):
        params = lattice.cells[l]
        caches = grid.caches[l]
        next_down = None
        if l > 0:
            width_below = lattice.spec.layer_input_width(l)
            next_down = [None] * steps
        g_right = np.zeros((params.n_hidden, grid.batch))
        g_cright = np.zeros((params.n_hidden, grid.batch)) if params.kind == CellKind.LSTM else None
        pres_bufs = (
            {gate: np.empty((params.n_hidden, steps)) for _, gate in _B_FACTORS[params.kind]}
            if fast else None
        )
        for t in range(steps - 1, -1, -1):
            g_h = down[t] + g_right
            if record_cosine:
                a, b = down[t].ravel(), g_right.ravel()
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                if na > 0 and nb > 0:
                    cosine[l, t] = float(a @ b) / (na * nb)
            if record:
                gh_norm[l, t] = np.linalg.norm(g_h)
            if fast:
                g_x, g_right, g_cright, pres = backward_pre(params, caches[t], g_h, g_cright)
                for gate, buf in pres_bufs.items():
                    buf[:, t] = pres[gate][:, 0]
            else:
                g_x, g_right, g_cright, grads = backward(params, caches[t], g_h, g_cright)
                totals[l].iadd(grads)
                if record:
                    gp_norm[l, t] = grads.norm()
            if next_down is not None:
                next_down[t] = g_x
        if fast:
            _assemble_layer(params, caches, pres_bufs, totals[l],
                            gp_norm[l] if record else None)
        if next_down is not None:
            down = next_down

    if record:
        layer_norms = np.array([g.norm() for g in totals])
        sample = FieldSample(gp_norm, gh_norm, cosine, layer_norms)
    else:
        sample = FieldSample(None, None, None)
    return sample, totals


def _assemble_layer(params: CellParams, caches, pres_bufs, total: CellGrads, gp_row):
    """Cross-time parameter-gradient assembly for the batch-1 sweep: each
    weight total is a single (gate pre-grads) @ (right vectors)^T product,
    and the per-cell contribution norms factor as |g_gate(t)| |r(t)|."""
    steps = len(caches)
    rkeys = {rkey for _, _, rkey in _W_FACTORS[params.kind]}
    rbufs = {k: np.concatenate([right_vector(c, k) for c in caches], axis=1) for k in rkeys}
    for name, gate, rkey in _W_FACTORS[params.kind]:
        total.weights[name] += pres_bufs[gate] @ rbufs[rkey].T
    for name, gate in _B_FACTORS[params.kind]:
        total.biases[name] += pres_bufs[gate].sum(axis=1)
    if gp_row is not None:
        gate_sq = {g: np.einsum("ij,ij->j", b, b) for g, b in pres_bufs.items()}
        r_sq = {k: np.einsum("ij,ij->j", b, b) for k, b in rbufs.items()}
        acc = np.zeros(steps)
        for _, gate, rkey in _W_FACTORS[params.kind]:
            acc += gate_sq[gate] * r_sq[rkey]
        for _, gate in _B_FACTORS[params.kind]:
            acc += gate_sq[gate]
        gp_row[:] = np.sqrt(acc)
