"""Fixed-point Jacobian spectra, combined gradient scaling factors, and the
Monte-Carlo gradient-magnitude fields over the unrolled lattice.

The zero-state setting (zero hidden states and biases, orthogonal weights)
is where the spectra of the input and state Jacobians admit exact values;
the simulations then measure what actually happens across a deep lattice
driven by correlated noise or image rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import CellKind, init_params, jacobians_at
from .lattice import (GradientField, LossMode, StackSpec, backward_sequence,
                      build, fixed_point_grid, forward_sequence)
from .numerics import Rng, mean_singular_value


@dataclass
class FixedPointReport:
    """Mean singular values of J and H at the zero fixed point, plus the two
    extreme-case combination factors: sqrt(sJ^2 + sH^2) when the incoming
    gradient terms are uncorrelated, sJ + sH when perfectly correlated."""
    kind: CellKind
    mean_sv_j: float
    mean_sv_h: float
    factor_uncorrelated: float
    factor_correlated: float
    trials: int

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "mean_sv_J": self.mean_sv_j,
            "mean_sv_H": self.mean_sv_h,
            "factor_uncorrelated": self.factor_uncorrelated,
            "factor_correlated": self.factor_correlated,
            "trials": self.trials,
        }


def fixed_point_report(kind: CellKind, n: int, trials: int, rng: Rng) -> FixedPointReport:
    """Draw orthogonal weights, evaluate both Jacobians at zero states and
    biases, and average their mean singular values over trials."""
    if n < 2 or trials < 1:
        raise ValueError("need n >= 2 and trials >= 1")
    sj = 0.0
    sh = 0.0
    zero = np.zeros(n)
    c_zero = zero if kind == CellKind.LSTM else None
    for i in range(trials):
        params = init_params(kind, n, n, 2, rng.derive(i), analysis=True)
        jac, hmat = jacobians_at(params, zero, zero, c_zero)
        sj += mean_singular_value(jac)
        sh += mean_singular_value(hmat)
    sj /= trials
    sh /= trials
    return FixedPointReport(
        kind=kind,
        mean_sv_j=sj,
        mean_sv_h=sh,
        factor_uncorrelated=float(np.sqrt(sj * sj + sh * sh)),
        factor_correlated=sj + sh,
        trials=trials,
    )


def gen_ar1_sequence(rng: Rng, steps: int, n_in: int, alpha: float) -> np.ndarray:
    """AR(1) driving sequence x_t = alpha x_{t-1} + (1 - alpha) z_t with
    standard-normal z and x_0 = z_0. Returns (steps, n_in)."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    z = rng.normals(steps * n_in).reshape(steps, n_in)
    x = np.empty_like(z)
    x[0] = z[0]
    for t in range(1, steps):
        x[t] = alpha * x[t - 1] + (1.0 - alpha) * z[t]
    return x


@dataclass
class SimConfig:
    """One gradient-field experiment: stack geometry, Monte-Carlo runs, loss
    attachment, and the input process (AR(1) noise or rows of an image set).

    at_fixed_point keeps the hidden states pinned at zero during the sweep
    (the setting in which the fixed-point singular values govern the lattice,
    and the regime the synthetic-noise heatmaps are computed in); turning it
    off runs the full nonlinear forward. Image-input simulations always run
    the full forward with the training-style initialization.
    """
    stack: StackSpec
    runs: int
    loss_mode: LossMode = LossMode.FINAL_STEP
    input_kind: str = "ar1"  # "ar1" | "mnist"
    alpha: float = 0.5
    images: np.ndarray | None = None  # (N, t_max) pixel sequences for "mnist"
    seed: int = 0
    record_cosine: bool = False
    at_fixed_point: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.input_kind not in ("ar1", "mnist"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.input_kind == "mnist":
            if self.images is None:
                raise ValueError("mnist input mode needs an image set")
            self.at_fixed_point = False
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _mnist_sim_lattice(cfg: SimConfig, rng: Rng):
    # Image-input fields use the training initialization (chrono gate biases),
    # except the LSTM forget bias, which is pinned to one (chrono forget
    # biases destabilize the 784-step cell state); its input bias stays zero.
    lat = build(cfg.stack, "training", rng)
    for params in lat.cells:
        if params.kind == CellKind.LSTM:
            params.biases["b_f"] = np.ones(params.n_hidden)
            params.biases["b_i"] = np.zeros(params.n_hidden)
    return lat


def _thread_limit():
    # one BLAS thread per worker: the simulations are matvec-bound, where
    # threaded BLAS only adds sync overhead (and workers would contend)
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:
        import contextlib
        return contextlib.nullcontext()


def _simulate_runs(cfg: SimConfig, run_indices) -> GradientField:
    steps = cfg.stack.t_max
    field = GradientField(len(cfg.stack.layers), steps)
    root = Rng(cfg.seed)
    with _thread_limit():
        return _simulate_into(field, cfg, root, run_indices)


def _simulate_into(field, cfg, root, run_indices) -> GradientField:
    steps = cfg.stack.t_max
    for run in run_indices:
        rng = root.derive(7, run)
        if cfg.input_kind == "ar1":
            lat = build(cfg.stack, "analysis", rng.derive(0))
            inputs = gen_ar1_sequence(rng.derive(1), steps, cfg.stack.n_in, cfg.alpha)
        else:
            lat = _mnist_sim_lattice(cfg, rng.derive(0))
            pick = int(rng.derive(1).integers_below(cfg.images.shape[0], 1)[0])
            inputs = cfg.images[pick].reshape(steps, cfg.stack.n_in)
        if cfg.at_fixed_point:
            grid = fixed_point_grid(lat, inputs)
        else:
            grid = forward_sequence(lat, inputs)
        sample, _ = backward_sequence(
            lat, grid, cfg.loss_mode, record=True, record_cosine=cfg.record_cosine
        )
        field.add(sample)
    return field


def simulate_gradient_field(cfg: SimConfig) -> GradientField:
    """Monte-Carlo gradient-magnitude field: every run draws fresh orthogonal
    parameters and a fresh input sequence, performs one forward/backward in
    analysis mode, and feeds the per-cell magnitudes into a mergeable field.

    Runs are independent streams, so with workers > 1 they are spread over
    processes and the partial fields merged in fixed order; results are
    identical to the single-process sweep.
    """
    if cfg.workers == 1 or cfg.runs < 4:
        return _simulate_runs(cfg, range(cfg.runs))
    import multiprocessing as mp

    slices = [range(w, cfg.runs, cfg.workers) for w in range(cfg.workers)]
    ctx = mp.get_context("fork")
    with ctx.Pool(cfg.workers) as pool:
        parts = pool.starmap(_simulate_runs, [(cfg, s) for s in slices])
    field = parts[0]
    for part in parts[1:]:
        field.merge(part)
    return field


def layer_ratio(field: GradientField) -> float:
    """Bottom/top ratio of the mean per-layer total parameter-gradient norm
    (the cross-time sums an optimizer consumes) — the layerwise attenuation
    figure the cell-comparison bands are stated over."""
    top = field.mean_layer_total[-1]
    if top == 0:
        return float("inf")
    return float(field.mean_layer_total[0] / top)


def weight_state_trace(lattice, grid=None) -> dict:
    """Per-layer weight-norm and hidden-state summaries for training logs.

    Weight norms are Hilbert-Schmidt norms divided by sqrt(n_hidden), which
    makes a square orthogonal matrix read exactly 1; the hidden-state figure
    is the mean entry of each layer's states over time and batch.
    """
    norms = []
    for params in lattice.cells:
        scale = 1.0 / np.sqrt(params.n_hidden)
        norms.append({
            name: float(np.linalg.norm(w) * scale)
            for name, w in params.weights.items()
        })
    mean_hidden = None
    if grid is not None:
        mean_hidden = [
            float(np.mean([grid.hidden(l, t) for t in range(grid.steps)]))
            for l in range(len(lattice.cells))
        ]
    return {"weight_norms": norms, "mean_hidden": mean_hidden}
