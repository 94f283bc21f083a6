"""Training machinery: Adam, output heads and losses, chrono gate-bias
initialization, gradient clipping, the mini-batch training loop with
per-layer gradient instrumentation, and a finite-difference checker for
every analytic backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import cells as cells_mod
from .analysis import weight_state_trace
from .cells import CellGrads, CellKind, CellParams, chrono_bias, forward, init_params
from .lattice import Lattice, LossMode, StackSpec, backward_sequence, build, forward_sequence
from .numerics import Rng, orthogonal_matrix
from .tasks import Batch, LossKind, MnistSet, gen_adding, gen_copy, permute_pixels


def chrono_bias_init(n: int, t_max: int, rng: Rng) -> np.ndarray:
    """Gate bias -log(u), u ~ U[1, t_max - 1]: the gate opens slowly so the
    hidden state is retained over horizons up to t_max. LSTM uses the sign
    flip b_f = +log(u), b_i = -b_f (see cells.init_params)."""
    return chrono_bias(n, t_max, rng)


class NonFiniteGradientError(RuntimeError):
    """An optimizer step received NaN/Inf gradients (exploding gradients)."""


@dataclass
class AdamState:
    """Bias-corrected Adam over a fixed list of named parameter arrays."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def clone(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(state: AdamState, params, grads):
    """One in-place Adam update. params and grads are matching lists of
    (name, array) pairs; raises NonFiniteGradientError instead of writing
    corrupted parameters."""
    for name, g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for (name, p), (gname, g) in zip(params, grads):
        if name != gname:
            raise ValueError(f"parameter/gradient mismatch: {name} vs {gname}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def clip_global_norm(named_grads, threshold: float) -> float:
    """Scale all gradients in place so the global L2 norm is at most
    threshold; returns the pre-clip norm."""
    total = 0.0
    for _, g in named_grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(total))
    if norm > threshold:
        scale = threshold / norm
        for _, g in named_grads:
            g *= scale
    return norm


# --- output heads and losses -------------------------------------------------

HEAD_MODES = ("final", "per-step", "mean-pool")


@dataclass
class Head:
    """Dense readout W h + b on top of the last layer's hidden state."""
    W: np.ndarray  # (n_out, n_hidden)
    b: np.ndarray  # (n_out,)
    mode: str = "final"

    def logits(self, h: np.ndarray) -> np.ndarray:
        return self.W @ h + self.b[:, None]


def init_head(n_hidden: int, n_out: int, rng: Rng, mode: str = "final") -> Head:
    if mode not in HEAD_MODES:
        raise ValueError(f"unknown head mode {mode!r}")
    return Head(orthogonal_matrix(rng, n_out, n_hidden), np.zeros(n_out), mode)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (nats) over the batch and its gradient w.r.t. the
    logits (already carrying the 1/B factor)."""
    probs = softmax(logits)
    batch = logits.shape[1]
    cols = np.arange(batch)
    nll = float(-np.log(np.maximum(probs[labels, cols], 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[labels, cols] -= 1.0
    return nll, dlogits / batch


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. pred."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def layer_grad_norms(per_layer: list[CellGrads]) -> list[float]:
    """L2 norm of each layer's total parameter gradient."""
    return [g.norm() for g in per_layer]


# --- training configuration --------------------------------------------------

_TASKS = ("adding", "copy", "mnist", "pmnist")


class ConfigError(ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    task: str
    layers: tuple[tuple[CellKind, int], ...]
    seq_len: int = 200            # adding/copy length parameter (T)
    steps: int = 2000             # optimizer steps (generated tasks)
    epochs: int = 3               # dataset tasks
    batch_size: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    seed: int = 0
    eval_every: int = 200
    eval_size: int = 500
    stop_eval_below: float | None = None
    microbatch: int | None = None
    marker_placement: str = "halves"
    log_layer_grad_norms: bool = False
    log_weight_trace: bool = False
    train_subset: int = 1000
    test_subset: int = 200
    permute_seed: int = 1
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None

    def __post_init__(self):
        if self.task not in _TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not self.layers:
            raise ConfigError("need at least one layer")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.steps < 1 or self.epochs < 1:
            raise ConfigError("counts must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip threshold must be > 0")
        if self.microbatch is not None and self.microbatch < 1:
            raise ConfigError("microbatch must be >= 1")


_CONFIG_KEYS = {
    "task": str, "layers": list, "seq_len": int, "steps": int, "epochs": int,
    "batch_size": int, "lr": (int, float), "beta1": (int, float),
    "beta2": (int, float), "eps": (int, float), "clip_norm": (int, float, type(None)),
    "seed": int, "eval_every": int, "eval_size": int,
    "stop_eval_below": (int, float, type(None)), "microbatch": (int, type(None)),
    "marker_placement": str, "log_layer_grad_norms": bool, "log_weight_trace": bool,
    "train_subset": int, "test_subset": int, "permute_seed": int,
    "images_path": (str, type(None)), "labels_path": (str, type(None)),
    "test_images_path": (str, type(None)), "test_labels_path": (str, type(None)),
}


def config_from_dict(raw: dict) -> TrainConfig:
    """Strict JSON-config parser: unknown keys and wrong types are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("task", "layers"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    for key, value in raw.items():
        if not isinstance(value, _CONFIG_KEYS[key]):
            raise ConfigError(f"bad type for {key!r}")
    layers = []
    for entry in raw["layers"]:
        if not isinstance(entry, dict) or set(entry) != {"kind", "hidden"}:
            raise ConfigError("each layer needs exactly {kind, hidden}")
        try:
            kind = CellKind(entry["kind"])
        except ValueError:
            raise ConfigError(f"unknown cell kind {entry['kind']!r}") from None
        hidden = entry["hidden"]
        if not isinstance(hidden, int) or hidden < 1:
            raise ConfigError("layer hidden width must be a positive integer")
        layers.append((kind, hidden))
    kwargs = {k: v for k, v in raw.items() if k != "layers"}
    if "lr" in kwargs:
        kwargs["lr"] = float(kwargs["lr"])
    try:
        return TrainConfig(layers=tuple(layers), **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --- the training loop -------------------------------------------------------

def named_params(lattice: Lattice, head: Head):
    out = []
    for l, params in enumerate(lattice.cells):
        for name, arr in params.named_arrays():
            out.append((f"layer{l}/{name}", arr))
    out.append(("head/W", head.W))
    out.append(("head/b", head.b))
    return out


def _named_grads(per_layer: list[CellGrads], d_head_w, d_head_b):
    out = []
    for l, grads in enumerate(per_layer):
        for name, arr in grads.named_arrays():
            out.append((f"layer{l}/{name}", arr))
    out.append(("head/W", d_head_w))
    out.append(("head/b", d_head_b))
    return out


def _head_pass(head: Head, grid, batch: Batch):
    """Loss, head gradients, and the per-step seeds for backward_sequence."""
    steps = grid.steps
    if batch.loss == LossKind.MSE:
        h_last = grid.top_h(steps - 1)
        pred = head.logits(h_last)
        loss, dpred = mse(pred[0], batch.targets)
        dlogits = dpred[None, :]
        d_w = dlogits @ h_last.T
        d_b = dlogits.sum(axis=1)
        seeds = [None] * (steps - 1) + [head.W.T @ dlogits]
        return loss, d_w, d_b, seeds

    if head.mode == "per-step":
        d_w = np.zeros_like(head.W)
        d_b = np.zeros_like(head.b)
        seeds = []
        loss = 0.0
        for t in range(steps):
            h_t = grid.top_h(t)
            nll, dlogits = softmax_xent(head.logits(h_t), batch.targets[t])
            dlogits /= steps
            loss += nll / steps
            d_w += dlogits @ h_t.T
            d_b += dlogits.sum(axis=1)
            seeds.append(head.W.T @ dlogits)
        return loss, d_w, d_b, seeds

    if head.mode == "mean-pool":
        hbar = sum(grid.top_h(t) for t in range(steps)) / steps
        loss, dlogits = softmax_xent(head.logits(hbar), batch.targets)
        d_w = dlogits @ hbar.T
        d_b = dlogits.sum(axis=1)
        seed = head.W.T @ dlogits / steps
        return loss, d_w, d_b, [seed.copy() for _ in range(steps)]

    h_last = grid.top_h(steps - 1)
    loss, dlogits = softmax_xent(head.logits(h_last), batch.targets)
    d_w = dlogits @ h_last.T
    d_b = dlogits.sum(axis=1)
    seeds = [None] * (steps - 1) + [head.W.T @ dlogits]
    return loss, d_w, d_b, seeds


def _split_batch(batch: Batch, size: int | None):
    total = batch.inputs.shape[2]
    if size is None or size >= total:
        yield batch, total
        return
    for lo in range(0, total, size):
        hi = min(lo + size, total)
        targets = batch.targets[..., lo:hi]
        yield Batch(batch.inputs[:, :, lo:hi], targets, batch.loss), total


def train_batch(lattice: Lattice, head: Head, batch: Batch,
                microbatch: int | None = None):
    """Forward + backward over one batch (optionally in exact micro-batch
    chunks). Returns (mean loss, per-layer grads, head W grad, head b grad,
    last grid)."""
    total = batch.inputs.shape[2]
    agg_layers = None
    agg_w = agg_b = None
    loss_sum = 0.0
    grid = None
    for chunk, _ in _split_batch(batch, microbatch):
        nb = chunk.inputs.shape[2]
        grid = forward_sequence(lattice, chunk.inputs)
        loss, d_w, d_b, seeds = _head_pass(head, grid, chunk)
        # chunk seeds carry 1/nb; rescale to 1/total so chunks sum exactly
        scale = nb / total
        seeds = [None if s is None else s * scale for s in seeds]
        _, per_layer = backward_sequence(lattice, grid, seeds=seeds, record=False)
        loss_sum += loss * nb
        if agg_layers is None:
            agg_layers, agg_w, agg_b = per_layer, d_w * scale, d_b * scale
        else:
            for acc, g in zip(agg_layers, per_layer):
                acc.iadd(g)
            agg_w += d_w * scale
            agg_b += d_b * scale
    return loss_sum / total, agg_layers, agg_w, agg_b, grid


def evaluate(lattice: Lattice, head: Head, batch: Batch,
             microbatch: int | None = None) -> dict:
    """Loss (and accuracy for classification) on a held-out batch."""
    total = batch.inputs.shape[2]
    loss_sum = 0.0
    correct = 0
    classify = batch.loss == LossKind.XENT
    for chunk, _ in _split_batch(batch, microbatch):
        nb = chunk.inputs.shape[2]
        grid = forward_sequence(lattice, chunk.inputs)
        if chunk.loss == LossKind.MSE:
            pred = head.logits(grid.top_h(grid.steps - 1))[0]
            loss_sum += float(np.mean((pred - chunk.targets) ** 2)) * nb
        elif head.mode == "per-step":
            nll = 0.0
            for t in range(grid.steps):
                step_nll, _ = softmax_xent(head.logits(grid.top_h(t)), chunk.targets[t])
                nll += step_nll / grid.steps
            loss_sum += nll * nb
        else:
            logits = head.logits(grid.top_h(grid.steps - 1))
            nll, _ = softmax_xent(logits, chunk.targets)
            loss_sum += nll * nb
            correct += int((logits.argmax(axis=0) == chunk.targets).sum())
    out = {"loss": loss_sum / total}
    if classify and head.mode != "per-step":
        out["accuracy"] = correct / total
    return out


def _image_batch(images: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> Batch:
    sel = images[idx]  # (B, 784)
    inputs = sel.T[:, None, :]  # (784, 1, B)
    return Batch(inputs, labels[idx].astype(np.int64), LossKind.XENT)


def _load_task_data(cfg: TrainConfig, data: MnistSet | None):
    if cfg.task in ("adding", "copy"):
        return None, None
    if data is None:
        if not cfg.images_path or not cfg.labels_path:
            raise ConfigError("mnist tasks need images_path and labels_path")
        from .tasks import load_mnist_idx
        data = load_mnist_idx(cfg.images_path, cfg.labels_path)
        if cfg.test_images_path and cfg.test_labels_path:
            test = load_mnist_idx(cfg.test_images_path, cfg.test_labels_path)
        else:
            test = None
    else:
        test = None
    if cfg.task == "pmnist":
        data = permute_pixels(data, cfg.permute_seed)
        if test is not None:
            test = permute_pixels(test, cfg.permute_seed)
    return data, test


def train_run(cfg: TrainConfig, data: MnistSet | None = None,
              test_data: MnistSet | None = None) -> Iterator[dict]:
    """Mini-batch training loop; yields one metrics record per step plus
    eval records, ending with a summary (or a divergence diagnostic)."""
    root = Rng(cfg.seed)
    if cfg.task == "adding":
        n_in, n_out, head_mode, horizon = 2, 1, "final", cfg.seq_len
    elif cfg.task == "copy":
        n_in, n_out, head_mode, horizon = 10, 10, "per-step", cfg.seq_len + 20
    else:
        n_in, n_out, head_mode, horizon = 1, 10, "final", 784

    loaded, loaded_test = _load_task_data(cfg, data)
    if loaded is not None:
        data = loaded
    if test_data is None:
        test_data = loaded_test
    if cfg.task == "pmnist" and data is not None and data.permutation is None:
        data = permute_pixels(data, cfg.permute_seed)

    spec = StackSpec(n_in=n_in, layers=cfg.layers, t_max=horizon)
    lattice = build(spec, "training", root.derive(0))
    head = init_head(cfg.layers[-1][1], n_out, root.derive(1), head_mode)
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    params = named_params(lattice, head)

    if cfg.task == "adding":
        eval_batch = gen_adding(root.derive(2), cfg.eval_size, cfg.seq_len,
                                cfg.marker_placement)
        make_batch = lambda step: gen_adding(root.derive(3, step), cfg.batch_size,
                                             cfg.seq_len, cfg.marker_placement)
        plan = [(0, s) for s in range(cfg.steps)]
    elif cfg.task == "copy":
        eval_batch = gen_copy(root.derive(2), cfg.eval_size, cfg.seq_len)
        make_batch = lambda step: gen_copy(root.derive(3, step), cfg.batch_size, cfg.seq_len)
        plan = [(0, s) for s in range(cfg.steps)]
    else:
        n_train = min(cfg.train_subset, len(data))
        train_images = data.images[:n_train]
        train_labels = data.labels[:n_train]
        if test_data is not None:
            tset = test_data
        else:
            lo = min(n_train + cfg.test_subset, len(data))
            tset = MnistSet(data.images[n_train:lo], data.labels[n_train:lo])
        eval_batch = _image_batch(tset.images, tset.labels,
                                  np.arange(len(tset))) if len(tset) else None
        orders = {}
        plan = []
        per_epoch = max(1, n_train // cfg.batch_size)
        for epoch in range(cfg.epochs):
            orders[epoch] = root.derive(4, epoch).shuffled(n_train)
            plan.extend((epoch, i) for i in range(per_epoch))

        def make_batch(step):
            epoch, i = plan[step]
            idx = orders[epoch][i * cfg.batch_size:(i + 1) * cfg.batch_size]
            return _image_batch(train_images, train_labels, idx)

    stop = False
    for step, (epoch, _) in enumerate(plan):
        batch = make_batch(step)
        loss, per_layer, d_w, d_b, grid = train_batch(lattice, head, batch, cfg.microbatch)
        if not np.isfinite(loss):
            yield {"event": "divergence", "step": step, "epoch": epoch, "loss": float(loss)}
            return
        grads = _named_grads(per_layer, d_w, d_b)
        record = {"step": step, "epoch": epoch, "loss": float(loss)}
        if cfg.clip_norm is not None:
            record["grad_norm_preclip"] = clip_global_norm(grads, cfg.clip_norm)
        if cfg.log_layer_grad_norms:
            record["layer_grad_norms"] = layer_grad_norms(per_layer)
        if cfg.log_weight_trace:
            trace = weight_state_trace(lattice, grid)
            record["weight_norms"] = trace["weight_norms"]
            record["mean_hidden"] = trace["mean_hidden"]
        try:
            adam_step(adam, params, grads)
        except NonFiniteGradientError as exc:
            yield record
            yield {"event": "divergence", "step": step, "epoch": epoch,
                   "loss": float(loss), "detail": str(exc)}
            return
        yield record

        last = step == len(plan) - 1
        epoch_end = last or plan[step + 1][0] != epoch
        if eval_batch is not None and (
            (cfg.task in ("adding", "copy") and ((step + 1) % cfg.eval_every == 0 or last))
            or (cfg.task in ("mnist", "pmnist") and epoch_end)
        ):
            result = evaluate(lattice, head, eval_batch, cfg.microbatch)
            yield {"step": step, "epoch": epoch, "eval": result}
            if cfg.stop_eval_below is not None and result["loss"] < cfg.stop_eval_below:
                stop = True
        if stop:
            break

    yield {"event": "done", "steps": step + 1, "lattice": lattice, "head": head}


def grad_check(kind: CellKind, trials: int, eps: float = 1e-5,
               rng: Rng | None = None, n_in: int = 5, n_hidden: int = 7) -> float:
    """Worst relative error between the analytic backward pass and central
    finite differences of a random scalar projection of the cell outputs,
    over every parameter and input entry."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps out of the supported range")
    rng = rng or Rng(0)
    worst = 0.0
    lstm = kind == CellKind.LSTM
    for trial in range(trials):
        trng = rng.derive(17, trial)
        params = init_params(kind, n_in, n_hidden, 8, trng.derive(0))
        # move off the orthogonal/zero-bias manifold for a generic test point
        for j, (_, arr) in enumerate(params.named_arrays()):
            arr += 0.2 * trng.derive(1, j).normals(arr.size).reshape(arr.shape)
        x = trng.derive(2).uniform_range(-1.0, 1.0, n_in)
        h_prev = trng.derive(3).uniform_range(-0.8, 0.8, n_hidden)
        c_prev = trng.derive(4).uniform_range(-0.8, 0.8, n_hidden) if lstm else None
        r_h = trng.derive(5).normals(n_hidden)
        r_c = trng.derive(6).normals(n_hidden) if lstm else None

        def project():
            h, c, _ = forward(params, x, h_prev, c_prev)
            s = float(r_h @ h)
            if r_c is not None:
                s += float(r_c @ c)
            return s

        _, _, cache = forward(params, x, h_prev, c_prev)
        g_x, g_hp, g_cp, grads = cells_mod.backward(params, cache, r_h, r_c)
        # floor the denominators at 0.1% of the trial's dominant gradient so
        # FD cancellation noise on near-zero entries does not read as error
        trial_scale = max(
            float(np.abs(arr).max())
            for arr in [g_x, g_hp] + ([g_cp] if g_cp is not None else [])
            + [a for _, a in grads.named_arrays()]
        )
        floor = max(1e-3 * trial_scale, 1e-12)

        def fd_vs(analytic, base):
            nonlocal worst
            flat = base.ravel()
            a_flat = np.asarray(analytic).ravel()
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = project()
                flat[i] = keep - eps
                dn = project()
                flat[i] = keep
                fd = (up - dn) / (2.0 * eps)
                scale = max(abs(a_flat[i]), abs(fd), floor)
                worst = max(worst, abs(a_flat[i] - fd) / scale)

        grad_arrays = dict(grads.named_arrays())
        for name, arr in params.named_arrays():
            fd_vs(grad_arrays[name], arr)
        fd_vs(g_x, x)
        fd_vs(g_hp, h_prev)
        if c_prev is not None:
            fd_vs(g_cp, c_prev)
    return worst
