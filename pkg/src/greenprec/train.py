"""Loss assembly, batch sampling, Adam, and the staged training protocol.

Training proceeds coarse to fine over a decreasing schedule of source widths
eps_0 > eps_1 > ... ; each stage activates one more level of branches and
retargets the residual to the narrower Gaussian source.  A final optional
stage replicates the finest level into Q gated copies for local
specialization.  All randomness flows from a single integer seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import msnn
from .errors import ConfigurationError, DivergenceError, NumericError


# ---------------------------------------------------------------------------
# Mollified point source
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mollifier:
    """Gaussian replacement for the point source, width eps."""

    eps: float
    dim: int

    @property
    def peak(self) -> float:
        return (1.0 / (self.eps * math.sqrt(math.pi))) ** self.dim


def mollifier_eval(m: Mollifier, x, y):
    """Exact Gaussian value; accepts single points or stacked rows."""
    if m.eps <= 0:
        raise ConfigurationError("mollifier width must be positive")
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(y, dtype=jnp.float64)
    r2 = jnp.sum((x - y) ** 2, axis=-1)
    return m.peak * jnp.exp(-r2 / m.eps**2)


# ---------------------------------------------------------------------------
# Configuration and batches
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters of the staged protocol."""

    eps_schedule: tuple
    epochs_per_stage: tuple
    batches_per_epoch: int = 20
    n_boundary: int = 500
    n_anchor: int = 500
    n_uniform: int = 500
    n_near_diag: int = 1500
    w_res: float = 1.0
    w_bc: float = 1.0
    w_aux_start: float = 1.0
    w_aux_floor: float = 0.01
    learning_rate: float = 1e-3
    lr_stage_factor: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dd_subdomains: int = 0
    dd_epochs: int = 0
    dd_frozen_lr_factor: float = 0.1
    dd_perturb: float = 1e-2
    gate_pretrain_steps: int = 500
    gate_seed_weight: float = 0.9
    gate_seed_jitter: float = 0.05
    anchor_pool_size: int = 1024
    divergence_factor: float = 1e6
    param_law: str = "none"  # "none" | "angle_uniform" (theta ~ U[0, pi))
    seed: int = 0

    def __post_init__(self):
        eps = tuple(self.eps_schedule)
        if any(eps[i + 1] >= eps[i] for i in range(len(eps) - 1)):
            raise ConfigurationError("eps_schedule must be strictly decreasing")
        if len(self.epochs_per_stage) != len(eps):
            raise ConfigurationError("need one epoch count per stage")
        counts = (self.batches_per_epoch, self.n_boundary, self.n_uniform,
                  self.n_near_diag) + tuple(self.epochs_per_stage)
        if any(c <= 0 for c in counts):
            raise ConfigurationError("all counts must be positive")
        if self.n_anchor < 0:
            raise ConfigurationError("n_anchor must be nonnegative")
        self.eps_schedule = eps
        self.epochs_per_stage = tuple(self.epochs_per_stage)


@dataclass(eq=False)
class Batch:
    """One stratified mini-batch; parameter columns have width 0 when unused."""

    boundary_x: np.ndarray
    boundary_y: np.ndarray
    boundary_p: np.ndarray
    anchor_x: np.ndarray
    anchor_y: np.ndarray
    anchor_p: np.ndarray
    anchor_g: np.ndarray
    uniform_x: np.ndarray
    uniform_y: np.ndarray
    uniform_p: np.ndarray
    near_x: np.ndarray
    near_y: np.ndarray
    near_p: np.ndarray

    def __len__(self):
        return (self.boundary_x.shape[0] + self.anchor_x.shape[0]
                + self.uniform_x.shape[0] + self.near_x.shape[0])


@dataclass(eq=False)
class AnchorPool:
    """Fixed subsample of an anchor set used for the auxiliary loss."""

    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    p: np.ndarray  # (m, n_raw); width 0 when non-parametric

    def __len__(self):
        return self.g.shape[0]


def make_anchor_pool(anchors, size: int, rng) -> AnchorPool:
    """Subsample ``size`` anchor triples once, uniformly without replacement."""
    m = len(anchors)
    if m == 0:
        raise ConfigurationError("anchor set is empty")
    idx = np.arange(m) if m <= size else np.sort(rng.choice(m, size=size, replace=False))
    p = (anchors.param_values[idx] if anchors.param_values is not None
         else np.zeros((len(idx), 0)))
    return AnchorPool(x=anchors.x[idx], y=anchors.y[idx], g=anchors.g[idx], p=p)


def _sample_interior(rng, n, dim):
    return rng.uniform(0.0, 1.0, size=(n, dim))


def _sample_boundary(rng, n, dim):
    if dim == 1:
        return rng.integers(0, 2, size=(n, 1)).astype(float)
    edge = rng.integers(0, 4, size=n)
    t = rng.uniform(0.0, 1.0, size=n)
    pts = np.empty((n, 2))
    pts[edge == 0] = np.column_stack([t[edge == 0], np.zeros((edge == 0).sum())])
    pts[edge == 1] = np.column_stack([t[edge == 1], np.ones((edge == 1).sum())])
    pts[edge == 2] = np.column_stack([np.zeros((edge == 2).sum()), t[edge == 2]])
    pts[edge == 3] = np.column_stack([np.ones((edge == 3).sum()), t[edge == 3]])
    return pts


def _sample_ball(rng, n, dim, radius):
    if dim == 1:
        return rng.uniform(-radius, radius, size=(n, 1))
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    th = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def _sample_raw_params(rng, n, law):
    if law == "none":
        return np.zeros((n, 0))
    if law == "angle_uniform":
        return rng.uniform(0.0, math.pi, size=(n, 1))
    raise ConfigurationError(f"unknown parameter law {law!r}")


def sample_batch(config: TrainConfig, eps: float, rng, pool: AnchorPool,
                 dim: int) -> Batch:
    """Draw one stratified batch for the stage of width ``eps``.

    Near-diagonal x are y + eps * u with u uniform in the radius-3 ball,
    clipped to the domain, so the |x - y| <= 3 eps bound holds.
    """
    law = config.param_law
    nb, na = config.n_boundary, config.n_anchor
    nu, nn = config.n_uniform, config.n_near_diag
    if na > 0 and len(pool) == 0:
        raise ConfigurationError("anchor pool is empty but n_anchor > 0")

    bx = _sample_boundary(rng, nb, dim)
    by = _sample_interior(rng, nb, dim)
    bp = _sample_raw_params(rng, nb, law)

    if na > 0:
        take = rng.choice(len(pool), size=min(na, len(pool)), replace=False)
        ax, ay, ag = pool.x[take], pool.y[take], pool.g[take]
        ap = pool.p[take]
    else:
        width = 0 if law == "none" else 1
        ax = np.zeros((0, dim)); ay = np.zeros((0, dim))
        ag = np.zeros(0); ap = np.zeros((0, width))

    ux = _sample_interior(rng, nu, dim)
    uy = _sample_interior(rng, nu, dim)
    up = _sample_raw_params(rng, nu, law)

    ny = _sample_interior(rng, nn, dim)
    nx = np.clip(ny + eps * _sample_ball(rng, nn, dim, 3.0), 0.0, 1.0)
    npar = _sample_raw_params(rng, nn, law)

    return Batch(
        boundary_x=bx, boundary_y=by, boundary_p=bp,
        anchor_x=ax, anchor_y=ay, anchor_p=ap, anchor_g=ag,
        uniform_x=ux, uniform_y=uy, uniform_p=up,
        near_x=nx, near_y=ny, near_p=npar,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _loss_terms_builder(arch, coeffs):
    """(params, batch arrays, eps) -> (L_res, L_bc, L_aux), vectorized."""
    vfn = lambda params, x, y, p: msnn._model_value(arch, params, x, y, p)
    ofn = lambda params, x, y, p: msnn._operator_value(arch, coeffs, params, x, y, p)
    v_vec = jax.vmap(vfn, in_axes=(None, 0, 0, 0))
    o_vec = jax.vmap(ofn, in_axes=(None, 0, 0, 0))
    d = arch.dim

    def terms(params, bx, by, bp, ax, ay, ap, ag, rx, ry, rp, eps):
        peak = (1.0 / (eps * jnp.sqrt(jnp.pi))) ** d
        target = peak * jnp.exp(-jnp.sum((rx - ry) ** 2, axis=1) / eps**2)
        l_res = jnp.mean((o_vec(params, rx, ry, rp) - target) ** 2)
        l_bc = jnp.mean(v_vec(params, bx, by, bp) ** 2)
        if ag.shape[0] > 0:
            l_aux = jnp.mean((v_vec(params, ax, ay, ap) - ag) ** 2)
        else:
            l_aux = jnp.zeros(())
        return l_res, l_bc, l_aux

    return terms


_TERMS_CACHE = {}


def _loss_terms_fn(arch, coeffs):
    key = (arch, id(coeffs))
    if key not in _TERMS_CACHE:
        _TERMS_CACHE[key] = (jax.jit(_loss_terms_builder(arch, coeffs)), coeffs)
    return _TERMS_CACHE[key][0]


def _batch_residual_arrays(batch):
    rx = np.concatenate([batch.uniform_x, batch.near_x])
    ry = np.concatenate([batch.uniform_y, batch.near_y])
    rp = np.concatenate([batch.uniform_p, batch.near_p])
    return rx, ry, rp


def total_loss(model, coeffs, batch: Batch, mollifier: Mollifier, weights):
    """Weighted sum of the residual, boundary, and anchor terms.

    ``weights`` is (w_res, w_bc, w_aux).  Returns (total, components) where
    components maps "res"/"bc"/"aux" to the unweighted means.
    """
    w_res, w_bc, w_aux = weights
    rx, ry, rp = _batch_residual_arrays(batch)
    terms = _loss_terms_fn(model.arch, coeffs)
    l_res, l_bc, l_aux = terms(
        model.params, batch.boundary_x, batch.boundary_y, batch.boundary_p,
        batch.anchor_x, batch.anchor_y, batch.anchor_p, batch.anchor_g,
        rx, ry, rp, mollifier.eps)
    comps = {"res": float(l_res), "bc": float(l_bc), "aux": float(l_aux)}
    total = w_res * comps["res"] + w_bc * comps["bc"] + w_aux * comps["aux"]
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss; components: {comps}")
    return total, comps


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params):
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return {"m": zeros, "v": jax.tree_util.tree_map(jnp.zeros_like, params),
            "t": jnp.zeros((), dtype=jnp.int64)}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              lr_scale=None):
    """One bias-corrected Adam update; returns (new_params, new_state).

    ``lr_scale`` optionally scales the step per leaf (pytree of scalars
    matching ``params``), used to damp earlier levels during specialization.
    """
    t = state["t"] + 1
    m = jax.tree_util.tree_map(lambda m_, g: beta1 * m_ + (1 - beta1) * g,
                               state["m"], grads)
    v = jax.tree_util.tree_map(lambda v_, g: beta2 * v_ + (1 - beta2) * g * g,
                               state["v"], grads)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    if lr_scale is None:
        new_params = jax.tree_util.tree_map(
            lambda p, m_, v_: p - lr * (m_ / bc1) / (jnp.sqrt(v_ / bc2) + eps),
            params, m, v)
    else:
        new_params = jax.tree_util.tree_map(
            lambda p, m_, v_, s: p - lr * s * (m_ / bc1) / (jnp.sqrt(v_ / bc2) + eps),
            params, m, v, lr_scale)
    return new_params, {"m": m, "v": v, "t": t}


def aux_weight_schedule(epoch: int, total_epochs: int, start: float = 1.0,
                        floor: float = 0.01) -> float:
    """Geometric decay from ``start`` at epoch 0 to ``floor`` at the last epoch."""
    if start <= 0.0:
        return 0.0
    if total_epochs <= 1 or epoch <= 0:
        return start
    frac = min(epoch / (total_epochs - 1), 1.0)
    return max(start * (floor / start) ** frac, floor)


# ---------------------------------------------------------------------------
# Staged training
# ---------------------------------------------------------------------------

@dataclass
class StageReport:
    label: str
    eps: float
    rows: list = field(default_factory=list)  # per-epoch component means

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "L_res", "L_bc", "L_aux", "total", "w_aux", "lr"])
            for r in self.rows:
                w.writerow([r["epoch"], r["L_res"], r["L_bc"], r["L_aux"],
                            r["total"], r["w_aux"], r["lr"]])

    @property
    def final_total(self):
        return self.rows[-1]["total"] if self.rows else math.inf


_STEP_CACHE = {}


def _train_step_fn(arch, coeffs, scaled: bool):
    key = (arch, id(coeffs), scaled)
    if key not in _STEP_CACHE:
        terms = _loss_terms_builder(arch, coeffs)

        def step(params, state, bx, by, bp, ax, ay, ap, ag, rx, ry, rp,
                 eps, w_res, w_bc, w_aux, lr, beta1, beta2, adam_eps,
                 lr_scale=None):
            def objective(p):
                l_res, l_bc, l_aux = terms(p, bx, by, bp, ax, ay, ap, ag, rx, ry, rp, eps)
                return w_res * l_res + w_bc * l_bc + w_aux * l_aux, (l_res, l_bc, l_aux)

            (total, comps), grads = jax.value_and_grad(objective, has_aux=True)(params)
            new_params, new_state = adam_step(
                params, grads, state, lr, beta1, beta2, adam_eps, lr_scale=lr_scale)
            return new_params, new_state, total, comps

        if scaled:
            fn = jax.jit(step)
        else:
            fn = jax.jit(lambda *args: step(*args, lr_scale=None))
        _STEP_CACHE[key] = (fn, coeffs)
    return _STEP_CACHE[key][0]


def _run_epochs(model, coeffs, config, pool, rng, eps, lr, epochs, label,
                lr_scale=None, progress=None):
    step_fn = _train_step_fn(model.arch, coeffs, lr_scale is not None)
    params = model.params
    state = adam_init(params)
    report = StageReport(label=label, eps=eps)
    initial_total = None

    for epoch in range(epochs):
        w_aux = aux_weight_schedule(epoch, epochs, config.w_aux_start, config.w_aux_floor)
        sums = np.zeros(4)
        for _ in range(config.batches_per_epoch):
            batch = sample_batch(config, eps, rng, pool, model.arch.dim)
            rx, ry, rp = _batch_residual_arrays(batch)
            args = (params, state, batch.boundary_x, batch.boundary_y, batch.boundary_p,
                    batch.anchor_x, batch.anchor_y, batch.anchor_p, batch.anchor_g,
                    rx, ry, rp, eps, config.w_res, config.w_bc, w_aux, lr,
                    config.adam_beta1, config.adam_beta2, config.adam_eps)
            if lr_scale is not None:
                params, state, total, comps = step_fn(*args, lr_scale)
            else:
                params, state, total, comps = step_fn(*args)
            sums += [float(comps[0]), float(comps[1]), float(comps[2]), float(total)]
        means = sums / config.batches_per_epoch
        row = {"epoch": epoch, "L_res": means[0], "L_bc": means[1],
               "L_aux": means[2], "total": means[3], "w_aux": w_aux, "lr": lr}
        report.rows.append(row)
        if not math.isfinite(means[3]):
            raise NumericError(f"{label}: non-finite loss at epoch {epoch}: {row}")
        if initial_total is None:
            initial_total = means[3]
        elif means[3] > config.divergence_factor * initial_total:
            raise DivergenceError(
                f"{label}: loss diverged at epoch {epoch} "
                f"({means[3]:.3e} > {config.divergence_factor:.0e} x {initial_total:.3e})",
                diagnostics=row)
        if progress is not None:
            progress(label, epoch, row)

    return msnn.MsnnModel(arch=model.arch, params=params), report


def train_stage(model, stage: int, config: TrainConfig, coeffs, pool: AnchorPool,
                rng, progress=None):
    """Run one width stage: activate level ``stage`` and optimize jointly.

    Stage indices are 0-based; stages 0..stage-1 must be complete (the model
    must hold exactly ``stage`` active levels, or ``stage + 1`` for stage 0
    straight after initialization).
    """
    if stage >= len(config.eps_schedule):
        raise ConfigurationError(f"stage {stage} out of range")
    if model.gate_active:
        raise ConfigurationError("width stages must precede gate specialization")
    if model.n_active_levels == stage:
        model = msnn.add_level(model, rng)
    elif not (stage == 0 and model.n_active_levels == 1):
        raise ConfigurationError(
            f"stage {stage} needs {stage} completed levels, model has "
            f"{model.n_active_levels} active")
    eps = config.eps_schedule[stage]
    lr = config.learning_rate * config.lr_stage_factor**stage
    return _run_epochs(model, coeffs, config, pool, rng, eps, lr,
                       config.epochs_per_stage[stage], f"stage{stage}",
                       progress=progress)


def _make_lr_scale(params, frozen_factor):
    def scale_tree(tree, s):
        return jax.tree_util.tree_map(lambda _: s, tree)

    return {
        "levels": scale_tree(params["levels"], frozen_factor),
        "far": scale_tree(params["far"], frozen_factor),
        "replicas": scale_tree(params["replicas"], 1.0),
        "gate": scale_tree(params["gate"], 1.0),
    }


def pretrain_gate(model, config: TrainConfig, rng, progress=None):
    """Teach the gate to put near-unity weight on its seed points.

    Cross-entropy against one-hot labels at each seed plus 20 jittered
    copies, Adam in rounds of ``gate_pretrain_steps``; runs until every seed
    reaches weight >= ``gate_seed_weight`` (up to 5 rounds).
    """
    arch = model.arch
    seeds = np.asarray([list(s) for s in arch.seeds], dtype=float)
    q = seeds.shape[0]
    jitter = config.gate_seed_jitter
    inputs, labels = [seeds], [np.arange(q)]
    for _ in range(20):
        pts = seeds + rng.uniform(-jitter, jitter, size=seeds.shape)
        if arch.gate_input == "source":
            pts = np.clip(pts, 0.0, 1.0)
        inputs.append(pts)
        labels.append(np.arange(q))
    pts = np.concatenate(inputs)
    labels = np.concatenate(labels)
    if arch.gate_input == "parameter":
        feats = np.column_stack([np.cos(2 * pts[:, 0]), np.sin(2 * pts[:, 0])])
    else:
        feats = pts

    feats_j = jnp.asarray(feats)
    labels_j = jnp.asarray(labels)

    def xent(gate):
        logits = jax.vmap(lambda f: msnn._mlp_forward(gate, f))(feats_j)
        logp = jax.nn.log_softmax(logits, axis=1)
        return -jnp.mean(logp[jnp.arange(labels_j.shape[0]), labels_j])

    @jax.jit
    def gate_step(gate, state):
        loss, grads = jax.value_and_grad(xent)(gate)
        gate, state = adam_step(gate, grads, state, config.learning_rate,
                                config.adam_beta1, config.adam_beta2, config.adam_eps)
        return gate, state, loss

    gate = model.params["gate"]
    state = adam_init(gate)
    seed_feats = jnp.asarray(feats[:q])

    def seed_weights(gate):
        w = jax.vmap(lambda f: jax.nn.softmax(msnn._mlp_forward(gate, f)))(seed_feats)
        return np.asarray(w)

    for round_ in range(5):
        for _ in range(config.gate_pretrain_steps):
            gate, state, loss = gate_step(gate, state)
        w = seed_weights(gate)
        if np.all(np.diag(w) >= config.gate_seed_weight):
            break
    if progress is not None:
        progress("gate_pretrain", round_, {"min_seed_weight": float(np.min(np.diag(w)))})

    new_params = dict(model.params)
    new_params["gate"] = gate
    return msnn.MsnnModel(arch=model.arch, params=new_params)


def dd_specialize(model, config: TrainConfig, coeffs, pool: AnchorPool, rng,
                  progress=None):
    """Final specialization: gated replicas of the finest level, joint tuning.

    Earlier levels and the far field stay trainable at
    ``dd_frozen_lr_factor`` times the stage learning rate.
    """
    if config.dd_subdomains < 2 or config.dd_epochs <= 0:
        raise ConfigurationError("dd stage requires dd_subdomains >= 2 and dd_epochs > 0")
    if model.n_active_levels != model.arch.n_levels:
        raise ConfigurationError("all width stages must complete before dd")
    model = msnn.activate_gate(model, rng, perturb=config.dd_perturb)
    model = pretrain_gate(model, config, rng, progress=progress)
    eps = config.eps_schedule[-1]
    lr = config.learning_rate * config.lr_stage_factor ** len(config.eps_schedule)
    lr_scale = _make_lr_scale(model.params, config.dd_frozen_lr_factor)
    return _run_epochs(model, coeffs, config, pool, rng, eps, lr,
                       config.dd_epochs, "dd", lr_scale=lr_scale, progress=progress)


def train_kernel(arch, coeffs, config: TrainConfig, anchors, progress=None,
                 out_dir=None):
    """Full protocol: width stages then optional gate specialization.

    Returns (model, reports).  When ``out_dir`` is given, per-stage loss
    curves (CSV) and checkpoints are written there.
    """
    if tuple(config.eps_schedule) != tuple(arch.eps_schedule):
        raise ConfigurationError("config and architecture eps schedules differ")
    import pathlib

    seq = np.random.SeedSequence(config.seed)
    rng_init, rng_pool, rng_train = [np.random.default_rng(s) for s in seq.spawn(3)]

    model = msnn.init_model(arch, seed=rng_init)
    pool = make_anchor_pool(anchors, config.anchor_pool_size, rng_pool)
    reports = []

    def emit(report, tag):
        reports.append(report)
        if out_dir is not None:
            out = pathlib.Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            report.save_csv(out / f"loss_{tag}.csv")
            msnn.save_checkpoint(model, out / f"checkpoint_{tag}.npz")

    for k in range(len(config.eps_schedule)):
        model, report = train_stage(model, k, config, coeffs, pool, rng_train,
                                    progress=progress)
        emit(report, f"stage{k}")
    if config.dd_subdomains >= 2 and config.dd_epochs > 0:
        model, report = dd_specialize(model, config, coeffs, pool, rng_train,
                                      progress=progress)
        emit(report, "dd")
    return model, reports
