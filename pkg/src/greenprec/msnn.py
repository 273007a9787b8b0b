"""Adaptive multiscale neural kernel G(x, y) with learnable scaling exponents.

The kernel is a sum of per-width levels (a sharply localized near branch and
a broader middle branch each), plus one smooth globally supported far-field
network.  Each branch evaluates

    eps^(alpha(y)) * body((x - y) / eps^(beta(y)), y, features)

so the exponent networks shape amplitude and support as functions of the
source point.  Within a level the exponents are ordered by construction:
beta_1 = 1 fixed, beta_2 = sigmoid(raw) < 1, alpha_2 = alpha_1 +
softplus(raw) >= alpha_1.  An optional softmax gate mixes replicated copies
of the finest level for locally specialized kernels that stay smooth in y.

Spatial derivatives are exact (automatic differentiation, float64); the same
machinery provides gradients of arbitrary scalar losses with respect to all
trainable parameters, including through second-derivative computations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import jax
import jax.numpy as jnp
import numpy as np

from .errors import CheckpointError, ConfigurationError, NumericError

FD_COEFF_STEP = 1e-6  # central-difference step for unsupplied tensor divergences


# ---------------------------------------------------------------------------
# Architecture and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MsnnArchitecture:
    """Static shape of the multiscale kernel (hashable; params live separately)."""

    dim: int
    eps_schedule: tuple          # strictly decreasing source widths, one per level
    branch_widths: tuple         # hidden width of near/middle bodies per level
    hidden_layers: int = 3
    far_width: int = 50
    far_layers: int = 3
    scale_width: int = 5         # exponent and gate networks
    scale_layers: int = 3
    param_encoding: str = "none"  # "none" | "angle_double" ((cos 2t, sin 2t))
    n_subdomains: int = 0        # Q replicas mixed by the gate; 0 = no gate stage
    gate_input: str = "source"   # "source" (y) or "parameter"
    seeds: tuple = ()            # Q seed points (source coords or raw parameters)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f"dim must be 1 or 2, got {self.dim}")
        if len(self.eps_schedule) != len(self.branch_widths):
            raise ConfigurationError("eps_schedule and branch_widths must align")
        eps = self.eps_schedule
        if any(eps[i + 1] >= eps[i] for i in range(len(eps) - 1)):
            raise ConfigurationError("eps_schedule must be strictly decreasing")
        if self.param_encoding not in ("none", "angle_double"):
            raise ConfigurationError(f"unknown param_encoding {self.param_encoding!r}")
        if self.gate_input not in ("source", "parameter"):
            raise ConfigurationError(f"unknown gate_input {self.gate_input!r}")

    @property
    def n_levels(self) -> int:
        return len(self.eps_schedule)

    @property
    def n_param_features(self) -> int:
        return {"none": 0, "angle_double": 2}[self.param_encoding]


def encode_params(arch: MsnnArchitecture, praw):
    """Map raw problem parameters to network feature channels."""
    if arch.param_encoding == "none":
        return jnp.zeros(0)
    th = praw[0]
    return jnp.stack([jnp.cos(2.0 * th), jnp.sin(2.0 * th)])


def _init_mlp(rng, sizes, final_zero=False, final_bias=0.0):
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((jnp.asarray(W), jnp.asarray(b)))
    if final_zero:
        W, b = layers[-1]
        layers[-1] = (jnp.zeros_like(W), jnp.full_like(b, final_bias))
    return tuple(layers)


def _init_level(arch: MsnnArchitecture, rng, k: int):
    d, nf = arch.dim, arch.n_param_features
    body_in = 2 * d + nf
    width = arch.branch_widths[k]
    body_sizes = [body_in] + [width] * arch.hidden_layers + [1]
    scale_sizes = [d] + [arch.scale_width] * arch.scale_layers + [1]
    return {
        "near_body": _init_mlp(rng, body_sizes),
        "middle_body": _init_mlp(rng, body_sizes),
        # start at the pure-diffusion balance alpha = 2 - d with beta_1 = 1
        "alpha1": _init_mlp(rng, scale_sizes, final_zero=True, final_bias=2.0 - d),
        "alpha2_raw": _init_mlp(rng, scale_sizes),
        "beta2_raw": _init_mlp(rng, scale_sizes),
    }


@dataclass(eq=False)
class MsnnModel:
    """Architecture plus the current parameter pytree.

    ``params["levels"]`` holds the active ordinary levels.  After gate
    activation the finest level moves into ``params["replicas"]`` (Q copies)
    and ``params["gate"]`` supplies the mixing logits.
    """

    arch: MsnnArchitecture
    params: dict

    @property
    def gate_active(self) -> bool:
        return "replicas" in self.params

    @property
    def n_active_levels(self) -> int:
        return len(self.params["levels"]) + (1 if self.gate_active else 0)

    def eval(self, x, y, params=None):
        return kernel_value(self, x, y, params)

    def grad_x(self, x, y, params=None):
        return grad_x(self, x, y, params)

    def hess_x(self, x, y, params=None):
        return hess_x(self, x, y, params)


def init_model(arch: MsnnArchitecture, seed=0, n_levels: int = 1) -> MsnnModel:
    """Fresh model with the first ``n_levels`` levels and the far field."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    if not 1 <= n_levels <= arch.n_levels:
        raise ConfigurationError(f"n_levels must be in [1, {arch.n_levels}]")
    d, nf = arch.dim, arch.n_param_features
    far_sizes = [2 * d + nf] + [arch.far_width] * arch.far_layers + [1]
    params = {
        "levels": tuple(_init_level(arch, rng, k) for k in range(n_levels)),
        "far": _init_mlp(rng, far_sizes),
    }
    return MsnnModel(arch=arch, params=params)


def add_level(model: MsnnModel, rng) -> MsnnModel:
    """Activate the next level of the schedule with freshly initialized branches."""
    if model.gate_active:
        raise ConfigurationError("cannot add levels after gate activation")
    k = model.n_active_levels
    if k >= model.arch.n_levels:
        raise ConfigurationError("all levels are already active")
    new_params = dict(model.params)
    new_params["levels"] = model.params["levels"] + (_init_level(model.arch, rng, k),)
    return MsnnModel(arch=model.arch, params=new_params)


def activate_gate(model: MsnnModel, rng, perturb: float = 1e-2) -> MsnnModel:
    """Replicate the finest level Q times with small symmetry-breaking noise.

    Each replica's parameters are scaled elementwise by (1 + z) with
    z ~ uniform(-perturb, perturb); a fresh softmax gate is initialized.
    """
    arch = model.arch
    if arch.n_subdomains < 2:
        raise ConfigurationError("gate requires n_subdomains >= 2")
    if len(arch.seeds) != arch.n_subdomains:
        raise ConfigurationError("one seed point per subdomain is required")
    if arch.gate_input == "parameter" and arch.n_param_features == 0:
        raise ConfigurationError("parameter-gated model needs a parameter encoding")
    if model.n_active_levels != arch.n_levels:
        raise ConfigurationError("activate all levels before the gate stage")
    if model.gate_active:
        raise ConfigurationError("gate already active")

    finest = model.params["levels"][-1]

    def perturbed():
        return jax.tree_util.tree_map(
            lambda a: a * (1.0 + jnp.asarray(rng.uniform(-perturb, perturb, size=a.shape))),
            finest,
        )

    gate_in = arch.dim if arch.gate_input == "source" else arch.n_param_features
    gate_sizes = [gate_in] + [arch.scale_width] * arch.scale_layers + [arch.n_subdomains]
    new_params = {
        "levels": model.params["levels"][:-1],
        "far": model.params["far"],
        "replicas": tuple(perturbed() for _ in range(arch.n_subdomains)),
        "gate": _init_mlp(rng, gate_sizes),
    }
    return MsnnModel(arch=arch, params=new_params)


# ---------------------------------------------------------------------------
# Forward evaluation
# ---------------------------------------------------------------------------

def _mlp_forward(layers, v):
    for W, b in layers[:-1]:
        v = jnp.tanh(W @ v + b)
    W, b = layers[-1]
    return W @ v + b


def _scalar_mlp(layers, v):
    return _mlp_forward(layers, v)[0]


def _level_exponents(level, y):
    a1 = _scalar_mlp(level["alpha1"], y)
    a2 = a1 + jax.nn.softplus(_scalar_mlp(level["alpha2_raw"], y))
    b1 = 1.0
    b2 = b1 * jax.nn.sigmoid(_scalar_mlp(level["beta2_raw"], y))
    return (a1, b1), (a2, b2)


def _level_value(level, eps, x, y, pfeat):
    (a1, b1), (a2, b2) = _level_exponents(level, y)
    disp = x - y
    near_in = jnp.concatenate([disp / eps**b1, y, pfeat])
    mid_in = jnp.concatenate([disp / eps**b2, y, pfeat])
    return (eps**a1 * _scalar_mlp(level["near_body"], near_in)
            + eps**a2 * _scalar_mlp(level["middle_body"], mid_in))


def _gate_weights(arch, params, y, pfeat):
    gate_in = y if arch.gate_input == "source" else pfeat
    return jax.nn.softmax(_mlp_forward(params["gate"], gate_in))


# -- joint value / x-gradient / x-Hessian in one forward pass ----------------
#
# Spatial derivatives enter only through the scaled displacement
# u = (x - y) / eps^beta(y), so each branch propagates (value, J, H) with
# J_u = eps^(-beta) * I and H_u = 0, and multiplies the result by
# eps^alpha(y).  tanh layers use t' = 1 - t^2 and t'' = -2 t (1 - t^2).

def _mlp_vgh(layers, inp, first_scale, d):
    """(value, dval/dx, d2val/dx2) of a scalar MLP whose first d inputs carry
    an x-Jacobian of first_scale * I (remaining inputs are x-independent)."""
    W0, b0 = layers[0]
    z = W0 @ inp + b0
    Jz = W0[:, :d] * first_scale
    t = jnp.tanh(z)
    s = 1.0 - t * t
    Jt = s[:, None] * Jz
    Ht = (-2.0 * t * s)[:, None, None] * (Jz[:, :, None] * Jz[:, None, :])
    v, Jv, Hv = t, Jt, Ht
    for W, b in layers[1:-1]:
        z = W @ v + b
        Jz = W @ Jv
        Hz = jnp.tensordot(W, Hv, axes=1)
        t = jnp.tanh(z)
        s = 1.0 - t * t
        v = t
        Jv = s[:, None] * Jz
        Hv = (s[:, None, None] * Hz
              + (-2.0 * t * s)[:, None, None] * (Jz[:, :, None] * Jz[:, None, :]))
    W, b = layers[-1]
    val = (W @ v + b)[0]
    J = (W @ Jv)[0]
    H = jnp.tensordot(W, Hv, axes=1)[0]
    return val, J, H


def _level_vgh(level, eps, x, y, pfeat, d):
    (a1, b1), (a2, b2) = _level_exponents(level, y)
    disp = x - y
    out = []
    for body, alpha, beta in (("near_body", a1, b1), ("middle_body", a2, b2)):
        scale = eps**-beta
        inp = jnp.concatenate([disp * scale, y, pfeat])
        val, J, H = _mlp_vgh(level[body], inp, scale, d)
        amp = eps**alpha
        out.append((amp * val, amp * J, amp * H))
    (v1, J1, H1), (v2, J2, H2) = out
    return v1 + v2, J1 + J2, H1 + H2


def _model_vgh(arch, params, x, y, praw):
    """Kernel value with exact first and second x-derivatives."""
    pfeat = encode_params(arch, praw)
    eps = arch.eps_schedule
    d = arch.dim
    val = jnp.zeros(())
    J = jnp.zeros(d)
    H = jnp.zeros((d, d))
    for k, level in enumerate(params["levels"]):
        v_, J_, H_ = _level_vgh(level, eps[k], x, y, pfeat, d)
        val, J, H = val + v_, J + J_, H + H_
    if "replicas" in params:
        k_f = len(params["levels"])
        w = _gate_weights(arch, params, y, pfeat)
        for m, rep in enumerate(params["replicas"]):
            v_, J_, H_ = _level_vgh(rep, eps[k_f], x, y, pfeat, d)
            val, J, H = val + w[m] * v_, J + w[m] * J_, H + w[m] * H_
    far_in = jnp.concatenate([x, y, pfeat])
    v_, J_, H_ = _mlp_vgh(params["far"], far_in, 1.0, d)
    return val + v_, J + J_, H + H_


def _model_value(arch, params, x, y, praw):
    pfeat = encode_params(arch, praw)
    eps = arch.eps_schedule
    total = 0.0
    for k, level in enumerate(params["levels"]):
        total = total + _level_value(level, eps[k], x, y, pfeat)
    if "replicas" in params:
        k_finest = len(params["levels"])
        w = _gate_weights(arch, params, y, pfeat)
        vals = jnp.stack([
            _level_value(rep, eps[k_finest], x, y, pfeat) for rep in params["replicas"]
        ])
        total = total + jnp.dot(w, vals)
    far_in = jnp.concatenate([x, y, pfeat])
    return total + _scalar_mlp(params["far"], far_in)


_FN_CACHE = {}


def value_fn(arch: MsnnArchitecture):
    """Jitted scalar kernel evaluator ``f(params, x, y, praw)``."""
    key = ("value", arch)
    if key not in _FN_CACHE:
        _FN_CACHE[key] = jax.jit(
            lambda params, x, y, praw: _model_value(arch, params, x, y, praw))
    return _FN_CACHE[key]


def grad_fn(arch: MsnnArchitecture):
    key = ("grad", arch)
    if key not in _FN_CACHE:
        _FN_CACHE[key] = jax.jit(
            lambda params, x, y, praw: _model_vgh(arch, params, x, y, praw)[1])
    return _FN_CACHE[key]


def hess_fn(arch: MsnnArchitecture):
    key = ("hess", arch)
    if key not in _FN_CACHE:
        _FN_CACHE[key] = jax.jit(
            lambda params, x, y, praw: _model_vgh(arch, params, x, y, praw)[2])
    return _FN_CACHE[key]


def _as_point(arch, x):
    x = jnp.atleast_1d(jnp.asarray(x, dtype=jnp.float64))
    if x.shape != (arch.dim,):
        raise ConfigurationError(f"expected point of dim {arch.dim}, got shape {x.shape}")
    return x


def _as_praw(model, params):
    need = model.arch.param_encoding != "none"
    if params is None:
        if need:
            raise ConfigurationError("model is parametric; params are required")
        return jnp.zeros(0)
    if not need:
        raise ConfigurationError("model is not parametric; params must be None")
    return jnp.atleast_1d(jnp.asarray(params, dtype=jnp.float64))


def kernel_value(model: MsnnModel, x, y, params=None) -> float:
    """G(x, y) for one pair of points; raises on non-finite results."""
    x = _as_point(model.arch, x)
    y = _as_point(model.arch, y)
    praw = _as_praw(model, params)
    val = float(value_fn(model.arch)(model.params, x, y, praw))
    if not math.isfinite(val):
        raise NumericError(_diagnose_nonfinite(model, x, y, praw))
    return val


def grad_x(model: MsnnModel, x, y, params=None) -> np.ndarray:
    """Exact gradient of the kernel with respect to x."""
    x = _as_point(model.arch, x)
    y = _as_point(model.arch, y)
    praw = _as_praw(model, params)
    g = np.asarray(grad_fn(model.arch)(model.params, x, y, praw))
    if not np.all(np.isfinite(g)):
        raise NumericError(_diagnose_nonfinite(model, x, y, praw))
    return g


def hess_x(model: MsnnModel, x, y, params=None) -> np.ndarray:
    """Exact (symmetric) Hessian of the kernel with respect to x."""
    x = _as_point(model.arch, x)
    y = _as_point(model.arch, y)
    praw = _as_praw(model, params)
    H = np.asarray(hess_fn(model.arch)(model.params, x, y, praw))
    if not np.all(np.isfinite(H)):
        raise NumericError(_diagnose_nonfinite(model, x, y, praw))
    return H


def _diagnose_nonfinite(model, x, y, praw) -> str:
    pfeat = encode_params(model.arch, praw)
    eps = model.arch.eps_schedule
    bad = []
    for k, level in enumerate(model.params["levels"]):
        v = float(_level_value(level, eps[k], x, y, pfeat))
        if not math.isfinite(v):
            bad.append(f"level {k}")
    if model.gate_active:
        k_f = len(model.params["levels"])
        for m, rep in enumerate(model.params["replicas"]):
            v = float(_level_value(rep, eps[k_f], x, y, pfeat))
            if not math.isfinite(v):
                bad.append(f"replica {m}")
    far = float(_scalar_mlp(model.params["far"], jnp.concatenate([x, y, pfeat])))
    if not math.isfinite(far):
        bad.append("far field")
    where = ", ".join(bad) if bad else "combination of branches"
    return f"non-finite kernel value at x={np.asarray(x)}, y={np.asarray(y)} ({where})"


# ---------------------------------------------------------------------------
# Differential-operator application
# ---------------------------------------------------------------------------

def _coeff_arrays(coeffs, x, praw):
    p = praw if praw is not None and praw.shape[0] > 0 else coeffs.params
    a_rows = coeffs.a(x, p)
    A = jnp.stack([jnp.stack(list(row)) for row in a_rows]) * jnp.ones(())
    b = jnp.stack(list(coeffs.b(x, p))) * jnp.ones(())
    c = coeffs.c(x, p) * jnp.ones(())
    if coeffs.div_a is not None:
        diva = jnp.stack(list(coeffs.div_a(x, p))) * jnp.ones(())
    else:
        d = coeffs.dim
        cols = []
        for j_col in range(d):
            acc = 0.0
            for i_row in range(d):
                e = jnp.zeros(d).at[i_row].set(FD_COEFF_STEP)
                ap = coeffs.a(x + e, p)[i_row][j_col]
                am = coeffs.a(x - e, p)[i_row][j_col]
                acc = acc + (ap - am) / (2.0 * FD_COEFF_STEP)
            cols.append(acc)
        diva = jnp.stack(cols) * jnp.ones(())
    return A, b, c, diva


def _operator_value(arch, coeffs, params, x, y, praw):
    val, g, H = _model_vgh(arch, params, x, y, praw)
    A, b, c, diva = _coeff_arrays(coeffs, x, praw)
    return -jnp.sum(A * H) + jnp.dot(b - diva, g) + c * val


def operator_fn(arch: MsnnArchitecture, coeffs):
    """Jitted ``(params, x, y, praw) -> (L_x G)(x, y)`` for fixed coefficients."""
    key = ("op", arch, id(coeffs))
    if key not in _FN_CACHE:
        fn = jax.jit(lambda params, x, y, praw: _operator_value(arch, coeffs, params, x, y, praw))
        _FN_CACHE[key] = (fn, coeffs)  # keep coeffs alive so the id stays valid
    return _FN_CACHE[key][0]


def apply_operator(model: MsnnModel, coeffs, x, y, params=None) -> float:
    """Evaluate -div(a grad G) + b . grad G + c G at (x, y)."""
    if coeffs.dim != model.arch.dim:
        raise ConfigurationError("coefficient dimension does not match the model")
    x = _as_point(model.arch, x)
    y = _as_point(model.arch, y)
    praw = _as_praw(model, params)
    val = float(operator_fn(model.arch, coeffs)(model.params, x, y, praw))
    if not math.isfinite(val):
        raise NumericError(_diagnose_nonfinite(model, x, y, praw))
    return val


# ---------------------------------------------------------------------------
# Parameter gradients, gate, exponents
# ---------------------------------------------------------------------------

def param_grad(loss_fn, params):
    """Gradient of a scalar loss with respect to every trainable array.

    ``loss_fn`` maps a parameter pytree to a scalar; differentiation is
    reverse-mode and passes through any spatial-derivative computations the
    loss performs internally.
    """
    grads = jax.grad(loss_fn)(params)
    leaves = jax.tree_util.tree_leaves(grads)
    if not all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in leaves):
        raise NumericError("non-finite parameter gradient")
    return grads


def gate_eval(model: MsnnModel, y, params=None) -> np.ndarray:
    """Softmax subdomain weights r(y); nonnegative and summing to one."""
    if not model.gate_active:
        raise ConfigurationError("model has no active gate")
    arch = model.arch
    praw = _as_praw(model, params) if arch.gate_input == "parameter" else jnp.zeros(0)
    pfeat = encode_params(arch, praw)
    y = _as_point(arch, y) if arch.gate_input == "source" else jnp.zeros(arch.dim)
    return np.asarray(_gate_weights(arch, model.params, y, pfeat))


def gate_weights_from_logits_net(gate_layers, gate_in) -> np.ndarray:
    return np.asarray(jax.nn.softmax(_mlp_forward(gate_layers, jnp.asarray(gate_in))))


FAR_FIELD_EXPONENTS = (0.0, 0.0)


def effective_exponents(model: MsnnModel, level: int, y, replica: int = None):
    """Ordered (alpha_j(y), beta_j(y)) pairs for the branches of one level.

    ``level == "far"`` reports the fixed far-field pair (0, 0).  For the
    gated finest level pass ``replica`` to select a copy.
    """
    if level == "far":
        return [FAR_FIELD_EXPONENTS]
    y = _as_point(model.arch, y)
    n_plain = len(model.params["levels"])
    if replica is not None or (model.gate_active and level == n_plain):
        if not model.gate_active:
            raise ConfigurationError("no replicas without an active gate")
        level_params = model.params["replicas"][replica or 0]
    else:
        if not 0 <= level < n_plain:
            raise ConfigurationError(f"level {level} is not active")
        level_params = model.params["levels"][level]
    (a1, b1), (a2, b2) = _level_exponents(level_params, y)
    return [(float(a1), float(b1)), (float(a2), float(b2))]


# ---------------------------------------------------------------------------
# Batched evaluation
# ---------------------------------------------------------------------------

def batch_value_fn(arch: MsnnArchitecture):
    key = ("batch_value", arch)
    if key not in _FN_CACHE:
        f = lambda params, x, y, praw: _model_value(arch, params, x, y, praw)
        _FN_CACHE[key] = jax.jit(jax.vmap(f, in_axes=(None, 0, 0, 0)))
    return _FN_CACHE[key]


def eval_batch(model: MsnnModel, X, Y, params=None, chunk: int = 65536) -> np.ndarray:
    """Vectorized kernel values over paired point arrays (n, dim)."""
    arch = model.arch
    X = np.asarray(X, dtype=float).reshape(-1, arch.dim)
    Y = np.asarray(Y, dtype=float).reshape(-1, arch.dim)
    n = X.shape[0]
    if params is None:
        P = np.zeros((n, 0))
    else:
        P = np.asarray(params, dtype=float)
        if P.ndim == 0:
            P = np.full((n, 1), float(P))
        elif P.ndim == 1 and P.shape[0] != n:
            P = np.tile(P, (n, 1))
        P = P.reshape(n, -1)
    fn = batch_value_fn(arch)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        out[lo:hi] = np.asarray(fn(model.params, X[lo:hi], Y[lo:hi], P[lo:hi]))
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NumericError(_diagnose_nonfinite(
            model, jnp.asarray(X[bad]), jnp.asarray(Y[bad]), jnp.asarray(P[bad])))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MsnnModel, path):
    """Self-describing container: architecture metadata plus flat arrays."""
    leaves, treedef = jax.tree_util.tree_flatten(model.params)
    meta = {
        "format": "greenprec-msnn-checkpoint-v1",
        "arch": asdict(model.arch),
        "n_plain_levels": len(model.params["levels"]),
        "gate_active": model.gate_active,
        "n_leaves": len(leaves),
    }
    payload = {f"leaf_{i:05d}": np.asarray(leaf) for i, leaf in enumerate(leaves)}
    payload["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path) -> MsnnModel:
    data = np.load(path)
    try:
        meta = json.loads(bytes(data["meta"]).decode())
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc
    if meta.get("format") != "greenprec-msnn-checkpoint-v1":
        raise CheckpointError(f"unknown checkpoint format {meta.get('format')!r}")
    arch_dict = dict(meta["arch"])
    for key in ("eps_schedule", "branch_widths"):
        arch_dict[key] = tuple(arch_dict[key])
    arch_dict["seeds"] = tuple(tuple(s) for s in arch_dict["seeds"])
    arch = MsnnArchitecture(**arch_dict)

    # rebuild the skeleton to recover the tree structure, then fill leaves
    rng = np.random.default_rng(0)
    skeleton = init_model(arch, seed=rng, n_levels=max(1, meta["n_plain_levels"])
                          if not meta["gate_active"] else arch.n_levels)
    if meta["gate_active"]:
        skeleton = activate_gate(skeleton, rng, perturb=0.0)
    elif len(skeleton.params["levels"]) != meta["n_plain_levels"]:
        raise CheckpointError("inconsistent level count in checkpoint")
    _, treedef = jax.tree_util.tree_flatten(skeleton.params)
    expected = treedef.num_leaves
    if meta["n_leaves"] != expected:
        raise CheckpointError(
            f"checkpoint has {meta['n_leaves']} arrays, architecture expects {expected}")
    leaves = [jnp.asarray(data[f"leaf_{i:05d}"]) for i in range(expected)]
    params = jax.tree_util.tree_unflatten(treedef, leaves)
    return MsnnModel(arch=arch, params=params)
