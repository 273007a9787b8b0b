"""Declarative experiment configuration: schema, YAML loading, presets."""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import pde
from .compress import RankRule
from .errors import ConfigurationError
from .msnn import MsnnArchitecture
from .train import TrainConfig

_REQUIRED = object()


def _pop(d: dict, key: str, default=_REQUIRED, path: str = ""):
    where = f"{path}.{key}" if path else key
    if key not in d:
        if default is _REQUIRED:
            raise ConfigurationError(f"missing config key {where!r}")
        return default
    return d.pop(key)


def _ensure_empty(d: dict, path: str):
    if d:
        raise ConfigurationError(f"unknown config keys under {path!r}: {sorted(d)}")


@dataclass
class ProblemConfig:
    name: str
    dim: int
    scheme: str
    grid_sizes: tuple
    anchor_grid: int = 34
    anchor_angles: tuple = None    # parametric problems only
    theta_sweep: tuple = None      # angles solved by the suite
    xi: float = 0.1

    def coefficients(self) -> pde.CoefficientField:
        if self.name not in pde.PROBLEMS:
            raise ConfigurationError(f"unknown problem {self.name!r}")
        if self.name == "rotated_laplacian_2d":
            return pde.PROBLEMS[self.name](xi=self.xi)
        return pde.PROBLEMS[self.name]()

    @property
    def parametric(self) -> bool:
        return self.anchor_angles is not None


@dataclass
class CompressionConfig:
    format: str = "auto"            # auto | hmatrix | sparse
    eta: float = 1.0
    leaf_rule: str = "sqrt_capped"  # sqrt_capped | by_threshold
    leaf_cap: int = 128
    leaf_small: int = 64
    leaf_large: int = 128
    leaf_threshold: int = 64
    rank_method: str = "nystrom_nearest"
    rank_base: int = 1
    rank_base_large: int = None     # used above rank_threshold (per-axis N)
    rank_threshold: int = None
    rank_sample: int = None
    rank_log_scale: bool = False
    svd_tol: float = 1e-3
    tau: float = 0.1                # a-posteriori acceptance tolerance
    tau_loc: float = 1e-3           # locality threshold (relative to max diagonal)
    decay_radius_factor: float = 10.0  # r = factor * h
    sparse_p: int = None            # default 3 * 3^dim
    validation_samples: int = 1000
    m_max_bytes: int = None         # default: 4x anchor-grid dense bytes

    def leaf_max(self, n_axis: int, n_total: int) -> int:
        if self.leaf_rule == "sqrt_capped":
            return max(1, int(min(math.sqrt(n_total), self.leaf_cap)))
        if self.leaf_rule == "by_threshold":
            return self.leaf_small if n_axis <= self.leaf_threshold else self.leaf_large
        raise ConfigurationError(f"unknown leaf rule {self.leaf_rule!r}")

    def rank_rule(self, n_axis: int, n_total: int) -> RankRule:
        base = self.rank_base
        if self.rank_threshold is not None and n_axis > self.rank_threshold:
            base = self.rank_base_large
        leaf = self.leaf_max(n_axis, n_total)
        return RankRule(
            method=self.rank_method, base_rank=base, sample_rank=self.rank_sample,
            log_scale=self.rank_log_scale, leaf_size=leaf, tol=self.svd_tol)

    def default_sparse_p(self, dim: int) -> int:
        return self.sparse_p if self.sparse_p is not None else 3 * 3**dim

    def resolve_m_max(self, anchor_grid: int, dim: int) -> int:
        if self.m_max_bytes is not None:
            return self.m_max_bytes
        n_anchor = anchor_grid**dim
        return 4 * n_anchor * n_anchor * 8


@dataclass
class SolverConfig:
    restart: int = 50
    tol: float = 1e-6
    max_it: int = 500
    rhs_seeds: tuple = (101, 102, 103)
    dense_cap_bytes: int = 2 * 1024**3


@dataclass
class ExperimentConfig:
    name: str
    problem: ProblemConfig
    arch: MsnnArchitecture
    training: TrainConfig
    compression: CompressionConfig
    solver: SolverConfig
    output_dir: str = "out"


def _problem_from_dict(d: dict) -> ProblemConfig:
    cfg = ProblemConfig(
        name=_pop(d, "name", path="problem"),
        dim=int(_pop(d, "dim", path="problem")),
        scheme=_pop(d, "scheme", "central", path="problem"),
        grid_sizes=tuple(int(v) for v in _pop(d, "grid_sizes", path="problem")),
        anchor_grid=int(_pop(d, "anchor_grid", 34, path="problem")),
        anchor_angles=_maybe_tuple(_pop(d, "anchor_angles", None, path="problem")),
        theta_sweep=_maybe_tuple(_pop(d, "theta_sweep", None, path="problem")),
        xi=float(_pop(d, "xi", 0.1, path="problem")),
    )
    _ensure_empty(d, "problem")
    if cfg.scheme not in ("central", "upwind_convection"):
        raise ConfigurationError(f"unknown scheme {cfg.scheme!r}")
    if cfg.dim not in (1, 2):
        raise ConfigurationError("problem.dim must be 1 or 2")
    return cfg


def _maybe_tuple(v):
    return None if v is None else tuple(float(x) for x in v)


def _arch_from_dict(d: dict, dim: int) -> MsnnArchitecture:
    seeds = _pop(d, "seeds", (), path="model")
    arch = MsnnArchitecture(
        dim=dim,
        eps_schedule=tuple(float(v) for v in _pop(d, "eps_schedule", path="model")),
        branch_widths=tuple(int(v) for v in _pop(d, "branch_widths", path="model")),
        hidden_layers=int(_pop(d, "hidden_layers", 3, path="model")),
        far_width=int(_pop(d, "far_width", 50, path="model")),
        far_layers=int(_pop(d, "far_layers", 3, path="model")),
        scale_width=int(_pop(d, "scale_width", 5, path="model")),
        scale_layers=int(_pop(d, "scale_layers", 3, path="model")),
        param_encoding=_pop(d, "param_encoding", "none", path="model"),
        n_subdomains=int(_pop(d, "n_subdomains", 0, path="model")),
        gate_input=_pop(d, "gate_input", "source", path="model"),
        seeds=tuple(tuple(float(c) for c in np.atleast_1d(s)) for s in seeds),
    )
    _ensure_empty(d, "model")
    return arch


def _training_from_dict(d: dict, eps_schedule) -> TrainConfig:
    kwargs = {"eps_schedule": eps_schedule,
              "epochs_per_stage": tuple(int(v) for v in _pop(d, "epochs_per_stage", path="training"))}
    optional = {
        "batches_per_epoch": int, "n_boundary": int, "n_anchor": int,
        "n_uniform": int, "n_near_diag": int, "w_res": float, "w_bc": float,
        "w_aux_start": float, "w_aux_floor": float, "learning_rate": float,
        "lr_stage_factor": float, "adam_beta1": float, "adam_beta2": float,
        "adam_eps": float, "dd_subdomains": int, "dd_epochs": int,
        "dd_frozen_lr_factor": float, "dd_perturb": float,
        "gate_pretrain_steps": int, "gate_seed_weight": float,
        "gate_seed_jitter": float, "anchor_pool_size": int,
        "divergence_factor": float, "param_law": str, "seed": int,
    }
    for key, cast in optional.items():
        if key in d:
            kwargs[key] = cast(d.pop(key))
    _ensure_empty(d, "training")
    return TrainConfig(**kwargs)


def _compression_from_dict(d: dict) -> CompressionConfig:
    kwargs = {}
    casts = {
        "format": str, "eta": float, "leaf_rule": str, "leaf_cap": int,
        "leaf_small": int, "leaf_large": int, "leaf_threshold": int,
        "rank_method": str, "rank_base": int, "rank_base_large": int,
        "rank_threshold": int, "rank_sample": int, "rank_log_scale": bool,
        "svd_tol": float, "tau": float, "tau_loc": float,
        "decay_radius_factor": float, "sparse_p": int,
        "validation_samples": int, "m_max_bytes": int,
    }
    for key, cast in casts.items():
        if key in d:
            val = d.pop(key)
            kwargs[key] = None if val is None else cast(val)
    _ensure_empty(d, "compression")
    cfg = CompressionConfig(**kwargs)
    if cfg.format not in ("auto", "hmatrix", "sparse"):
        raise ConfigurationError(f"unknown compression format {cfg.format!r}")
    return cfg


def _solver_from_dict(d: dict) -> SolverConfig:
    cfg = SolverConfig(
        restart=int(_pop(d, "restart", 50, path="solver")),
        tol=float(_pop(d, "tol", 1e-6, path="solver")),
        max_it=int(_pop(d, "max_it", 500, path="solver")),
        rhs_seeds=tuple(int(s) for s in _pop(d, "rhs_seeds", (101, 102, 103), path="solver")),
        dense_cap_bytes=int(_pop(d, "dense_cap_bytes", 2 * 1024**3, path="solver")),
    )
    _ensure_empty(d, "solver")
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    name = _pop(raw, "name")
    problem = _problem_from_dict(dict(_pop(raw, "problem")))
    arch = _arch_from_dict(dict(_pop(raw, "model")), problem.dim)
    training = _training_from_dict(dict(_pop(raw, "training")), arch.eps_schedule)
    compression = _compression_from_dict(dict(_pop(raw, "compression", {})))
    solver = _solver_from_dict(dict(_pop(raw, "solver", {})))
    output_dir = _pop(raw, "output_dir", "out")
    _ensure_empty(raw, "<root>")
    if problem.parametric and arch.param_encoding == "none":
        raise ConfigurationError("parametric problem requires a parameter encoding")
    if arch.n_subdomains > 0 and training.dd_epochs > 0:
        if training.dd_subdomains != arch.n_subdomains:
            raise ConfigurationError(
                "training.dd_subdomains must match model.n_subdomains")
    return ExperimentConfig(
        name=name, problem=problem, arch=arch, training=training,
        compression=compression, solver=solver, output_dir=output_dir)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} does not hold a mapping")
    return config_from_dict(raw)


def preset_names() -> list:
    root = importlib.resources.files("greenprec") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir()
                  if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    root = importlib.resources.files("greenprec") / "presets"
    path = root / f"{name}.yaml"
    if not path.is_file():
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {preset_names()}")
    raw = yaml.safe_load(path.read_text())
    return config_from_dict(raw)


def resolve_config(spec: str) -> ExperimentConfig:
    """Accept either a YAML path or a shipped preset name."""
    import os

    if os.path.exists(spec):
        return load_config(spec)
    return load_preset(spec)
