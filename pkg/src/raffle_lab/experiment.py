"""Experiment runner: JSON configs, environment construction, metrics and persistence."""

import copy
import csv
import io
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .exceptions import ConfigurationError
from .hard_instances import HardInstanceParams, build_perturbed, build_reference, enumerate_family
from .mdp import EpisodicMDP, evaluate_policy, optimal_policy, uniform_policy
from .model_class import ModelClass
from .raffle import plan_for_reward, run_exploration, system_identification_error
from .replearn import (
    divergence_score,
    occupancy_sampling,
    reachability_diagnostics,
    replearn,
    uniform_sampling,
)
from .synthetic import make_synthetic_env, random_policy, random_reward

__all__ = [
    "CONFIG_SCHEMA",
    "CSV_HEADER",
    "ExperimentConfig",
    "RunRecord",
    "load_config",
    "build_environment",
    "run",
    "run_replearn",
    "iteration_rows",
    "write_csv",
    "write_json",
    "atomic_write_text",
]

CSV_HEADER = ("n", "h", "loglik", "v_hat", "zeta_n", "alpha_hat_n", "lambda_n", "terminated")

_PROB = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_SEED = {"type": ["integer", "null"], "minimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["environment", "algorithm"],
    "additionalProperties": False,
    "properties": {
        "environment": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "d", "S", "K", "H"],
                    "properties": {
                        "kind": {"const": "synthetic"},
                        "d": _POS_INT,
                        "S": _POS_INT,
                        "K": _POS_INT,
                        "H": _POS_INT,
                        "n_phi_decoys": _NONNEG_INT,
                        "n_mu_decoys": _NONNEG_INT,
                        "seed": _SEED,
                        "min_tv": {"type": "number", "minimum": 0},
                        "anchor_weight": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "H", "D", "K", "epsilon0"],
                    "properties": {
                        "kind": {"const": "hard_instance"},
                        "H": _POS_INT,
                        "D": _POS_INT,
                        "K": _POS_INT,
                        "epsilon0": {"type": "number"},
                        "H_bar": {"type": ["integer", "null"], "minimum": 1},
                        "index": {
                            "type": ["array", "null"],
                            "items": {"type": "integer"},
                            "minItems": 3,
                            "maxItems": 3,
                        },
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "path"],
                    "properties": {"kind": {"const": "file"}, "path": {"type": "string"}},
                },
            ]
        },
        "algorithm": {
            "type": "object",
            "additionalProperties": False,
            "required": ["epsilon", "delta"],
            "properties": {
                "epsilon": _PROB,
                "delta": _PROB,
                "beta3": {"type": "number", "exclusiveMinimum": 0},
                "bonus_scale": {"type": "number", "minimum": 0},
                "max_iterations": _POS_INT,
                "seed": _SEED,
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_test_rewards": _NONNEG_INT,
                "n_test_policies": _NONNEG_INT,
                "seed": _SEED,
                "replearn": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "required": ["T", "N_f"],
                    "properties": {
                        "T": _POS_INT,
                        "N_f": _POS_INT,
                        "C_D": {"type": "number", "minimum": 0},
                        "q_mode": {"enum": ["uniform", "occupancy"]},
                        "use_true_model": {"type": "boolean"},
                        "seed": _SEED,
                    },
                },
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "csv": {"type": ["string", "null"]},
                "json": {"type": ["string", "null"]},
                "include_wall_clock": {"type": "boolean"},
            },
        },
    },
}

_DEFAULTS = {
    "algorithm": {"beta3": 1.0, "bonus_scale": 1.0, "max_iterations": 1000, "seed": 0},
    "evaluation": {"n_test_rewards": 10, "n_test_policies": 10, "seed": 1, "replearn": None},
    "output": {"csv": None, "json": None, "include_wall_clock": False},
}
_REPLEARN_DEFAULTS = {"C_D": 0.1, "q_mode": "uniform", "use_true_model": False, "seed": 2}
_SYNTHETIC_DEFAULTS = {"n_phi_decoys": 0, "n_mu_decoys": 0, "seed": 0, "min_tv": 0.02, "anchor_weight": 0.5}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration with defaults filled in; ``data`` is the JSON echo."""

    data: dict

    @classmethod
    def from_dict(cls, raw):
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"invalid config: {exc.message}") from exc
        data = copy.deepcopy(raw)
        for section, defaults in _DEFAULTS.items():
            data[section] = {**defaults, **data.get(section, {})}
        if data["evaluation"]["replearn"] is not None:
            data["evaluation"]["replearn"] = {**_REPLEARN_DEFAULTS, **data["evaluation"]["replearn"]}
        if data["environment"]["kind"] == "synthetic":
            data["environment"] = {**_SYNTHETIC_DEFAULTS, **data["environment"]}
        for key in ("csv", "json"):
            path = data["output"][key]
            if path is not None and not os.access(Path(path).resolve().parent, os.W_OK):
                raise ConfigurationError(f"output path {path!r} is not writable")
        return cls(data)

    def with_overrides(self, **overrides):
        """Copy with algorithm fields replaced; ``None`` values are ignored."""
        data = copy.deepcopy(self.data)
        data["algorithm"].update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_dict(data)

    @property
    def environment(self):
        return self.data["environment"]

    @property
    def algorithm(self):
        return self.data["algorithm"]

    @property
    def evaluation(self):
        return self.data["evaluation"]

    @property
    def output(self):
        return self.data["output"]


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path!r}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


@dataclass
class Environment:
    env: EpisodicMDP
    model_class: ModelClass
    canonical_reward: Optional[object] = None


def _hard_instance_environment(env_cfg):
    try:
        params = HardInstanceParams(env_cfg["H"], env_cfg["D"], env_cfg["K"], env_cfg["epsilon0"], env_cfg.get("H_bar"))
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    reference = build_reference(params)
    mu = reference.mdp.factorization.mu
    index = env_cfg.get("index")
    if index is None:
        members = [build_perturbed(params, *idx) for idx in enumerate_family(params)]
        instance = reference
    else:
        try:
            instance = build_perturbed(params, *index)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        members = [instance]
    phis = (reference.mdp.factorization.phi,) + tuple(m.mdp.factorization.phi for m in members)
    return Environment(instance.mdp, ModelClass(phis, (mu,)), instance.reward)


def _file_environment(env_cfg):
    try:
        with open(env_cfg["path"], encoding="utf-8") as fh:
            data = json.load(fh)
        env = EpisodicMDP.from_dict(data["mdp"])
        model_class = ModelClass.from_dict(data["model_class"])
    except (OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigurationError(f"cannot load environment file: {exc}") from exc
    if env.factorization is None:
        raise ConfigurationError("environment file must carry the true factorization")
    return Environment(env, model_class)


def build_environment(config):
    env_cfg = config.environment
    kind = env_cfg["kind"]
    if kind == "synthetic":
        try:
            env, model_class = make_synthetic_env(
                env_cfg["d"],
                env_cfg["S"],
                env_cfg["K"],
                env_cfg["H"],
                env_cfg["n_phi_decoys"],
                env_cfg["n_mu_decoys"],
                rng_seed=env_cfg["seed"],
                min_tv=env_cfg["min_tv"],
                anchor_weight=env_cfg["anchor_weight"],
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        return Environment(env, model_class)
    if kind == "hard_instance":
        return _hard_instance_environment(env_cfg)
    return _file_environment(env_cfg)


@dataclass
class RunRecord:
    config: dict
    iterations: list
    terminated: bool
    n_epsilon: int
    trajectory_count: int
    metrics: dict
    wall_clock: float = 0.0
    replearn: Optional[dict] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self, include_wall_clock=False):
        out = {
            "config": self.config,
            "terminated": self.terminated,
            "n_epsilon": self.n_epsilon,
            "trajectory_count": self.trajectory_count,
            "metrics": self.metrics,
            "replearn": self.replearn,
            "iterations": self.iterations,
        }
        if include_wall_clock:
            out["wall_clock"] = self.wall_clock
        return out


def iteration_rows(log):
    rows = []
    for entry in log:
        rows.append(
            {
                "n": entry.n,
                "h": list(range(1, len(entry.loglik) + 1)),
                "loglik": [float(x) for x in entry.loglik],
                "v_hat": float(entry.v_hat),
                "zeta_n": float(entry.zeta_n),
                "alpha_hat_n": float(entry.alpha_hat_n),
                "lambda_n": float(entry.lambda_n),
                "terminated": bool(entry.terminated),
            }
        )
    return rows


def atomic_write_text(path, text):
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.resolve().parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(
            [
                r["n"],
                json.dumps(r["h"]),
                json.dumps(r["loglik"]),
                repr(r["v_hat"]),
                repr(r["zeta_n"]),
                repr(r["alpha_hat_n"]),
                repr(r["lambda_n"]),
                int(r["terminated"]),
            ]
        )
    return buf.getvalue()


def write_csv(path, rows):
    atomic_write_text(path, csv_text(rows))


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _evaluate(env, model, evaluation, canonical):
    H, S, K = env.H, env.S, env.K
    rng = np.random.default_rng(evaluation["seed"])
    rewards = [random_reward(H, S, K, rng) for _ in range(evaluation["n_test_rewards"])]
    policies = [random_policy(H, S, K, rng) for _ in range(evaluation["n_test_policies"])]

    def gap(reward):
        _, v_star = optimal_policy(env, reward)
        v_pi, _ = evaluate_policy(env, plan_for_reward(model, reward), reward)
        return float(v_star - v_pi)

    gaps = [gap(r) for r in rewards]
    sysid = [system_identification_error(model, env, pi)[1] for pi in policies]
    metrics = {
        "suboptimality_gaps": gaps,
        "max_suboptimality_gap": max(gaps) if gaps else None,
        "sysid_errors": sysid,
        "max_sysid_error": max(sysid) if sysid else None,
    }
    if canonical is not None:
        metrics["canonical_gap"] = gap(canonical)
    return metrics


def _replearn_report(env, model, model_class, settings):
    target_model = env if settings["use_true_model"] else model
    if settings["q_mode"] == "uniform":
        sampling = uniform_sampling(env.H, env.S, env.K)
    else:
        sampling = occupancy_sampling(target_model, uniform_policy(env.H, env.S, env.K))
    out, designs = replearn(
        target_model,
        list(model_class.phis),
        settings["T"],
        settings["N_f"],
        sampling=sampling,
        rng_seed=settings["seed"],
        reference_model=env,
        C_D=settings["C_D"],
    )
    phi_star = env.factorization.phi
    scores = [divergence_score(sampling.q[h], phi_star[h], out.phi[h]) for h in range(env.H)]
    return {
        "phi_index": list(out.phi_index),
        "loss": out.loss.tolist(),
        "ambiguous": list(out.ambiguous),
        "divergence_scores": scores,
        "sigma_d_sq": [None if d is None else d.sigma_d_sq for d in designs],
        "diverse": [None if d is None else d.diverse for d in designs],
        "diagnostics": {
            k: (v if np.isfinite(v) else None)
            for k, v in reachability_diagnostics(env, uniform_policy(env.H, env.S, env.K), sampling).items()
        },
    }


def run(config, write=True):
    """Exploration, evaluation and optional representation learning for one config."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    start = time.perf_counter()
    built = build_environment(config)
    alg = config.algorithm
    out = run_exploration(
        built.env,
        built.model_class,
        alg["epsilon"],
        alg["delta"],
        beta3=alg["beta3"],
        max_iterations=alg["max_iterations"],
        rng_seed=alg["seed"],
        bonus_scale=alg["bonus_scale"],
    )
    metrics = _evaluate(built.env, out.model, config.evaluation, built.canonical_reward)
    rl = None
    if config.evaluation["replearn"] is not None:
        rl = _replearn_report(built.env, out.model, built.model_class, config.evaluation["replearn"])
    record = RunRecord(
        config=config.data,
        iterations=iteration_rows(out.log),
        terminated=out.terminated,
        n_epsilon=out.n_iterations,
        trajectory_count=out.trajectory_count,
        metrics=metrics,
        wall_clock=time.perf_counter() - start,
        replearn=rl,
    )
    if write:
        _persist(config, record)
    return record


def run_replearn(config, write=True):
    """Representation learning alone; explores first unless the true model is requested."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    settings = config.evaluation["replearn"]
    if settings is None:
        raise ConfigurationError("config has no evaluation.replearn section")
    if not settings["use_true_model"]:
        return run(config, write=write)
    start = time.perf_counter()
    built = build_environment(config)
    rl = _replearn_report(built.env, built.env, built.model_class, settings)
    record = RunRecord(
        config=config.data,
        iterations=[],
        terminated=True,
        n_epsilon=0,
        trajectory_count=0,
        metrics={},
        wall_clock=time.perf_counter() - start,
        replearn=rl,
    )
    if write:
        _persist(config, record)
    return record


def _persist(config, record):
    out = config.output
    if out["csv"]:
        write_csv(out["csv"], record.iterations)
    if out["json"]:
        write_json(out["json"], record.to_dict(out["include_wall_clock"]))
