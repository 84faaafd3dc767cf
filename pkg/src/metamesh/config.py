"""Run configuration: TOML loading, validation, environment overrides and digests."""

from __future__ import annotations

import os
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import toml
from dotenv import load_dotenv

from .disturbances import Disturbance, DisturbanceProfile
from .dynamics import MONTE_CARLO_CYCLE_CAP, PolicySpec, SimulationConfig
from .errors import ConfigError
from .meshing import DEFAULT_STATE_CAP
from .models import DynamicsModel, make_model
from .utils import digest, to_jsonable

CONFIG_DIR = Path.home() / ".config" / "metamesh"
ENV_OUTPUT_DIR = "METAMESH_OUTPUT_DIR"
ENV_THREADS = "METAMESH_THREADS"

_SECTIONS = {
    "run", "model", "policies", "disturbances", "mesh", "integrator", "analysis", "project", "lump", "validate",
}
_RUN_KEYS = {"name", "seed", "output_dir", "threads"}
_MODEL_KEYS = {"id", "params"}
_POLICY_KEYS = {"id", "kind", "parameters"}
_DISTURBANCE_KEYS = {"probabilities", "push"}
_PUSH_KEYS = {"magnitude", "start_time", "duration", "target"}
_MESH_KEYS = {"d_tr", "d_tr_sweep", "state_cap", "initial", "weights"}
_INTEGRATOR_KEYS = {"dt", "hold_steps", "min_cycle_time", "timeout", "height_fraction", "event_tol", "torque_limit"}
_ANALYSIS_KEYS = {"controller", "probabilities", "gap_ratio", "danger_threshold", "full_vectors", "sweep"}
_SWEEP_KEYS = {"p_null", "p_interest", "groups"}
_PROJECT_KEYS = {"k", "axes", "input", "threshold"}
_LUMP_KEYS = {"d_tr", "cycles", "input", "disturbance"}
_VALIDATE_KEYS = {"episodes", "max_cycles"}


@dataclass(frozen=True)
class RunSection:
    name: str = "run"
    seed: int = 0
    output_dir: str = "out"
    threads: int = 1


@dataclass(frozen=True)
class MeshSection:
    d_tr: float = 0.01
    d_tr_sweep: tuple[float, ...] = ()
    state_cap: int = DEFAULT_STATE_CAP
    initial: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None


@dataclass(frozen=True)
class AnalysisSection:
    controller: int = 0
    probabilities: tuple[float, ...] | None = None
    gap_ratio: float = 0.1
    danger_threshold: float = 0.99
    full_vectors: bool = False
    p_null: float = 0.4
    p_interest: float = 0.5
    groups: tuple[tuple[int, ...], ...] = ()


@dataclass(frozen=True)
class ProjectSection:
    k: int = 3
    axes: str | None = None
    input: str | None = None
    threshold: float | None = None  # d_tr for lumping a state-sequence input


@dataclass(frozen=True)
class LumpSection:
    d_tr: float | None = None
    cycles: int = 250
    input: str | None = None
    disturbance: int = 0


@dataclass(frozen=True)
class ValidateSection:
    episodes: int = 1000
    max_cycles: int = MONTE_CARLO_CYCLE_CAP


@dataclass(frozen=True, eq=False)
class RunConfig:
    model_id: str
    model_params: dict[str, Any]
    policies: tuple[PolicySpec, ...]
    profile: DisturbanceProfile
    run: RunSection = field(default_factory=RunSection)
    mesh: MeshSection = field(default_factory=MeshSection)
    integrator: SimulationConfig = field(default_factory=SimulationConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    project: ProjectSection = field(default_factory=ProjectSection)
    lump: LumpSection = field(default_factory=LumpSection)
    validate: ValidateSection = field(default_factory=ValidateSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def build_model(self) -> DynamicsModel:
        return make_model(self.model_id, self.model_params)

    def analysis_profile(self) -> DisturbanceProfile:
        """The [analysis] probability override if given, else the [disturbances] profile."""
        if self.analysis.probabilities is None:
            return self.profile
        try:
            return self.profile.with_probabilities(self.analysis.probabilities)
        except ValueError as e:
            raise ConfigError(f"[analysis] probabilities: {e}")

    def resolve_path(self, value: str) -> Path:
        path = Path(value).expanduser()
        return path if path.is_absolute() else self.base_dir / path

    def mesh_section(self) -> dict[str, Any]:
        """Everything that determines the mesh and transition table."""
        return {
            "model": {"id": self.model_id, "params": self.model_params},
            "policies": [p.as_dict() for p in self.policies],
            "pushes": [d.as_dict() for d in self.profile.disturbances],
            "mesh": {
                "d_tr": self.mesh.d_tr,
                "state_cap": self.mesh.state_cap,
                "initial": self.mesh.initial,
                "weights": self.mesh.weights,
            },
            "integrator": self.integrator.as_dict(),
        }

    def resolved(self) -> dict[str, Any]:
        data = self.mesh_section()
        data["run"] = {"name": self.run.name, "seed": self.run.seed}
        data["probabilities"] = list(self.profile.probabilities)
        data["mesh"]["d_tr_sweep"] = list(self.mesh.d_tr_sweep)
        data["analysis"] = {
            "controller": self.analysis.controller,
            "probabilities": self.analysis.probabilities,
            "gap_ratio": self.analysis.gap_ratio,
            "danger_threshold": self.analysis.danger_threshold,
            "full_vectors": self.analysis.full_vectors,
            "sweep": {
                "p_null": self.analysis.p_null,
                "p_interest": self.analysis.p_interest,
                "groups": [list(g) for g in self.analysis.groups],
            },
        }
        data["project"] = {"k": self.project.k, "axes": self.project.axes, "input": self.project.input,
                           "threshold": self.project.threshold}
        data["lump"] = {"d_tr": self.lump.d_tr, "cycles": self.lump.cycles, "input": self.lump.input,
                        "disturbance": self.lump.disturbance}
        data["validate"] = {"episodes": self.validate.episodes, "max_cycles": self.validate.max_cycles}
        return to_jsonable(data)

    @property
    def config_digest(self) -> str:
        return digest(self.resolved())

    @property
    def mesh_digest(self) -> str:
        return digest(self.mesh_section())

    @property
    def disturbance_digest(self) -> str:
        return self.profile.axis_digest


# ---- parsing ----

def _table(data: Any, where: str, allowed: set[str]) -> dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"[{where}] must be a table")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown key '{where}.{unknown[0]}' in config")
    return dict(data)


def _floats(value: Any, where: str) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where} must be a list of numbers")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a list of numbers, got {value!r}")


def _build(cls: type, where: str, **kwargs: Any) -> Any:
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}")


def parse_config(data: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed config tree; nothing is simulated here."""
    top = _table(data, "config", _SECTIONS)

    run_t = _table(top.get("run"), "run", _RUN_KEYS)
    run = _build(RunSection, "run", **run_t)
    if not isinstance(run.threads, int) or run.threads < 1:
        raise ConfigError(f"[run] threads must be a positive integer, got {run.threads!r}")

    model_t = _table(top.get("model"), "model", _MODEL_KEYS)
    if "id" not in model_t:
        raise ConfigError("[model] id is required")
    model_params = dict(model_t.get("params") or {})
    try:
        make_model(model_t["id"], model_params)
    except ValueError as e:
        raise ConfigError(f"[model] {e}")

    policies_raw = top.get("policies") or [{"kind": "passive", "id": "passive"}]
    if not isinstance(policies_raw, list):
        raise ConfigError("[[policies]] must be an array of tables")
    policies: list[PolicySpec] = []
    for i, raw in enumerate(policies_raw):
        p = _table(raw, f"policies[{i}]", _POLICY_KEYS)
        policies.append(_build(PolicySpec, f"policies[{i}]", **p))
    if len({p.id for p in policies}) != len(policies):
        raise ConfigError("Policy ids must be unique")

    dist_t = _table(top.get("disturbances"), "disturbances", _DISTURBANCE_KEYS)
    pushes_raw = dist_t.get("push") or [{"magnitude": 0.0}]
    pushes = tuple(
        _build(Disturbance, f"disturbances.push[{i}]", **_table(p, f"disturbances.push[{i}]", _PUSH_KEYS))
        for i, p in enumerate(pushes_raw)
    )
    probs = _floats(dist_t.get("probabilities", [1.0] if len(pushes) == 1 else None), "[disturbances] probabilities")
    profile = _build(DisturbanceProfile, "disturbances", disturbances=pushes, probabilities=probs)

    mesh_t = _table(top.get("mesh"), "mesh", _MESH_KEYS)
    for key in ("d_tr_sweep", "initial", "weights"):
        if key in mesh_t:
            mesh_t[key] = _floats(mesh_t[key], f"[mesh] {key}")
    mesh = _build(MeshSection, "mesh", **mesh_t)
    if not mesh.d_tr > 0 or any(not d > 0 for d in mesh.d_tr_sweep):
        raise ConfigError("[mesh] thresholds must be positive")
    if mesh.state_cap < 2:
        raise ConfigError(f"[mesh] state_cap must be >= 2, got {mesh.state_cap}")

    integrator = _build(SimulationConfig, "integrator", **_table(top.get("integrator"), "integrator", _INTEGRATOR_KEYS))

    analysis_t = _table(top.get("analysis"), "analysis", _ANALYSIS_KEYS)
    sweep_t = _table(analysis_t.pop("sweep", None), "analysis.sweep", _SWEEP_KEYS)
    if "probabilities" in analysis_t:
        analysis_t["probabilities"] = _floats(analysis_t["probabilities"], "[analysis] probabilities")
    if "groups" in sweep_t:
        try:
            sweep_t["groups"] = tuple(tuple(int(i) for i in g) for g in sweep_t["groups"])
        except (TypeError, ValueError):
            raise ConfigError("[analysis.sweep] groups must be a list of lists of disturbance indices")
    analysis = _build(AnalysisSection, "analysis", **analysis_t, **sweep_t)
    if not 0 <= analysis.controller < len(policies):
        raise ConfigError(f"[analysis] controller {analysis.controller} out of range for {len(policies)} policies")
    for g in analysis.groups:
        if not g or any(not 1 <= i < len(pushes) for i in g):
            raise ConfigError(f"[analysis.sweep] group {list(g)} must name pushes in [1, {len(pushes) - 1}]")

    project = _build(ProjectSection, "project", **_table(top.get("project"), "project", _PROJECT_KEYS))
    lump = _build(LumpSection, "lump", **_table(top.get("lump"), "lump", _LUMP_KEYS))
    if not 0 <= lump.disturbance < len(pushes):
        raise ConfigError(f"[lump] disturbance {lump.disturbance} out of range")

    validate = _build(ValidateSection, "validate", **_table(top.get("validate"), "validate", _VALIDATE_KEYS))
    for name in ("episodes", "max_cycles"):
        value = getattr(validate, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"[validate] {name} must be a positive integer, got {value!r}")

    config = RunConfig(
        model_id=str(model_t["id"]),
        model_params=model_params,
        policies=tuple(policies),
        profile=profile,
        run=run,
        mesh=mesh,
        integrator=integrator,
        analysis=analysis,
        project=project,
        lump=lump,
        validate=validate,
        base_dir=base_dir or Path.cwd(),
    )
    if config.analysis.probabilities is not None:
        config.analysis_profile()
    return config


def load_environment() -> dict[str, Any]:
    """Overrides from METAMESH_* variables (~/.config/metamesh/.env, then ./.env)."""
    config_env = CONFIG_DIR / ".env"
    if config_env.exists():
        load_dotenv(config_env)
    load_dotenv()  # cwd .env

    overrides: dict[str, Any] = {}
    output_dir = os.environ.get(ENV_OUTPUT_DIR)
    if output_dir:
        overrides["output_dir"] = output_dir
    threads = os.environ.get(ENV_THREADS)
    if threads:
        try:
            overrides["threads"] = int(threads)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer, got {threads!r}")
        if overrides["threads"] < 1:
            raise ConfigError(f"{ENV_THREADS} must be >= 1, got {threads}")
    return overrides


def load_config(path: Path, use_env: bool = True) -> RunConfig:
    """Read, validate and apply environment overrides to a TOML run config."""
    try:
        data = toml.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    except toml.TomlDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}")
    config = parse_config(data, base_dir=path.resolve().parent)
    if use_env:
        overrides = load_environment()
        if overrides:
            config = replace(config, run=replace(config.run, **overrides))
    return config
