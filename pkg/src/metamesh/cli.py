"""Click CLI for metamesh: mesh a walker's section states and measure its metastability."""

from __future__ import annotations

import functools
import json
import logging
import math
import time
from contextlib import ExitStack
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler

from .bundle import (
    Bundle,
    export_states_csv,
    export_table_csv,
    load_bundle,
    read_states_csv,
    save_bundle,
    write_csv,
    write_json,
)
from .config import RunConfig, load_config
from .dynamics import iterate_return_map, monte_carlo_mfpt
from .errors import EXIT_TRUNCATED, BundleError, ConfigError, MetameshError
from .figures import dims_figure, projection_figure, sweep_figure, trajectory_figure
from .formatters import format_output
from .geometry import estimate_dimension, pca_project, top_variance_axes
from .markov import (
    assemble_stochastic,
    dangerous_states,
    metastable_distribution,
    mixing_analysis,
    sensitivity_sweep,
    summarize,
    visit_weights,
)
from .meshing import build_mesh, check_mesh_invariants, lump_trajectory, mesh_growth_sweep
from .policy import DEFAULT_DEADLINE, PolicyPool
from .utils import atomic_write_text, dumps, parse_axes

logger = logging.getLogger("metamesh")

BUNDLE_DIR = "bundle"
UNIFORM_MARKER = 12.0
TOP_AXES = "top"


class State:
    def __init__(self, config_path: Path, out: Path | None, mode: str, verbose: bool, threads: int | None) -> None:
        self.config_path = config_path
        self.mode = mode
        self.verbose = verbose
        self._out = out
        self._threads = threads
        self._config: RunConfig | None = None

    @property
    def config(self) -> RunConfig:
        if self._config is None:
            config = load_config(self.config_path)
            if self._threads is not None:
                if self._threads < 1:
                    raise ConfigError(f"--threads must be >= 1, got {self._threads}")
                config = replace(config, run=replace(config.run, threads=self._threads))
            self._config = config
        return self._config

    @property
    def out(self) -> Path | None:
        """Output directory; None until the config has loaded (unless -o was given)."""
        if self._out is not None:
            return self._out
        if self._config is None:
            return None
        return self._config.resolve_path(self._config.run.output_dir)

    def output(self, data, title: str = "") -> None:
        format_output(data, self.mode, title, verbose=self.verbose)

    def write_resolved(self) -> Path:
        config = self.config
        out = self.out
        assert out is not None
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "resolved_config.json", {
            "config": config.resolved(),
            "config_digest": config.config_digest,
            "mesh_digest": config.mesh_digest,
            "disturbance_digest": config.disturbance_digest,
        })
        return out

    def fail(self, error: MetameshError) -> None:
        report = error.report()
        click.echo(json.dumps(report, sort_keys=True), err=True)
        out = self.out
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                atomic_write_text(out / "error.json", dumps(report))
            except OSError as e:
                logger.warning("could not write error report to %s: %s", out, e)
        raise SystemExit(error.exit_code)


pass_state = click.make_pass_decorator(State)


def reports_errors(func):
    """Turn library errors into a JSON report and the matching exit code."""

    @functools.wraps(func)
    def wrapper(state: State, *args, **kwargs):
        try:
            return func(state, *args, **kwargs)
        except MetameshError as e:
            state.fail(e)
        except ValueError as e:
            state.fail(ConfigError(str(e)))

    return wrapper


def _setup_logging(verbose: bool) -> None:
    handler = RichHandler(console=Console(stderr=True), show_time=False, show_path=False)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s",
                        handlers=[handler], force=True)


@click.group()
@click.option("--config", "-c", "config_path", required=True, type=click.Path(path_type=Path),
              help="Run config (TOML)")
@click.option("--out", "-o", default=None, type=click.Path(path_type=Path),
              help="Output directory (overrides [run] output_dir)")
@click.option("--threads", default=None, type=int, help="Worker threads for simulation")
@click.option("--json", "-j", "fmt", flag_value="json", help="JSON output")
@click.option("--plain", "-p", "fmt", flag_value="plain", help="TSV output for piping")
@click.option("--markdown", "-md", "fmt", flag_value="markdown", help="Markdown output")
@click.option("--verbose", "-v", is_flag=True, default=False, help="Debug logging and full tables")
@click.pass_context
def cli(ctx, config_path, out, threads, fmt, verbose):
    """metamesh: mesh a walker's Poincare section and measure its metastability."""
    _setup_logging(verbose)
    ctx.obj = State(config_path, out, fmt or "human", verbose=verbose, threads=threads)


# ============================================================
# shared helpers
# ============================================================

def _model_and_start(config: RunConfig):
    model = config.build_model()
    initial = config.mesh.initial
    start = model.default_section_state() if initial is None else np.asarray(initial, dtype=np.float64)
    return model, start


def _open_pools(config: RunConfig, stack: ExitStack) -> dict[str, PolicyPool]:
    pools: dict[str, PolicyPool] = {}
    for policy in config.policies:
        if policy.kind != "external":
            continue
        params = policy.parameters
        pool = PolicyPool(
            str(params["endpoint"]),
            size=config.run.threads,
            deadline=float(params.get("deadline", DEFAULT_DEADLINE)),
            torque_limit=config.integrator.torque_limit,
        )
        pools[policy.id] = stack.enter_context(pool)
    return pools


def _load_checked_bundle(state: State) -> Bundle:
    """The build's bundle, refusing one meshed under a different set of pushes."""
    config = state.config
    bundle = load_bundle(state.out / BUNDLE_DIR)
    if bundle.disturbance_digest != config.disturbance_digest:
        raise BundleError(
            f"Bundle disturbance digest {bundle.disturbance_digest[:12]} does not match the config's pushes "
            f"({config.disturbance_digest[:12]}); rebuild the mesh"
        )
    if bundle.header.get("mesh_digest") not in (None, config.mesh_digest):
        logger.warning("bundle was built from a different mesh configuration")
    return bundle


# ============================================================
# build
# ============================================================

@cli.command("build")
@pass_state
@reports_errors
def build_cmd(state):
    """Explore the reachable section states and save the mesh bundle."""
    config = state.config
    out = state.write_resolved()
    model, start = _model_and_start(config)
    started = time.perf_counter()
    with ExitStack() as stack:
        pools = _open_pools(config, stack)
        build = build_mesh(
            start,
            config.policies,
            config.profile,
            config.mesh.d_tr,
            model,
            config.integrator,
            state_cap=config.mesh.state_cap,
            threads=config.run.threads,
            weights=config.mesh.weights,
            pools=pools,
        )
    elapsed = time.perf_counter() - started
    header = save_bundle(build, out / BUNDLE_DIR, extra={
        "config_digest": config.config_digest,
        "mesh_digest": config.mesh_digest,
    })
    export_states_csv(build.mesh, out / "states.csv", config.config_digest)
    export_table_csv(build.table, out / "table.csv", config.config_digest)
    check = check_mesh_invariants(build)
    summary = build.summary()
    summary.update({
        "config_digest": config.config_digest,
        "mesh_digest": config.mesh_digest,
        "disturbance_digest": header["disturbance_digest"],
        "min_separation": check.min_separation,
        "complete": check.complete,
        "unreachable": len(check.unreachable),
    })
    write_json(out / "build_summary.json", summary)
    logger.info("built %d states in %.2fs", build.mesh.n_states, elapsed)
    if not check.ok:
        logger.warning("mesh invariant check failed: separation_ok=%s complete=%s unreachable=%d",
                       check.separation_ok, check.complete, len(check.unreachable))
    state.output({**summary, "wall_time_s": round(elapsed, 3)}, "Mesh build")
    if build.truncated:
        logger.warning("mesh truncated at %d states; outputs are a lower bound", config.mesh.state_cap)
        raise SystemExit(EXIT_TRUNCATED)


# ============================================================
# analyze
# ============================================================

@cli.command("analyze")
@pass_state
@reports_errors
def analyze_cmd(state):
    """Spectral summary, MFPT and dangerous states for the analysis profile."""
    config = state.config
    out = state.write_resolved()
    bundle = _load_checked_bundle(state)
    profile = config.analysis_profile()
    if len(profile) != bundle.table.n_disturbances:
        raise ConfigError(
            f"Profile has {len(profile)} disturbances, bundle has {bundle.table.n_disturbances}"
        )
    T = assemble_stochastic(bundle.table, config.analysis.controller, profile)
    summary = summarize(T, config.analysis.gap_ratio, config.analysis.danger_threshold)

    data = summary.as_dict(full=config.analysis.full_vectors)
    data["dangerous"] = list(summary.dangerous)
    data["controller"] = config.analysis.controller
    data["profile_digest"] = profile.digest()
    data["config_digest"] = config.config_digest
    write_json(out / "analysis.json", data)

    fail = T.failure_probabilities()
    write_csv(
        out / "states_mfpt.csv",
        ["state", "m", "phi", "failure_prob", "dangerous"],
        ((i, summary.m[i], summary.phi[i], fail[i], i in summary.dangerous) for i in range(1, T.n_states)),
        config.config_digest,
    )
    write_csv(out / "matrix.csv", ["row", "col", "prob"], T.coordinates(), config.config_digest)
    logger.info("lambda2=%.12g M=%s", summary.lambda2, data["M_exact"])
    state.output(summary.as_dict(), "Metastability")


# ============================================================
# sweep
# ============================================================

@cli.command("sweep")
@pass_state
@reports_errors
def sweep_cmd(state):
    """MFPT with each push in turn as the disturbance of interest."""
    config = state.config
    out = state.write_resolved()
    bundle = _load_checked_bundle(state)
    analysis = config.analysis
    entries = sensitivity_sweep(bundle.table, analysis.controller, config.profile, analysis.p_null, analysis.p_interest)
    rows = [(e.index, e.magnitude, e.start_time, e.M) for e in entries]
    write_csv(out / "sweep.csv", ["index", "magnitude", "start_time", "M"], rows, config.config_digest)
    sweep_figure(entries, out / "sweep.svg", config.config_digest)

    result: dict = {
        "entries": len(entries),
        "failed": sum(1 for e in entries if e.error),
        "p_null": analysis.p_null,
        "p_interest": analysis.p_interest,
        "rows": [{"index": e.index, "magnitude": e.magnitude, "start_time": e.start_time, "M": e.M} for e in entries],
    }
    if analysis.groups:
        mixing = mixing_analysis(bundle.table, analysis.controller, config.profile, analysis.groups, analysis.p_null)
        write_csv(out / "mixing.csv", ["label", "indices", "M"],
                  ((m.label, " ".join(str(i) for i in m.indices), m.M) for m in mixing), config.config_digest)
        result["mixing"] = {m.label: m.M for m in mixing}
    write_json(out / "sweep.json", {
        "config_digest": config.config_digest,
        "entries": [{"index": e.index, "magnitude": e.magnitude, "start_time": e.start_time, "M": e.M,
                     "error": e.error} for e in entries],
        "mixing": result.get("mixing", {}),
    })
    state.output(result, "Disturbance sweep")


# ============================================================
# dims
# ============================================================

@cli.command("dims")
@pass_state
@reports_errors
def dims_cmd(state):
    """Mesh size against d_tr and the fitted manifold dimension."""
    config = state.config
    if len(config.mesh.d_tr_sweep) < 2:
        raise ConfigError("[mesh] d_tr_sweep needs at least 2 thresholds for 'dims'")
    out = state.write_resolved()
    model, start = _model_and_start(config)
    with ExitStack() as stack:
        pools = _open_pools(config, stack)
        samples = mesh_growth_sweep(
            start,
            config.policies,
            config.profile,
            config.mesh.d_tr_sweep,
            model,
            config.integrator,
            state_cap=config.mesh.state_cap,
            threads=config.run.threads,
            weights=config.mesh.weights,
            pools=pools,
        )
    fit = estimate_dimension(samples)
    write_csv(out / "dims.csv", ["d_tr", "N"], samples, config.config_digest)
    write_json(out / "dims.json", {
        "samples": [list(s) for s in fit.samples],
        "slope": fit.slope,
        "n_hat": fit.n_hat,
        "r_squared": fit.r_squared,
        "config_digest": config.config_digest,
    })
    dims_figure(fit, out / "dims.svg", config.config_digest)
    state.output({
        "n_hat": fit.n_hat,
        "slope": fit.slope,
        "r_squared": fit.r_squared,
        "rows": [{"d_tr": d, "N": n} for d, n in fit.samples],
    }, "Manifold dimension")


# ============================================================
# project
# ============================================================

def _mesh_view(state: State) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """States, marker sizes and dangerous mask for the built mesh."""
    config = state.config
    bundle = _load_checked_bundle(state)
    T = assemble_stochastic(bundle.table, config.analysis.controller, config.analysis_profile())
    states = bundle.mesh.states[1:]
    try:
        sizes = visit_weights(metastable_distribution(T)[1:])
    except MetameshError as e:
        logger.warning("no metastable distribution (%s); using uniform markers", e)
        sizes = np.full(states.shape[0], UNIFORM_MARKER)
    dangerous = np.zeros(states.shape[0], dtype=bool)
    dangerous[np.array(dangerous_states(T, config.analysis.danger_threshold), dtype=np.int64) - 1] = True
    return states, sizes, dangerous


def _sequence_view(config: RunConfig, path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """States and sizes from a state-sequence file, lumped when [project] threshold is set."""
    samples = read_states_csv(path)
    if config.project.threshold is None:
        return samples, np.full(samples.shape[0], UNIFORM_MARKER), np.zeros(samples.shape[0], dtype=bool)
    lumped = lump_trajectory(samples, config.project.threshold, config.mesh.weights)
    counts = lumped.counts[1:].astype(np.float64)
    return lumped.mesh.states[1:], visit_weights(counts), np.zeros(counts.size, dtype=bool)


@cli.command("project")
@pass_state
@reports_errors
def project_cmd(state):
    """PCA or raw-axes projection of the mesh (or a state sequence) with dangerous states marked."""
    config = state.config
    out = state.write_resolved()
    project = config.project
    if project.input:
        states, sizes, dangerous = _sequence_view(config, config.resolve_path(project.input))
        source = "sequence"
    else:
        states, sizes, dangerous = _mesh_view(state)
        source = "mesh"

    digest = config.config_digest
    meta: dict = {"source": source, "config_digest": digest, "n_points": int(states.shape[0])}
    if project.axes:
        if project.axes.strip() == TOP_AXES:
            axes = top_variance_axes(states, min(project.k, states.shape[1]))
        else:
            axes = parse_axes(project.axes, states.shape[1])
        points = states[:, axes]
        labels = [f"x{a}" for a in axes]
        meta["axes"] = axes
    else:
        pca = pca_project(states, project.k)
        points = pca.projected
        labels = [f"pc{j + 1}" for j in range(pca.k)]
        meta.update({"k": pca.k, "variance_explained": pca.variance_explained, "components": pca.components,
                     "mean": pca.mean, "scale": pca.scale})
        write_csv(out / "variance.csv", ["component", "variance_share"],
                  ((j + 1, v) for j, v in enumerate(pca.variance_explained)), digest)
    meta["dangerous"] = [int(i) + 1 for i in np.flatnonzero(dangerous)]

    write_csv(out / "projection.csv", ["index", *labels, "size", "dangerous"],
              ((i + 1, *points[i].tolist(), sizes[i], bool(dangerous[i])) for i in range(points.shape[0])), digest)
    write_json(out / "projection.json", meta)
    if points.shape[1] in (2, 3):
        projection_figure(points, sizes, dangerous, labels, out / "projection.svg", digest)
    else:
        logger.info("no figure for a %d-d projection", points.shape[1])
    state.output({
        "source": source,
        "points": int(points.shape[0]),
        "coordinates": ", ".join(labels),
        "dangerous": int(dangerous.sum()),
    }, "Projection")


# ============================================================
# lump
# ============================================================

@cli.command("lump")
@pass_state
@reports_errors
def lump_cmd(state):
    """Lump a state sequence (from [lump] input, or simulated cycles) without exploring."""
    config = state.config
    out = state.write_resolved()
    lump = config.lump
    d_tr = lump.d_tr if lump.d_tr is not None else config.mesh.d_tr
    cause = None
    if lump.input:
        samples = read_states_csv(config.resolve_path(lump.input))
        source = "file"
    else:
        model, start = _model_and_start(config)
        push = config.profile.disturbances[lump.disturbance]
        with ExitStack() as stack:
            pools = _open_pools(config, stack)
            run = iterate_return_map(start, config.policies[config.analysis.controller], push, model,
                                     config.integrator, lump.cycles, pools=pools)
        samples, cause = run.states, run.cause
        source = "simulated"
        if cause is not None:
            logger.warning("simulated run failed (%s) after %d cycles", cause, samples.shape[0] - 1)

    lumped = lump_trajectory(samples, d_tr, config.mesh.weights)
    digest = config.config_digest
    export_states_csv(lumped.mesh, out / "lump_states.csv", digest)
    write_csv(out / "lump_assignment.csv", ["sample", "state"], enumerate(lumped.assignment.tolist()), digest)
    write_csv(out / "lump_transitions.csv", ["from", "to", "count"], lumped.transitions.tolist(), digest)
    states = lumped.mesh.states[1:]
    if states.shape[1] >= 2:
        axes = top_variance_axes(states, 2)
        trajectory_figure(states[:, axes], visit_weights(lumped.counts[1:].astype(np.float64)),
                          lumped.transitions, [f"x{a}" for a in axes], out / "lump.svg", digest)
    else:
        logger.info("no trajectory figure for 1-d states")
    result = {
        "source": source,
        "samples": int(samples.shape[0]),
        "n_states": lumped.mesh.n_states,
        "d_tr": d_tr,
        "failure": cause,
    }
    write_json(out / "lump.json", {**result, "counts": lumped.counts, "config_digest": digest})
    state.output(result, "Trajectory lumping")


# ============================================================
# validate
# ============================================================

@cli.command("validate")
@pass_state
@reports_errors
def validate_cmd(state):
    """Compare the mesh MFPT with direct Monte Carlo over the full dynamics."""
    config = state.config
    out = state.write_resolved()
    bundle = _load_checked_bundle(state)
    profile = config.analysis_profile()
    T = assemble_stochastic(bundle.table, config.analysis.controller, profile)
    summary = summarize(T, config.analysis.gap_ratio, config.analysis.danger_threshold)
    validate = config.validate
    model = config.build_model()
    with ExitStack() as stack:
        pools = _open_pools(config, stack)
        mc = monte_carlo_mfpt(
            bundle.mesh.states[1:],
            summary.phi[1:],
            config.policies[config.analysis.controller],
            profile,
            model,
            config.integrator,
            episodes=validate.episodes,
            seed=config.run.seed,
            max_cycles=validate.max_cycles,
            pools=pools,
        )
    gap = abs(summary.M_exact - mc.mean) / summary.M_exact if math.isfinite(summary.M_exact) else math.inf
    result = {
        "M_exact": summary.M_exact,
        "mc_mean": mc.mean,
        "mc_stderr": mc.stderr,
        "relative_gap": gap,
        "episodes": mc.episodes,
        "censored": mc.censored,
        "max_cycles": validate.max_cycles,
    }
    write_json(out / "validation.json", {
        **result,
        "causes": mc.causes,
        "seed": config.run.seed,
        "config_digest": config.config_digest,
    })
    state.output(result, "Monte Carlo validation")


def main():
    cli()


if __name__ == "__main__":
    main()
