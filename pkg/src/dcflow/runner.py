"""Experiment runner: executes a config and writes metrics, samples, snapshots and a manifest."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import torch
from scipy.integrate import trapezoid

from . import metrics as M
from .config import ExperimentConfig, derive_seed, resolve_output_dir
from .flow import BaseDistribution, FlowState, save_state, seeded_rng
from .icnn import ConvexityError
from .jko import DivergenceError, RegularizerSpec
from .kernels import build_kernel
from .potentials import build_potential
from .schemes import BatchCache, advance, default_sampler, ula_run

log = logging.getLogger(__name__)

METRICS_CSV = "metrics.csv"
METRICS_JSONL = "metrics.jsonl"
MANIFEST = "manifest.json"
SNAPSHOT = "state_final.npz"
SAMPLES = "samples.csv"
ULA_SAMPLES = "ula_samples.csv"


def library_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def single_threaded():
    """Pin torch to one thread; required for bit-reproducible runs."""
    torch.set_num_threads(1)


def regularizer_from(spec: dict) -> RegularizerSpec:
    kernel = build_kernel(spec["kernel"]) if spec.get("kernel") is not None else None
    return RegularizerSpec(spec["kind"], kernel)


def write_samples(points: np.ndarray, path, dim: Optional[int] = None):
    dim = points.shape[1] if len(points) else dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dim)])
        for row in points:
            w.writerow([repr(float(v)) for v in row])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "iteration" else (float(v) if v != "" else None)) for k, v in r.items()})
    return out


@dataclass
class RunResult:
    """Outcome of one run; ``state`` is the last completed iterate."""

    config: ExperimentConfig
    output_dir: Path
    status: str
    records: list = field(default_factory=list)
    state: Optional[FlowState] = None
    samples: Optional[np.ndarray] = None
    error: Optional[str] = None
    inner_traces: list = field(default_factory=list, repr=False)
    ula: Optional[dict] = None


class _Writer:
    def __init__(self, outdir: Path):
        self.csv_fh = open(outdir / METRICS_CSV, "w", newline="")
        self.csv = csv.writer(self.csv_fh)
        self.csv.writerow(M.CSV_COLUMNS)
        self.jsonl = open(outdir / METRICS_JSONL, "w")

    def record(self, rec: M.MetricsRecord, extra: dict):
        self.csv.writerow(rec.csv_row())
        self.jsonl.write(json.dumps({"type": "iteration", **rec.to_dict(), **extra}) + "\n")
        self.csv_fh.flush()
        self.jsonl.flush()

    def event(self, payload: dict):
        self.jsonl.write(json.dumps(payload) + "\n")
        self.jsonl.flush()

    def close(self):
        self.csv_fh.close()
        self.jsonl.close()


def _manifest(cfg: ExperimentConfig, potential, outdir: Path, status: str, extra: dict) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "resolved_target": potential.spec,
        "library": {"name": "dcflow", "distribution": "artifact", "version": library_version()},
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
            "torch_threads": torch.get_num_threads(),
        },
        "output_dir": str(outdir),
        "status": status,
        **extra,
    }


def _write_manifest(outdir: Path, payload: dict):
    (outdir / MANIFEST).write_text(json.dumps(payload, indent=2, sort_keys=True))


def run_experiment(cfg: ExperimentConfig, output_dir=None, *, progress: bool = False) -> RunResult:
    """Run a config to completion (or divergence) and write all outputs.

    Divergence is reported through ``status == "diverged"``; outputs cover
    the iterations completed before it.
    """
    single_threaded()
    outdir = Path(output_dir) if output_dir is not None else resolve_output_dir(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    potential = build_potential(cfg.target, cfg.seed)
    base = BaseDistribution.from_dict(cfg.base, potential.dim)
    if base.dim != potential.dim:
        raise ValueError(f"base dimension {base.dim} differs from target dimension {potential.dim}")
    reg = regularizer_from(cfg.regularizer)
    _write_manifest(outdir, _manifest(cfg, potential, outdir, "running", {}))
    writer = _Writer(outdir)
    t0 = time.perf_counter()
    try:
        if cfg.scheme == "ula":
            result = _run_ula_scheme(cfg, potential, base, outdir, writer, t0)
        else:
            result = _run_map_scheme(cfg, potential, base, reg, outdir, writer, t0, progress)
        if cfg.ula.enabled and cfg.scheme != "ula":
            result.ula = _ula_baseline(cfg, potential, base, outdir)
            writer.event({"type": "ula_baseline", **result.ula})
    finally:
        writer.close()
    extra = {"n_records": len(result.records), "wallclock_s": time.perf_counter() - t0}
    if result.error:
        extra["error"] = result.error
    if result.ula:
        extra["ula_baseline"] = result.ula
    _write_manifest(outdir, _manifest(cfg, potential, outdir, result.status, extra))
    return result


def _run_map_scheme(cfg, potential, base, reg, outdir, writer, t0, progress) -> RunResult:
    jko_seed = derive_seed(cfg.seed, "jko")
    eval_seed = derive_seed(cfg.seed, "eval")
    state = FlowState(base, cfg.eta, cfg.scheme, potential)
    entropy_case = reg.kind == "negative_entropy"
    want = set(cfg.eval.metrics)

    z = base.sample(cfg.eval.n_samples, seeded_rng(eval_seed))
    x, logp = state.push(z, with_log_density=entropy_case)

    def energies(points, logp_):
        fe = M.free_energy_from_cloud(points, logp_, potential, reg)
        kl = M.kl_from_cloud(points, logp_, potential) if (entropy_case and "kl" in want) else None
        return fe, kl

    fe, kl = energies(x, logp)
    writer.event(
        {
            "type": "initial",
            "iteration": 0,
            "free_energy": fe.value,
            "free_energy_se": fe.stderr,
            "kl": None if kl is None else kl.value,
            "kl_se": None if kl is None else kl.stderr,
        }
    )
    result = RunResult(cfg, outdir, "completed", state=state, samples=x)
    cache = None
    for k in range(1, cfg.outer_iters + 1):
        jcfg = cfg.jko.for_step(k, cfg.eta, jko_seed)
        if cache is None and jcfg.cache_batches:
            cache = BatchCache(state, default_sampler(state, jcfg), jcfg.inner_iters)
        try:
            step = advance(state, jcfg, reg=reg, cache=cache)
            new_state = step.state
            x_new, logp_new = new_state.step_cloud(new_state.maps[-1], x, logp)
            if not np.all(np.isfinite(x_new)):
                raise DivergenceError(f"non-finite evaluation samples at outer iteration {k}")
        except (DivergenceError, ConvexityError, np.linalg.LinAlgError, FloatingPointError) as exc:
            result.status = "diverged"
            result.error = f"outer iteration {k}: {exc}"
            writer.event({"type": "divergence", "iteration": k, "message": str(exc)})
            log.warning("run diverged at outer iteration %d: %s", k, exc)
            break
        fe, kl = energies(x_new, logp_new)
        gm = w2 = None
        if "grad_mapping" in want or "w2_to_prev" in want:
            coupled, exact, _ = M.gradient_mapping_pair(x, x_new, cfg.eta, cfg.eval.exact_subsample)
            gm = coupled if "grad_mapping" in want else None
            w2 = math.sqrt(exact) * cfg.eta if "w2_to_prev" in want else None
        rec = M.MetricsRecord(
            iteration=k,
            free_energy=fe.value,
            free_energy_se=fe.stderr,
            kl=None if kl is None else kl.value,
            kl_se=None if kl is None else kl.stderr,
            grad_mapping_sq=gm,
            w2_to_prev=w2,
            wallclock_s=time.perf_counter() - t0,
        )
        trace = step.jko.trace
        writer.record(
            rec,
            {
                "inner_first": float(trace[0]) if len(trace) else None,
                "inner_last": float(trace[-1]) if len(trace) else None,
                "inner_mean": float(trace.mean()) if len(trace) else None,
                "learning_rate": jcfg.rate(1) if jcfg.inner_iters else None,
            },
        )
        result.records.append(rec)
        result.inner_traces.append(trace)
        state, x, logp = new_state, x_new, logp_new
        result.state, result.samples = state, x
        if progress:
            log.info("iter %d  F=%.5f  KL=%s  t=%.1fs", k, fe.value, None if kl is None else f"{kl.value:.5f}", rec.wallclock_s)
    save_state(state, outdir / SNAPSHOT, extra={"seed": cfg.seed, "eval_seed": eval_seed})
    write_samples(x, outdir / SAMPLES)
    return result


def _ula_summary(cloud: np.ndarray, potential) -> dict:
    sub = cloud[: min(len(cloud), 4096)]
    out = {"n_chains": len(cloud), "mean": cloud.mean(0).tolist(), "variance": cloud.var(0).tolist()}
    if potential.log_normalizer is not None:
        kl = M.kde_kl_estimate(sub, potential)
        out.update(kl_kde=kl.value, kl_kde_se=kl.stderr)
    return out


def _ula_baseline(cfg: ExperimentConfig, potential, base, outdir: Path) -> dict:
    cloud = ula_run(potential, cfg.ula.eta, cfg.ula.n_chains, cfg.ula.n_iters, base, derive_seed(cfg.seed, "ula")).points
    write_samples(cloud, outdir / ULA_SAMPLES)
    return {"eta": cfg.ula.eta, "n_iters": cfg.ula.n_iters, **_ula_summary(cloud, potential)}


def _run_ula_scheme(cfg, potential, base, outdir, writer, t0) -> RunResult:
    eta = cfg.ula.eta if "eta" in cfg.raw.get("ula", {}) else cfg.eta
    n_iters = cfg.ula.n_iters if "n_iters" in cfg.raw.get("ula", {}) else cfg.outer_iters
    try:
        cloud = ula_run(potential, eta, cfg.ula.n_chains, n_iters, base, derive_seed(cfg.seed, "ula")).points
    except FloatingPointError as exc:
        writer.event({"type": "divergence", "message": str(exc)})
        return RunResult(cfg, outdir, "diverged", error=str(exc))
    summary = _ula_summary(cloud, potential)
    sub = cloud[: min(len(cloud), 4096)]
    f_vals = potential.value(sub)
    logq = M.kde_log_density(sub, sub)
    fe = M.Estimate(*M._mean_se(f_vals + logq))
    rec = M.MetricsRecord(
        iteration=n_iters,
        free_energy=fe.value,
        free_energy_se=fe.stderr,
        kl=summary.get("kl_kde"),
        kl_se=summary.get("kl_kde_se"),
        wallclock_s=time.perf_counter() - t0,
    )
    writer.record(rec, {"estimator": "kde"})
    write_samples(cloud, outdir / SAMPLES)
    res = RunResult(cfg, outdir, "completed", records=[rec], samples=cloud)
    res.ula = summary
    return res


# ---------------------------------------------------------------------------
# Comparison across runs
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    run_dir: Path
    scheme: str
    seed: int
    final_kl: Optional[float]
    kl_auc: Optional[float]
    iterations: np.ndarray
    kl: np.ndarray


def load_run(run_dir) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / MANIFEST).read_text())
    return manifest, read_metrics_csv(run_dir / METRICS_CSV)


def summarize_run(run_dir) -> tuple[dict, RunSummary]:
    manifest, rows = load_run(run_dir)
    cfg = manifest["config"]
    its = np.array([r["iteration"] for r in rows], dtype=float)
    kl = np.array([np.nan if r["kl"] is None else r["kl"] for r in rows])
    have = np.isfinite(kl)
    final = float(kl[have][-1]) if have.any() else None
    auc = float(trapezoid(kl[have], its[have])) if have.sum() > 1 else final
    return manifest, RunSummary(Path(run_dir), cfg["scheme"], int(cfg["seed"]), final, auc, its, kl)


def _comparable_key(cfg: dict) -> tuple:
    return (json.dumps(cfg["target"], sort_keys=True), json.dumps(cfg.get("eval", {}), sort_keys=True))


def compare_runs(run_dirs, out_dir=None) -> list[dict]:
    """One summary row per scheme (mean final KL and KL-curve AUC), plus paired ratios.

    Runs must share the target spec and evaluation settings.  When ``out_dir``
    is given, writes ``comparison.csv`` (per-iteration mean KL per scheme) and
    ``summary.csv``.
    """
    if not run_dirs:
        raise ValueError("no runs to compare")
    loaded = [summarize_run(d) for d in run_dirs]
    key0 = _comparable_key(loaded[0][0]["config"])
    for manifest, summ in loaded[1:]:
        key = _comparable_key(manifest["config"])
        if key != key0:
            raise ValueError(
                f"incompatible runs: {loaded[0][1].run_dir} has target/eval {key0[0]} {key0[1]}, "
                f"{summ.run_dir} has {key[0]} {key[1]}"
            )
    by_scheme: dict[str, list[RunSummary]] = {}
    for _, s in loaded:
        by_scheme.setdefault(s.scheme, []).append(s)
    schemes = sorted(by_scheme)
    ref = schemes[0]
    ref_by_seed = {s.seed: s for s in by_scheme[ref]}
    rows = []
    for scheme in schemes:
        runs = by_scheme[scheme]
        finals = np.array([r.final_kl for r in runs if r.final_kl is not None], float)
        aucs = np.array([r.kl_auc for r in runs if r.kl_auc is not None], float)
        ratios = [
            r.final_kl / ref_by_seed[r.seed].final_kl
            for r in runs
            if r.seed in ref_by_seed and r.final_kl is not None and ref_by_seed[r.seed].final_kl
        ]
        rows.append(
            {
                "scheme": scheme,
                "n_runs": len(runs),
                "mean_final_kl": float(finals.mean()) if finals.size else None,
                "se_final_kl": float(finals.std(ddof=1) / math.sqrt(finals.size)) if finals.size > 1 else None,
                "mean_kl_auc": float(aucs.mean()) if aucs.size else None,
                f"final_kl_ratio_vs_{ref}": float(np.mean(ratios)) if ratios else None,
            }
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        iters = sorted({int(i) for _, s in loaded for i in s.iterations})
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"mean_kl_{s}" for s in schemes])
            for it in iters:
                row = [it]
                for s in schemes:
                    vals = [r.kl[r.iterations == it][0] for r in by_scheme[s] if np.any(r.iterations == it)]
                    vals = [v for v in vals if np.isfinite(v)]
                    row.append(repr(float(np.mean(vals))) if vals else "")
                w.writerow(row)
    return rows
