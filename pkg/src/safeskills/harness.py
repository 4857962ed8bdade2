"""Experiment orchestration: training, library assembly, evaluation, traces, comparison.

Output layout under the output root::

    skills/        <skill>_best.ckpt, <skill>_<episode>.ckpt, <skill>_curve.csv,
                   <skill>_initial_risk.csv
    manifests/     one library manifest per condition
    <condition>/   metrics.csv, episodes.csv, trace_*.csv, config.snapshot
    compare.csv, checks.csv
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from scipy.spatial import ConvexHull, QhullError

from . import sim
from .arbitration import EpisodeAborted, EpisodeMetrics, PriorityTable, run_episode
from .config import ConfigError, ExperimentConfig
from .nn import load_checkpoint
from .risk import RiskMonitor
from .skills import (InitialProcedureError, Policy, SkillLibrary, file_sha256, initial_procedure,
                     load_manifest, make_skill, register_skill, save_manifest, train_skill)

log = logging.getLogger(__name__)

OUTPUT_ENV = "SAFESKILLS_OUTPUT"
EVAL_STREAM = 7_001
RECOVERY_STREAM = 7_002
TRACE_STREAM = 7_003
RECOVERY_STEPS = 150
MAX_PROCEDURE_ATTEMPTS = 20

EPISODE_HEADER = ["episode", "seed", "stir_reward", "spill_count", "slide_d_mean",
                  "overturn_theta_mean", "spilled_particles", "halted"]
METRICS_HEADER = ["condition", "setup", "episodes", "steps",
                  "stir_reward_mean", "stir_reward_std", "spill_mean", "spill_std",
                  "slide_mean", "slide_std", "overturn_mean", "overturn_std"]
NA = "N/A"

# Orderings expected between conditions: (metric, better-or-larger, smaller).
EXPECTED = (
    ("stir_reward_mean", ">", "pi_b-F", "pi_b-U"),
    ("stir_reward_mean", ">", "pi_b-U", "L4-U"),
    ("spill_mean", "<", "L4-U", "pi_b-U"),
    ("slide_mean", "<", "L4-U", "pi_b-U"),
)


class MissingArtifactError(FileNotFoundError):
    pass


# -- files ---------------------------------------------------------------------

def output_root(cfg: ExperimentConfig, root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence],
              config_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def csv_config_hash(path: str | Path) -> str | None:
    with open(path) as fh:
        first = fh.readline().strip()
    return first.split("=", 1)[1] if first.startswith("# config_hash=") else None


def episode_seed(master: int, stream: int, index: int) -> int:
    """World seed for evaluation episode ``index``: a fixed offset stream off the master seed."""
    return int(np.random.SeedSequence([master, stream, index]).generate_state(1)[0])


# -- training --------------------------------------------------------------------

def skills_dir(root: Path) -> Path:
    return root / "skills"


def cmd_train(skill_name: str, cfg: ExperimentConfig, root: str | Path | None = None) -> dict:
    """Train one skill; write its best checkpoint, periodic checkpoints and curve."""
    from .ddpg import write_curve

    root = output_root(cfg, root)
    out = skills_dir(root)
    out.mkdir(parents=True, exist_ok=True)
    skill = make_skill(skill_name, cfg.skills.get(skill_name))
    monitor = RiskMonitor.from_specs(cfg.risks)
    if not skill.kind.is_base and skill.kind.risk not in monitor.ids:
        raise ConfigError(f"skill {skill_name} prevents risk {skill.kind.risk!r}, "
                          f"which is not configured")
    spec, result, env = train_skill(skill, cfg.sim, cfg.train, monitor, out_dir=out,
                                    eval_steps=cfg.train.steps_per_episode)
    h = cfg.config_hash()
    curve = out / f"{skill_name}_curve.csv"
    write_curve(result.curve, curve.with_name(curve.name + ".tmp"), comment=f"config_hash={h}")
    os.replace(curve.with_name(curve.name + ".tmp"), curve)
    ids = monitor.ids
    write_csv(out / f"{skill_name}_initial_risk.csv", ["episode"] + [f"rho_{r}" for r in ids],
              ([i] + [vec[r] for r in ids] for i, vec in enumerate(env.initial_vectors)), h)
    atomic_write(out / f"{skill_name}.snapshot", _snapshot(cfg))
    return {"skill": skill_name, "best_episode": result.best_episode,
            "best_eval_return": result.best_eval_return, "skipped": env.skipped,
            "checkpoint": str(out / f"{skill_name}_best.ckpt")}


def _snapshot(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), sort_keys=True)


# -- libraries -------------------------------------------------------------------

def _checkpoint(root: Path, skill: str) -> Path:
    path = skills_dir(root) / f"{skill}_best.ckpt"
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint {path} (train skill {skill!r} first)")
    return path


def _load_skill(cfg: ExperimentConfig, root: Path, name: str):
    path = _checkpoint(root, name)
    spec = make_skill(name, cfg.skills.get(name))
    actor = load_checkpoint(path).net
    policy = Policy(actor, spec.obs_scale(cfg.sim), cfg.sim.max_action_norm)
    return spec.with_policy(policy, os.path.relpath(path, root / "manifests"))


def manifest_path(root: Path, condition: str) -> Path:
    return root / "manifests" / f"{condition}.yaml"


def build_manifest(condition: str, cfg: ExperimentConfig, root: str | Path | None = None,
                   base_manifest: str | Path | None = None) -> Path:
    """Write the library manifest of ``condition``.

    With ``base_manifest`` the existing library is loaded as is and only the
    skills it lacks are registered on top of it.
    """
    root = output_root(cfg, root)
    spec = _condition(cfg, condition)
    if base_manifest is not None:
        base_manifest = Path(base_manifest)
        if not base_manifest.exists():
            raise MissingArtifactError(f"missing manifest {base_manifest}")
        library = load_manifest(base_manifest, cfg.sim)
        library = SkillLibrary([s.with_policy(s.policy, _rebase(s.checkpoint, base_manifest, root))
                                for s in library])
    else:
        library = SkillLibrary()
    for name in spec.skills:
        if name not in library.names:
            library = register_skill(library, _load_skill(cfg, root, name))
    path = manifest_path(root, condition)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(library, path)
    return path


def _rebase(checkpoint: str | None, manifest: Path, root: Path) -> str | None:
    if checkpoint is None:
        return None
    full = Path(checkpoint) if Path(checkpoint).is_absolute() else manifest.parent / checkpoint
    return os.path.relpath(full.resolve(), (root / "manifests").resolve())


def extend_library(base_condition: str, condition: str, cfg: ExperimentConfig,
                   root: str | Path | None = None) -> dict:
    """Grow the library of ``base_condition`` into that of ``condition`` without retraining.

    Returns the checkpoint checksums of the shared skills before and after.
    """
    root = output_root(cfg, root)
    base = manifest_path(root, base_condition)
    if not base.exists():
        build_manifest(base_condition, cfg, root)
    before = _checksums(base, cfg)
    path = build_manifest(condition, cfg, root, base_manifest=base)
    after = _checksums(path, cfg)
    shared = {k: (before[k], after[k]) for k in before}
    return {"manifest": str(path), "shared": shared,
            "unchanged": all(a == b for a, b in shared.values())}


def _checksums(manifest: Path, cfg: ExperimentConfig) -> dict[str, str]:
    out = {}
    for s in load_manifest(manifest, cfg.sim):
        if s.checkpoint is not None:
            full = manifest.parent / s.checkpoint
            out[s.name] = file_sha256(full)
    return out


def load_library(condition: str, cfg: ExperimentConfig, root: Path) -> SkillLibrary:
    path = manifest_path(root, condition)
    if not path.exists():
        build_manifest(condition, cfg, root)
    return load_manifest(path, cfg.sim)


def _condition(cfg: ExperimentConfig, condition: str):
    if condition not in cfg.conditions:
        raise ConfigError(f"unknown condition {condition!r}; choose from {sorted(cfg.conditions)}")
    return cfg.conditions[condition]


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    condition: str
    episodes: list[EpisodeMetrics]
    seeds: list[int]
    summary: dict


def _summarise(condition: str, setup: str, episodes: Sequence[EpisodeMetrics], steps: int) -> dict:
    def ms(values):
        arr = np.asarray(values, dtype=float)
        return float(arr.mean()), float(arr.std())

    stir = ms([m.stir_reward for m in episodes])
    spill = ms([m.spill_count for m in episodes])
    row = {"condition": condition, "setup": setup, "episodes": len(episodes), "steps": steps,
           "stir_reward_mean": stir[0], "stir_reward_std": stir[1],
           "spill_mean": spill[0], "spill_std": spill[1]}
    if setup == "fixed":
        row.update(slide_mean=NA, slide_std=NA, overturn_mean=NA, overturn_std=NA)
    else:
        slide = ms([m.slide_d_mean for m in episodes])
        over = ms([m.overturn_theta_mean for m in episodes])
        row.update(slide_mean=slide[0], slide_std=slide[1],
                   overturn_mean=over[0], overturn_std=over[1])
    return row


def _episode_row(i: int, seed: int, m: EpisodeMetrics, setup: str) -> list:
    fixed = setup == "fixed"
    return [i, seed, m.stir_reward, m.spill_count,
            NA if fixed else m.slide_d_mean, NA if fixed else m.overturn_theta_mean,
            m.spilled_particles, m.halted or ""]


def cmd_eval(condition: str, cfg: ExperimentConfig, root: str | Path | None = None,
             episodes: int | None = None, steps: int | None = None) -> EvalResult:
    """Run the condition's library for the configured episodes; write per-episode and summary CSVs."""
    root = output_root(cfg, root)
    spec = _condition(cfg, condition)
    library = load_library(condition, cfg, root)
    priority = PriorityTable.for_library(cfg.priority, library)
    episodes = cfg.eval.episodes if episodes is None else episodes
    steps = cfg.eval.steps if steps is None else steps
    out = root / condition
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    results, seeds = [], []
    for i in range(episodes):
        seed = episode_seed(cfg.seed, EVAL_STREAM, i)
        world = sim.reset(cfg.sim, spec.setup, seed=seed)
        monitor = RiskMonitor.from_specs(cfg.risks)
        try:
            metrics, trace, _ = run_episode(library, priority, monitor, world, steps)
        except EpisodeAborted as exc:
            atomic_write(out / f"trace_episode_{i}.csv", exc.trace.to_csv(f"config_hash={h}"))
            raise
        if metrics.halted:
            log.warning("%s episode %d halted: %s", condition, i, metrics.halted)
        if i == 0:
            atomic_write(out / "trace_episode_0.csv", trace.to_csv(f"config_hash={h}"))
        results.append(metrics)
        seeds.append(seed)
    summary = _summarise(condition, spec.setup, results, steps)
    write_csv(out / "episodes.csv", EPISODE_HEADER,
              (_episode_row(i, s, m, spec.setup) for i, (s, m) in enumerate(zip(seeds, results))), h)
    write_csv(out / "metrics.csv", METRICS_HEADER, [[summary[k] for k in METRICS_HEADER]], h)
    atomic_write(out / "config.snapshot", _snapshot(cfg))
    return EvalResult(condition, results, seeds, summary)


def cmd_recovery(condition: str, cfg: ExperimentConfig, root: str | Path | None = None,
                 episodes: int | None = None, steps: int = RECOVERY_STEPS) -> dict[str, list[int]]:
    """Start episodes from each prevented risk's initial procedure and time the recovery.

    Returns, per risk, the step at which the risk deactivated (-1 if it never did).
    """
    root = output_root(cfg, root)
    spec = _condition(cfg, condition)
    library = load_library(condition, cfg, root)
    priority = PriorityTable.for_library(cfg.priority, library)
    episodes = cfg.eval.episodes if episodes is None else episodes
    thresholds = {r.id: r.kappa_a for r in cfg.risks}
    out: dict[str, list[int]] = {}
    rows = []
    for k, risk_id in enumerate(priority):
        out[risk_id] = []
        for i in range(episodes):
            # A perturbation that fails to trigger its risk is resampled, not counted.
            for attempt in range(MAX_PROCEDURE_ATTEMPTS):
                seed = episode_seed(cfg.seed, RECOVERY_STREAM, 100_000 * attempt + 1000 * k + i)
                rng = np.random.default_rng(seed)
                world = sim.reset(cfg.sim, spec.setup, seed=seed)
                try:
                    world = initial_procedure(world, risk_id, rng, thresholds[risk_id])
                    break
                except InitialProcedureError:
                    continue
            else:
                raise InitialProcedureError(f"{risk_id}: initial procedure failed "
                                            f"{MAX_PROCEDURE_ATTEMPTS} times in a row")
            world.step_count = 0
            monitor = RiskMonitor.from_specs(cfg.risks)
            # One extra control step so that an observation after the last action is taken.
            _, trace, _ = run_episode(library, priority, monitor, world, steps + 1)
            off = [ev.step for ev in monitor.events
                   if ev.risk_id == risk_id and ev.transition == "deactivate"]
            at = off[0] if off else -1
            out[risk_id].append(at)
            first = trace.records[0].skill if trace.records else ""
            rows.append([risk_id, i, seed, at, int(0 <= at <= steps), first])
    d = root / condition
    write_csv(d / "recovery.csv", ["risk", "episode", "seed", "deactivation_step", "recovered",
                                   "first_skill"], rows, cfg.config_hash())
    return out


def cmd_trace(condition: str, cfg: ExperimentConfig, particle: int | None = None,
              root: str | Path | None = None, steps: int | None = None) -> Path:
    """One matched-seed episode; per-step position of one particle and the selected skill."""
    root = output_root(cfg, root)
    spec = _condition(cfg, condition)
    particle = cfg.eval.trace_particle if particle is None else particle
    if not 0 <= particle < cfg.sim.n_particles:
        raise ConfigError(f"particle index {particle} out of range [0, {cfg.sim.n_particles})")
    steps = cfg.eval.trace_steps if steps is None else steps
    library = load_library(condition, cfg, root)
    priority = PriorityTable.for_library(cfg.priority, library)
    world = sim.reset(cfg.sim, spec.setup, seed=episode_seed(cfg.seed, TRACE_STREAM, 0))
    rows = []

    def record(state, skill):
        x, y = state.positions[particle]
        rows.append([len(rows), float(x), float(y), float(state.spoon[0]), float(state.spoon[1]),
                     skill])

    monitor = RiskMonitor.from_specs(cfg.risks)
    _, trace, _ = run_episode(library, priority, monitor, world, steps, on_step=record)
    out = root / condition
    h = cfg.config_hash()
    path = out / f"trace_particle_{particle}.csv"
    write_csv(path, ["step", "x", "y", "spoon_x", "spoon_y", "skill"], rows, h)
    atomic_write(out / "trace_selection.csv", trace.to_csv(f"config_hash={h}"))
    return path


def hull_area(points) -> float:
    """Area of the convex hull of 2D points; 0 for degenerate sets."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0


def trace_area(path: str | Path) -> float:
    rows = read_csv(path)
    return hull_area([[float(r["x"]), float(r["y"])] for r in rows])


# -- comparison ------------------------------------------------------------------

COMPARED = ("stir_reward_mean", "spill_mean", "slide_mean", "overturn_mean")


def collect_metrics(results_dir: str | Path) -> dict[str, dict[str, float | None]]:
    """Condition -> metric means. Seed sub-directories (``seed_*``) are averaged."""
    results_dir = Path(results_dir)
    runs = sorted(p for p in results_dir.glob("seed_*") if p.is_dir()) or [results_dir]
    acc: dict[str, dict[str, list[float]]] = {}
    for run in runs:
        for f in sorted(run.glob("*/metrics.csv")):
            for row in read_csv(f):
                cond = acc.setdefault(row["condition"], {k: [] for k in COMPARED})
                for k in COMPARED:
                    if row[k] not in ("", NA):
                        cond[k].append(float(row[k]))
    return {c: {k: (float(np.mean(v)) if v else None) for k, v in m.items()}
            for c, m in sorted(acc.items())}


def cmd_compare(results_dir: str | Path, config_hash: str = "") -> dict:
    """Pairwise orderings of every compared metric, plus the expected orderings."""
    results_dir = Path(results_dir)
    metrics = collect_metrics(results_dir)
    names = sorted(metrics)
    pairs = []
    for k in COMPARED:
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                va, vb = metrics[a][k], metrics[b][k]
                if va is None or vb is None:
                    continue
                rel = ">" if va > vb else "<" if va < vb else "="
                pairs.append([k, a, b, va, vb, rel])
    checks = []
    for k, op, a, b in EXPECTED:
        va = metrics.get(a, {}).get(k)
        vb = metrics.get(b, {}).get(k)
        if va is None or vb is None:
            holds = None
        else:
            holds = va > vb if op == ">" else va < vb
        checks.append([f"{k}: {a} {op} {b}", va, vb, "" if holds is None else int(holds)])
    write_csv(results_dir / "compare.csv", ["metric", "a", "b", "value_a", "value_b", "relation"],
              pairs, config_hash)
    write_csv(results_dir / "checks.csv", ["check", "value_a", "value_b", "holds"], checks,
              config_hash)
    return {"metrics": metrics, "pairs": pairs, "checks": checks}


# -- full pipeline ---------------------------------------------------------------

TRAIN_ORDER = ("stir", "spill", "slide", "overturn", "compound")


def run_pipeline(cfg: ExperimentConfig, root: str | Path | None = None,
                 skills: Sequence[str] = TRAIN_ORDER) -> dict:
    """Train every skill, assemble L2 then grow it into L4, evaluate all conditions,
    time recoveries, record traces and compare."""
    root = output_root(cfg, root)
    report: dict = {"train": {}, "eval": {}}
    for name in skills:
        if (skills_dir(root) / f"{name}_best.ckpt").exists():
            log.info("reusing trained %s", name)
            continue
        report["train"][name] = cmd_train(name, cfg, root)
    report["adapt"] = extend_library("L2-F", "L4-U", cfg, root)
    for condition in cfg.conditions:
        report["eval"][condition] = cmd_eval(condition, cfg, root).summary
    report["recovery"] = cmd_recovery("L4-U", cfg, root)
    report["trace"] = {c: trace_area(cmd_trace(c, cfg, root=root)) for c in ("L4-U", "pi_c-U")}
    atomic_write(root / "config.snapshot", _snapshot(cfg))
    report["compare"] = cmd_compare(root, cfg.config_hash())
    return report


def recovery_rate(steps: Sequence[int], limit: int = RECOVERY_STEPS) -> float:
    if not steps:
        return math.nan
    return sum(1 for s in steps if 0 <= s <= limit) / len(steps)
