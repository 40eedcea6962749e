"""Run directories, the variant x seed matrix, cross-seed aggregation, visitation grids and plots.

Layout of one run::

    {outdir}/{variant}/{seed}/config.txt
                              metrics.csv
                              curricula.jsonl
                              visitation-early.csv, visitation-late.csv
                              checkpoint-{episode}/manifest.json, state.pt
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import ExperimentConfig, from_text
from .envs import write_trajectory_jsonl
from .trainer import METRIC_COLUMNS, VARIANTS, Trainer

log = logging.getLogger(__name__)

PHASES = ("early", "late")
PHASE_FRACTION = 0.1


@dataclass
class VisitationGrid:
    """2D histogram of agent positions over the arena."""

    counts: np.ndarray  # (bins, bins), first axis is x
    edges: np.ndarray  # (bins + 1,), shared by both axes
    phase: str

    @classmethod
    def empty(cls, half_width: float, bins: int, phase: str) -> "VisitationGrid":
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        return cls(np.zeros((bins, bins), dtype=np.int64), np.linspace(-half_width, half_width, bins + 1), phase)

    def add(self, positions: np.ndarray) -> "VisitationGrid":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        if len(positions):
            # clip so points on the arena boundary land in the edge bins
            pts = np.clip(positions, self.edges[0], self.edges[-1])
            h, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[self.edges, self.edges])
            self.counts += h.astype(np.int64)
        return self

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# phase={self.phase} lo={float(self.edges[0])!r} hi={float(self.edges[-1])!r} bins={len(self.edges) - 1}\n")
            np.savetxt(fh, self.counts, delimiter=",", fmt="%d")

    @classmethod
    def from_csv(cls, path) -> "VisitationGrid":
        with open(path) as fh:
            header = dict(kv.split("=") for kv in fh.readline().lstrip("# ").split())
            counts = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
        edges = np.linspace(float(header["lo"]), float(header["hi"]), int(header["bins"]) + 1)
        return cls(counts, edges, header["phase"])


def record_visitation(positions: np.ndarray, phase: str, half_width: float = 1.0, bins: int = 50) -> VisitationGrid:
    return VisitationGrid.empty(half_width, bins, phase).add(positions)


def phase_slices(step_start: int, n: int, total: int) -> dict:
    """Index ranges of an episode's ``n`` steps that fall in the early and late phases."""
    early_end = int(math.ceil(PHASE_FRACTION * total))
    late_start = int(math.floor((1 - PHASE_FRACTION) * total))
    out = {}
    lo, hi = step_start, step_start + n
    if lo < early_end:
        out["early"] = slice(0, min(hi, early_end) - lo)
    if hi > late_start:
        out["late"] = slice(max(lo, late_start) - lo, n)
    return out


# --- single run ------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_dir(outdir, variant: str, seed: int) -> Path:
    return Path(outdir) / variant / str(seed)


def run_single(cfg: ExperimentConfig, seed: int, pretrain_from: Optional[str] = None) -> Path:
    """Train one (variant, seed) cell and write its run directory."""
    cfg = cfg.replace(seeds=(int(seed),))
    out = run_dir(cfg.outdir, cfg.variant, seed)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    trainer = Trainer(cfg, seed)
    pretrain_from = pretrain_from or cfg.pretrain_from
    if pretrain_from:
        trainer.load_pretrained(pretrain_from)
    total = trainer.bilevel.T_outer * (-(-trainer.bilevel.T_inner // cfg.n_envs) * cfg.n_envs)
    grids = {p: VisitationGrid.empty(cfg.arena_half_width, cfg.visitation_bins, p) for p in PHASES}
    traj_fh = open(out / "trajectories.jsonl", "w") if cfg.dump_trajectories else None
    try:
        with open(out / "metrics.csv", "w", newline="") as mfh, open(out / "curricula.jsonl", "w") as cfh:
            writer = csv.writer(mfh)
            writer.writerow(METRIC_COLUMNS)
            for res in trainer.run():
                writer.writerow([_fmt(res.record[c]) for c in METRIC_COLUMNS])
                mfh.flush()
                cfh.write(json.dumps(res.curricula) + "\n")
                if cfg.record_visitation:
                    for phase, sl in phase_slices(res.step_start, len(res.positions), total).items():
                        grids[phase].add(res.positions[sl])
                if traj_fh is not None and res.trajectories:
                    write_trajectory_jsonl(traj_fh, res.trajectories)
                ep = res.record["episode"]
                if cfg.memory_dump_every and trainer.memory is not None and ep % cfg.memory_dump_every == 0:
                    trainer.memory.to_csv(out / f"memory-{ep}.csv")
                if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                    trainer.save_checkpoint(out / f"checkpoint-{ep}")
    finally:
        if traj_fh is not None:
            traj_fh.close()
    if cfg.record_visitation:
        for phase, grid in grids.items():
            grid.to_csv(out / f"visitation-{phase}.csv")
    trainer.save_checkpoint(out / f"checkpoint-{max(trainer.episode - 1, 0)}")
    return out


def expand_matrix(cfg: ExperimentConfig) -> list[tuple[str, int]]:
    variants = list(VARIANTS) if cfg.variant == "all" else [cfg.variant]
    return [(v, s) for v in variants for s in cfg.seeds]


def run_matrix(cfg: ExperimentConfig, pretrain_from: Optional[str] = None) -> tuple[list[Path], list[tuple]]:
    """Run every cell; a failing cell is logged and the rest continue."""
    done, failed = [], []
    for variant, seed in expand_matrix(cfg):
        log.info("run variant=%s seed=%d task=%s", variant, seed, cfg.task)
        try:
            done.append(run_single(cfg.replace(variant=variant), seed, pretrain_from))
        except Exception as err:  # noqa: BLE001 - one broken cell must not sink the matrix
            log.exception("run variant=%s seed=%d failed", variant, seed)
            failed.append((variant, seed, repr(err)))
    return done, failed


# --- aggregation -------------------------------------------------------------------


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS} if rows else {}


def final_window(values: np.ndarray, fraction: float = PHASE_FRACTION) -> float:
    """Mean of the last ``fraction`` of the entries, at least one, NaNs ignored."""
    if len(values) == 0:
        return float("nan")
    n = max(1, int(math.ceil(fraction * len(values))))
    tail = values[-n:]
    tail = tail[np.isfinite(tail)]
    return float(tail.mean()) if len(tail) else float("nan")


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); the std of one value is 0."""
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class SummaryRow:
    variant: str
    task: str
    n_seeds: int
    reward_mean: float
    reward_std: float
    success_mean: float
    success_std: float


def discover_runs(outdir) -> list[tuple[str, str, Path]]:
    root = Path(outdir)
    runs = []
    if not root.is_dir():
        return runs
    for vdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for sdir in sorted(p for p in vdir.iterdir() if p.is_dir()):
            if (sdir / "config.txt").exists() or (sdir / "metrics.csv").exists():
                runs.append((vdir.name, sdir.name, sdir))
    return runs


def aggregate(outdir, write: bool = True) -> tuple[list[SummaryRow], list[str]]:
    """Cross-seed summary of the final window; returns rows and a list of incomplete runs."""
    cells: dict[tuple[str, str], list[tuple[float, float]]] = {}
    missing = []
    for variant, seed, path in discover_runs(outdir):
        metrics_path = path / "metrics.csv"
        if not metrics_path.exists() or not (path / "config.txt").exists():
            missing.append(f"{variant}/{seed}")
            continue
        metrics = read_metrics(metrics_path)
        if not metrics:
            missing.append(f"{variant}/{seed}")
            continue
        task = from_text((path / "config.txt").read_text()).task
        cells.setdefault((variant, task), []).append(
            (final_window(metrics["mean_episode_reward"]), final_window(metrics["fractional_success"]))
        )
    rows = []
    for (variant, task), vals in sorted(cells.items()):
        rm, rs = mean_std(v[0] for v in vals)
        sm, ss = mean_std(v[1] for v in vals)
        rows.append(SummaryRow(variant, task, len(vals), rm, rs, sm, ss))
    if write and Path(outdir).is_dir():
        with open(Path(outdir) / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "task", "n_seeds", "reward_mean", "reward_std", "success_mean", "success_std"])
            for r in rows:
                w.writerow([r.variant, r.task, r.n_seeds, _fmt(r.reward_mean), _fmt(r.reward_std), _fmt(r.success_mean), _fmt(r.success_std)])
    return rows, missing


def format_table(rows: list[SummaryRow], missing: Optional[list[str]] = None) -> str:
    head = f"{'variant':<30} {'task':<6} {'seeds':>5}  {'mean episode reward':>22}  {'fractional success':>20}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.variant:<30} {r.task:<6} {r.n_seeds:>5}  {r.reward_mean:>10.2f} (±{r.reward_std:>7.2f})"
                     f"  {100 * r.success_mean:>8.1f}% (±{100 * r.success_std:>5.1f})")
    if missing:
        lines.append("incomplete runs: " + ", ".join(missing))
    return "\n".join(lines)


# --- plots ---------------------------------------------------------------------------


def learning_curve_band(curves: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and sample std over seeds, truncated to the shortest curve."""
    n = min(len(c) for c in curves)
    stack = np.stack([np.asarray(c[:n], dtype=np.float64) for c in curves])
    std = stack.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(n)
    return stack.mean(axis=0), std


def emit_plots(outdir) -> list[Path]:
    """Learning curves per task (mean ± 1 sample std over seeds) and a heatmap per visitation grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    written = []
    by_task: dict[str, dict[str, list]] = {}
    for variant, seed, path in discover_runs(outdir):
        if not (path / "metrics.csv").exists() or not (path / "config.txt").exists():
            continue
        metrics = read_metrics(path / "metrics.csv")
        if not metrics:
            continue
        task = from_text((path / "config.txt").read_text()).task
        by_task.setdefault(task, {}).setdefault(variant, []).append(metrics)
        for phase in PHASES:
            grid_path = path / f"visitation-{phase}.csv"
            if grid_path.exists():
                grid = VisitationGrid.from_csv(grid_path)
                fig, ax = plt.subplots(figsize=(4, 4))
                lo, hi = grid.edges[0], grid.edges[-1]
                ax.imshow(grid.counts.T, origin="lower", extent=(lo, hi, lo, hi), cmap="viridis")
                ax.set_title(f"{variant} seed {seed} ({phase})")
                target = path / f"visitation-{phase}.png"
                fig.savefig(target, dpi=80)
                plt.close(fig)
                written.append(target)
    for task, variants in by_task.items():
        for column, label in (("fractional_success", "fractional success"), ("mean_episode_reward", "mean episode reward")):
            fig, ax = plt.subplots(figsize=(6, 4))
            for variant, runs in sorted(variants.items()):
                mean, std = learning_curve_band([m[column] for m in runs])
                x = runs[0]["env_steps"][: len(mean)]
                ax.plot(x, mean, label=variant)
                ax.fill_between(x, mean - std, mean + std, alpha=0.2)
            ax.set_xlabel("env steps")
            ax.set_ylabel(label)
            ax.set_title(task)
            ax.legend(fontsize=6)
            target = outdir / f"curve-{task}-{column}.png"
            fig.tight_layout()
            fig.savefig(target, dpi=80)
            plt.close(fig)
            written.append(target)
    return written
