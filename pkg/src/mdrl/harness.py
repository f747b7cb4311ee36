"""Experiment driver pieces: rule-based reference, dialogs-to-beat, resumable experiment cells,
grid search and the success/length report."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig
from .dst import DstModel
from .env import DomainSpec, RewardConfig, episode_rng, run_rule_based, summarize
from .policy import save_policy
from .trpo import (DIALOGS_GRID, KL_GRID, LogRow, Schedule, TrainRun, TrpoConfig, domain_key, read_log,
                   train_mtl, train_single, train_tl, write_log)

log = logging.getLogger(__name__)

ALGORITHMS = {"single": "TRPO", "mtl": "MTL", "tl": "TL"}
RULE_STREAM = 3


class MissingArtifact(FileNotFoundError):
    """A pipeline stage needs the output of an earlier one."""


def stderr(xs: Sequence[float]) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    return float(xs.std(ddof=1) / math.sqrt(len(xs))) if len(xs) > 1 else 0.0


# -- rule-based reference ----------------------------------------------------------

@dataclass(frozen=True)
class RuleBasedEstimate:
    domain: str
    noise_p: float
    n_episodes: int
    success: float
    success_stderr: float
    length: float
    length_stderr: float


def measure_rule_based(domain: DomainSpec, n_episodes: int, noise_p: float, seed: int = 0,
                       reward: RewardConfig | None = None, cache: str | Path | None = None) -> RuleBasedEstimate:
    """Monte Carlo success and length of the never-confirming rule-based policy (cached per domain/noise)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    key = f"{domain.name}|{noise_p:.6g}|{n_episodes}|{seed}"
    store = {}
    if cache is not None and Path(cache).exists():
        store = json.loads(Path(cache).read_text())
        if key in store:
            return RuleBasedEstimate(**store[key])
    dk = domain_key(domain.name)
    runs = [summarize(run_rule_based(domain, episode_rng(seed, dk, RULE_STREAM, i), noise_p=noise_p, reward=reward))
            for i in range(n_episodes)]
    succ = [float(r.success) for r in runs]
    lens = [float(r.length) for r in runs]
    est = RuleBasedEstimate(domain.name, noise_p, n_episodes, float(np.mean(succ)), stderr(succ),
                            float(np.mean(lens)), stderr(lens))
    if cache is not None:
        store[key] = est.__dict__
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        Path(cache).write_text(json.dumps(store, indent=1, sort_keys=True))
    return est


# -- curve metrics -------------------------------------------------------------------

def dialogs_to_beat(curve: Sequence[tuple[int, float]], reference: float) -> float | None:
    """First dialog count at which success strictly exceeds `reference`, linearly interpolated
    between checkpoints; None if never exceeded."""
    if not curve:
        raise ValueError("curve needs at least one checkpoint")
    pts = sorted(curve)
    for i, (n, s) in enumerate(pts):
        if s > reference:
            if i == 0:
                return float(n)
            n0, s0 = pts[i - 1]
            return float(n0 + (reference - s0) / (s - s0) * (n - n0))
    return None


def value_at(curve: Sequence[tuple[int, float]], n: int) -> float:
    """Curve value at dialog count n (linear interpolation; clamped at the ends)."""
    pts = sorted(curve)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return float(np.interp(n, xs, ys))


@dataclass
class Stat:
    mean: float
    se: float
    n: int
    missing: int = 0  # seeds that never beat the reference (counted at the budget)

    def fmt(self, digits: int = 1, scale: float = 1.0) -> str:
        if math.isnan(self.mean):
            return "-"
        text = f"{self.mean * scale:.{digits}f} ± {self.se * scale:.{digits}f}"
        return text + (f" ({self.missing}/{self.n} n.r.)" if self.missing else "")


def _stat(xs: Sequence[float], missing: int = 0) -> Stat:
    if not xs:
        return Stat(float("nan"), float("nan"), 0)
    return Stat(float(np.mean(xs)), stderr(xs), len(xs), missing)


@dataclass
class CellMetrics:
    success_cut: Stat
    dialogs_to_beat: Stat
    success_final: Stat
    length_cut: Stat
    length_final: Stat


@dataclass
class MetricsTable:
    cut: int
    budget: int
    domains: list[str]
    algorithms: list[str]
    cells: dict[tuple[str, str], CellMetrics] = field(default_factory=dict)
    reference: dict[str, RuleBasedEstimate] = field(default_factory=dict)
    per_seed: dict[tuple[str, str], dict[str, list[float]]] = field(default_factory=dict)

    def average(self, algorithm: str) -> CellMetrics:
        """Unweighted mean over domains of the per-domain means (stderr likewise averaged)."""
        rows = [self.cells[d, algorithm] for d in self.domains if (d, algorithm) in self.cells]

        def avg(attr):
            stats = [getattr(r, attr) for r in rows]
            return Stat(float(np.mean([s.mean for s in stats])), float(np.mean([s.se for s in stats])),
                        min(s.n for s in stats), sum(s.missing for s in stats))
        return CellMetrics(*(avg(a) for a in ("success_cut", "dialogs_to_beat", "success_final", "length_cut",
                                                "length_final")))


def build_table(rows: Iterable[LogRow], reference: dict[str, RuleBasedEstimate], budget: int, cut: int) -> MetricsTable:
    """Pure function of evaluation log rows and the rule-based reference."""
    curves: dict[tuple[str, str, int], list[tuple[int, float, float]]] = {}
    for r in rows:
        curves.setdefault((r.domain, ALGORITHMS[r.mode], r.seed), []).append((r.dialogs_seen, r.success_rate,
                                                                               r.avg_length))
    domains = sorted({k[0] for k in curves}, key=lambda d: list(reference).index(d) if d in reference else 99)
    algorithms = [a for a in ALGORITHMS.values() if any(k[1] == a for k in curves)]
    table = MetricsTable(cut, budget, domains, algorithms, reference=dict(reference))
    for d in domains:
        for a in algorithms:
            seeds = sorted(s for (dd, aa, s) in curves if dd == d and aa == a)
            if not seeds:
                continue
            acc = {"success_cut": [], "dtb": [], "success_final": [], "length_cut": [], "length_final": []}
            missing = 0
            for s in seeds:
                c = sorted(curves[d, a, s])
                succ = [(n, x) for n, x, _ in c]
                lens = [(n, y) for n, _, y in c]
                acc["success_cut"].append(value_at(succ, cut))
                acc["success_final"].append(value_at(succ, budget))
                acc["length_cut"].append(value_at(lens, cut))
                acc["length_final"].append(value_at(lens, budget))
                dtb = dialogs_to_beat(succ, reference[d].success) if d in reference else None
                if dtb is None:
                    missing += 1
                    dtb = float(budget)
                acc["dtb"].append(dtb)
            table.per_seed[d, a] = acc
            table.cells[d, a] = CellMetrics(_stat(acc["success_cut"]), _stat(acc["dtb"], missing),
                                            _stat(acc["success_final"]), _stat(acc["length_cut"]),
                                            _stat(acc["length_final"]))
    return table


def format_table(table: MetricsTable) -> str:
    """Aligned plain-text success and length tables (rule-based rows included)."""
    def render(title, header, body):
        widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
        lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines)

    cut, budget = table.cut, table.budget
    s_rows, l_rows = [], []
    for d in table.domains + ["Average"]:
        if d in table.reference or d == "Average":
            refs = [table.reference[x] for x in table.domains if x in table.reference]
            if d == "Average" and refs:
                ref_s, ref_l = np.mean([r.success for r in refs]), np.mean([r.length for r in refs])
                ref_se = np.mean([r.success_stderr for r in refs])
            elif d != "Average":
                r = table.reference[d]
                ref_s, ref_l, ref_se = r.success, r.length, r.success_stderr
            else:
                ref_s = None
            if ref_s is not None:
                s_rows.append([d, "rule-based", f"{100 * ref_s:.1f} ± {100 * ref_se:.1f}", "-", "-"])
                l_rows.append([d, "rule-based", f"{ref_l:.2f}", "-"])
        for a in table.algorithms:
            if d == "Average":
                m = table.average(a)
            elif (d, a) in table.cells:
                m = table.cells[d, a]
            else:
                continue
            s_rows.append([d, a, m.success_cut.fmt(1, 100), m.dialogs_to_beat.fmt(0), m.success_final.fmt(1, 100)])
            l_rows.append([d, a, m.length_cut.fmt(2), m.length_final.fmt(2)])
    s = render("Success rate (%)", ["domain", "algorithm", f"success@{cut}", "dialogs>rule-based",
                                    f"success@{budget}"], s_rows)
    l_ = render("Average dialog length", ["domain", "algorithm", f"length@{cut}", f"length@{budget}"], l_rows)
    return s + "\n\n" + l_ + "\n"


def write_table_csv(path: str | Path, table: MetricsTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "algorithm", "metric", "mean", "stderr", "n_seeds", "not_reached"])
        for d in table.domains + ["Average"]:
            for a in table.algorithms:
                if d == "Average":
                    m = table.average(a)
                elif (d, a) in table.cells:
                    m = table.cells[d, a]
                else:
                    continue
                for metric in ("success_cut", "dialogs_to_beat", "success_final", "length_cut", "length_final"):
                    st = getattr(m, metric)
                    w.writerow([d, a, metric, f"{st.mean:.10g}", f"{st.se:.10g}", st.n, st.missing])


# -- experiment cells ------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    mode: str
    seed: int
    target: str | None = None  # single/tl: the domain trained and logged

    @property
    def run_id(self) -> str:
        return f"{self.mode}-{self.target}-s{self.seed}" if self.target else f"{self.mode}-s{self.seed}"


def experiment_cells(cfg: RunConfig) -> list[Cell]:
    names = [d.name for d in cfg.domain_specs()]
    cells = []
    for mode in cfg.experiment.modes:
        for seed in cfg.experiment.seeds:
            if mode == "single":
                cells += [Cell(mode, seed, n) for n in names]
            elif mode == "mtl":
                cells.append(Cell(mode, seed))
            else:
                cells += [Cell(mode, seed, n) for n in (cfg.experiment.tl_targets or names)]
    return cells


def load_dst(path: str | Path) -> DstModel:
    path = Path(path)
    if not path.exists() or not path.with_suffix(".json").exists():
        raise MissingArtifact(f"no DST checkpoint at {path}; run `mdrl train-dst` first")
    return DstModel.load(path)


def run_cell(cell: Cell, cfg: RunConfig, dst: DstModel, out_dir: str | Path) -> TrainRun | None:
    """Train one (mode, domain, seed) cell and write its logs; a finished cell is left alone."""
    out = Path(out_dir) / "cells"
    out.mkdir(parents=True, exist_ok=True)
    eval_path, iter_path = out / f"{cell.run_id}.eval.csv", out / f"{cell.run_id}.iter.csv"
    if eval_path.exists() and iter_path.exists():
        return None
    specs = {d.name: d for d in cfg.domain_specs()}
    missing = [n for n in specs if n not in dst.domains]
    if missing:
        raise MissingArtifact(f"DST checkpoint has no heads for {missing}; retrain it with these domains")
    schedule = cfg.schedule()
    if cell.mode == "single":
        run = train_single(specs[cell.target], dst, cfg.trpo, schedule, cell.seed, cfg.policy, cell.run_id)
    elif cell.mode == "mtl":
        run = train_mtl(list(specs.values()), dst, cfg.trpo, schedule, cell.seed, cfg.policy, cell.run_id)
    else:
        sources = [d for n, d in specs.items() if n != cell.target]
        run = train_tl(sources, specs[cell.target], dst, cfg.trpo, schedule, cell.seed, cfg.policy, cell.run_id)
        write_log(out / f"{cell.run_id}.source.csv", run.source_iterations)
    write_log(iter_path, run.iterations)
    write_log(eval_path, run.evaluations)  # written last: its presence marks the cell complete
    pol_dir = Path(out_dir) / "policies"
    pol_dir.mkdir(exist_ok=True)
    save_policy(pol_dir / f"{cell.run_id}.ckpt", run.policy)
    return run


def collect_logs(out_dir: str | Path, kind: str = "eval") -> list[LogRow]:
    rows = []
    for p in sorted((Path(out_dir) / "cells").glob(f"*.{kind}.csv")):
        rows += read_log(p)
    rows.sort(key=lambda r: (r.mode, r.domain, r.seed, r.dialogs_seen))
    return rows


def references(cfg: RunConfig, out_dir: str | Path) -> dict[str, RuleBasedEstimate]:
    cache = Path(out_dir) / "rule_based.json"
    return {d.name: measure_rule_based(d, cfg.experiment.rule_episodes, cfg.domains.noise_p, 0, cfg.domains.reward,
                                       cache) for d in cfg.domain_specs()}


def report(cfg: RunConfig, out_dir: str | Path) -> MetricsTable:
    """Merge cell logs, rebuild the table from them and write report.txt / report.csv."""
    out_dir = Path(out_dir)
    evals = collect_logs(out_dir, "eval")
    if not evals:
        raise MissingArtifact(f"no finished runs under {out_dir}/cells; run `mdrl train` first")
    write_log(out_dir / "evaluations.csv", evals)
    write_log(out_dir / "iterations.csv", collect_logs(out_dir, "iter"))
    table = build_table(evals, references(cfg, out_dir), cfg.experiment.budget, cfg.experiment.success_cut)
    (out_dir / "report.txt").write_text(format_table(table))
    write_table_csv(out_dir / "report.csv", table)
    return table


def run_experiment(cfg: RunConfig, dst_path: str | Path, out_dir: str | Path, cells: Sequence[Cell] | None = None) -> MetricsTable:
    dst = load_dst(dst_path)
    cells = list(cells) if cells is not None else experiment_cells(cfg)
    for i, cell in enumerate(cells):
        log.info("cell %d/%d %s", i + 1, len(cells), cell.run_id)
        run_cell(cell, cfg, dst, out_dir)
    return report(cfg, out_dir)


# -- grid search -------------------------------------------------------------------------

@dataclass
class GridResult:
    best: tuple[float, int]
    cells: dict[tuple[float, int], tuple[float, float]]  # -> (mean final success, mean dialogs-to-beat)


def grid_search(domain: DomainSpec, dst: DstModel, base: TrpoConfig, schedule: Schedule, seeds: Sequence[int],
                reference: float, kl_grid: Sequence[float] = KL_GRID,
                dialogs_grid: Sequence[int] = DIALOGS_GRID, policy_config=None) -> GridResult:
    """Exhaustive sweep; argmax of mean final success, ties to fewer dialogs-to-beat, then smaller δ."""
    if not kl_grid or not dialogs_grid:
        raise ValueError("grids must be non-empty")
    cells = {}
    for kl in kl_grid:
        for dpi in dialogs_grid:
            cfg = replace(base, max_kl=kl, dialogs_per_iteration=dpi)
            finals, dtbs = [], []
            for seed in seeds:
                run = train_single(domain, dst, cfg, schedule, seed, policy_config)
                curve = [(n, s) for n, s, _ in run.curve(domain.name)]
                finals.append(value_at(curve, schedule.budget))
                dtb = dialogs_to_beat(curve, reference)
                dtbs.append(schedule.budget if dtb is None else dtb)
            cells[kl, dpi] = (float(np.mean(finals)), float(np.mean(dtbs)))
            log.info("grid kl=%g dpi=%d final=%.3f dtb=%.0f", kl, dpi, *cells[kl, dpi])
    best = min(cells, key=lambda k: (-cells[k][0], cells[k][1], k[0]))
    return GridResult(best, cells)
