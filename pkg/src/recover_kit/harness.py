"""Task × failure matrix, cost comparison and report rendering."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import yaml

from recover_kit.orchestrator import (
    COMPLETED,
    NOT_COMPLETED,
    NOT_RECOVERED,
    RunConfig,
    RunRecord,
    run_baseline,
    run_recover,
)
from recover_kit.percept import PerceptConfig
from recover_kit.planner import GroundingConfig, Pricing
from recover_kit.worldsim import (
    FAILURE_CLASSES,
    TASK_IDS,
    WorldError,
    default_injection,
    eligible_steps,
    feasible,
    get_task,
)

INFEASIBLE = "infeasible"
GRID_SYMBOLS = {COMPLETED: "C", NOT_COMPLETED: "R", NOT_RECOVERED: "X", INFEASIBLE: "."}
REFERENCE_NOTES = (
    "reference figures: recovery rate ~70%, easy completion rate 59%, complex completion rate 33%",
    "reference figures: safety issues identified 100%, recovered 93%",
)


@dataclass(frozen=True)
class SuiteConfig:
    tasks: tuple = TASK_IDS
    failures: tuple = tuple(range(1, 13))
    planner: str = "template"
    replay_dir: Optional[str] = None
    pricing: Pricing = field(default_factory=Pricing)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    percept: PerceptConfig = field(default_factory=PerceptConfig)
    seed: int = 0
    workers: int = 1
    at_step: Optional[int] = None
    sensitivity: tuple = ("T10", 2)
    never_detect: tuple = (("T10", 9),)

    def run_config(self, task: str, failure: Optional[int], at_step: Optional[int] = None, **kw) -> RunConfig:
        inj = None
        if failure is not None:
            step = at_step if at_step is not None else self.at_step
            steps = eligible_steps(get_task(task), failure)
            inj = default_injection(get_task(task), failure, step if step in steps else None)
        return RunConfig(
            task=task,
            injection=inj,
            planner=kw.pop("planner", self.planner),
            seed=self.seed,
            pricing=self.pricing,
            replay_dir=self.replay_dir,
            grounding=self.grounding,
            percept=self.percept,
            **kw,
        )


def load_suite(path: Union[str, Path, None] = None) -> SuiteConfig:
    """Suite settings from YAML; a missing path gives the shipped defaults."""
    if path is None:
        from recover_kit.data import data_path

        path = data_path("suite.yaml")
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return suite_from_dict(doc)


def suite_from_dict(doc: dict) -> SuiteConfig:
    kw = dict(doc)
    if "pricing" in kw:
        kw["pricing"] = Pricing(**kw["pricing"])
    if "grounding" in kw:
        kw["grounding"] = GroundingConfig(**kw["grounding"])
    if "percept" in kw:
        kw["percept"] = PerceptConfig.from_mapping(kw["percept"])
    for key in ("tasks", "failures", "sensitivity"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if "never_detect" in kw:
        kw["never_detect"] = tuple(tuple(p) for p in kw["never_detect"])
    unknown = set(kw) - set(SuiteConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown suite keys: {', '.join(sorted(unknown))}")
    return SuiteConfig(**kw)


# ---------------------------------------------------------------------- matrix


@dataclass(frozen=True)
class Cell:
    task: str
    failure: int
    outcome: str
    detected: bool = False
    detection_step: Optional[int] = None
    strategy: str = ""
    planner_calls: int = 0
    cost: float = 0.0
    error: str = ""
    safety: bool = False  # a SafetyFailure finding was raised alongside


@dataclass
class MatrixReport:
    cells: dict  # (task, failure) -> Cell
    records: dict = field(default_factory=dict, repr=False)

    def feasible_cells(self, tasks: Optional[Sequence[str]] = None) -> list[Cell]:
        return [c for (t, _), c in sorted(self.cells.items(), key=_cell_key) if c.outcome != INFEASIBLE and (tasks is None or t in tasks)]

    def rates(self, tasks: Optional[Sequence[str]] = None) -> dict:
        cells = self.feasible_cells(tasks)
        n = len(cells)
        rec = sum(c.outcome in (COMPLETED, NOT_COMPLETED) for c in cells)
        comp = sum(c.outcome == COMPLETED for c in cells)
        det = sum(c.detected for c in cells)
        return {
            "n": n,
            "recovery": rec / n if n else 0.0,
            "completion": comp / n if n else 0.0,
            "detection": det / n if n else 0.0,
        }

    def aggregates(self) -> dict:
        easy = [t for t in self.tasks() if get_task(t).easy]
        hard = [t for t in self.tasks() if not get_task(t).easy]
        safety = [c for c in self.feasible_cells() if c.safety]
        return {
            "all": self.rates(),
            "easy": self.rates(easy),
            "complex": self.rates(hard),
            "safety_n": len(safety),
            "safety_recovered": sum(c.outcome in (COMPLETED, NOT_COMPLETED) for c in safety),
        }

    def tasks(self) -> list[str]:
        return sorted({t for t, _ in self.cells}, key=lambda t: int(t[1:]))

    def failures(self) -> list[int]:
        return sorted({f for _, f in self.cells})

    def to_csv(self) -> str:
        return matrix_csv(self.cells.values())

    def aggregate_lines(self) -> list[str]:
        return aggregate_lines(list(self.cells.values()))

    def grid(self) -> str:
        return grid_text(list(self.cells.values()))


def _cell_key(item):
    (t, f), _ = item
    return (int(t[1:]) if t[1:].isdigit() else 0, t, f)


CSV_FIELDS = ("task", "failure", "failure_class", "group", "outcome", "detected", "detection_step",
              "strategy", "planner_calls", "cost", "safety", "error")


def matrix_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in sorted(cells, key=lambda c: (int(c.task[1:]), c.failure)):
        w.writerow([
            c.task, c.failure, FAILURE_CLASSES[c.failure], "easy" if get_task(c.task).easy else "complex",
            c.outcome, int(c.detected), "" if c.detection_step is None else c.detection_step,
            c.strategy, c.planner_calls, f"{c.cost:.6f}", int(c.safety), c.error,
        ])
    return buf.getvalue()


def read_matrix_csv(text: str) -> list[Cell]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(Cell(
            task=row["task"],
            failure=int(row["failure"]),
            outcome=row["outcome"],
            detected=row["detected"] == "1",
            detection_step=int(row["detection_step"]) if row["detection_step"] else None,
            strategy=row["strategy"],
            planner_calls=int(row["planner_calls"]),
            cost=float(row["cost"]),
            error=row["error"],
            safety=row["safety"] == "1",
        ))
    return out


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def aggregate_lines(cells: list[Cell]) -> list[str]:
    m = MatrixReport({(c.task, c.failure): c for c in cells})
    a = m.aggregates()
    lines = [
        f"feasible pairs: {a['all']['n']}",
        f"detection rate: {_pct(a['all']['detection'])}",
        f"recovery rate: {_pct(a['all']['recovery'])}",
        f"completion rate: {_pct(a['all']['completion'])}",
        f"easy recovery rate: {_pct(a['easy']['recovery'])}",
        f"easy completion rate: {_pct(a['easy']['completion'])}",
        f"complex recovery rate: {_pct(a['complex']['recovery'])}",
        f"complex completion rate: {_pct(a['complex']['completion'])}",
        f"safety scenarios: {a['safety_n']}, recovered {a['safety_recovered']}",
    ]
    return lines + list(REFERENCE_NOTES)


def grid_text(cells: list[Cell]) -> str:
    by = {(c.task, c.failure): c for c in cells}
    tasks = sorted({c.task for c in cells}, key=lambda t: int(t[1:]))
    failures = sorted({c.failure for c in cells})
    head = "task  " + " ".join(f"{f:>2}" for f in failures)
    rows = [head]
    for t in tasks:
        marks = [GRID_SYMBOLS.get(by[(t, f)].outcome, "?") if (t, f) in by else " " for f in failures]
        rows.append(f"{t:<5} " + " ".join(f"{m:>2}" for m in marks))
    rows.append("legend: C completed, R recovered without completion, X not recovered, . infeasible")
    return "\n".join(rows) + "\n"


def _run_cell(args) -> tuple:
    suite, task, failure = args
    if not feasible(task, failure):
        return (task, failure), Cell(task, failure, INFEASIBLE), None
    try:
        cfg = suite.run_config(task, failure)
        rec = run_recover(cfg)
    except (WorldError, OSError) as exc:
        return (task, failure), Cell(task, failure, NOT_RECOVERED, error=str(exc)), None
    first = rec.findings[0].split()[0] if rec.findings else None
    detected = first == FAILURE_CLASSES[failure] and rec.detection_index == cfg.injection.trigger_step
    safety = any("SafetyFailure" in v for _, v in rec.verdicts)
    cell = Cell(
        task, failure, rec.outcome, detected, rec.detection_index,
        ",".join(rec.strategies), rec.replan_calls, rec.cost, rec.error or "", safety,
    )
    return (task, failure), cell, rec


def run_matrix(suite: SuiteConfig = SuiteConfig(), keep_records: bool = False) -> MatrixReport:
    """Every (task, failure) cell once; infeasible cells are marked, not run."""
    jobs = [(suite, t, f) for t in suite.tasks for f in suite.failures]
    if suite.workers > 1:
        with ProcessPoolExecutor(max_workers=suite.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    cells = {k: c for k, c, _ in results}
    records = {k: r for k, _, r in results if r is not None} if keep_records else {}
    return MatrixReport(cells, records)


# ---------------------------------------------------------------------- cost


@dataclass(frozen=True)
class CostRow:
    task: str
    failure: int
    detection_step: Optional[int]
    recover_calls: int
    recover_cost: float
    baseline_verifier_calls: int
    baseline_cost: float
    baseline_halted: bool
    mode: str = "oracle"

    @property
    def ratio(self) -> float:
        return self.baseline_cost / self.recover_cost if self.recover_cost else float("inf")


@dataclass
class CostReport:
    rows: list
    sensitivity: list  # (detection step, verifier calls, baseline cost)
    budget: float = 5.0

    def fmt_cost(self, row: CostRow) -> str:
        return f"> {self.budget:g}" if row.baseline_halted else f"{row.baseline_cost:.4f}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "failure", "mode", "detection_step", "recover_calls", "recover_cost",
                    "baseline_verifier_calls", "baseline_cost", "ratio", "baseline_halted"])
        for r in self.rows:
            w.writerow([r.task, r.failure, r.mode, "" if r.detection_step is None else r.detection_step,
                        r.recover_calls, f"{r.recover_cost:.6f}", r.baseline_verifier_calls,
                        self.fmt_cost(r) if r.baseline_halted else f"{r.baseline_cost:.6f}",
                        f"{r.ratio:.2f}", int(r.baseline_halted)])
        return buf.getvalue()

    def lines(self) -> list[str]:
        out = ["task failure mode detection recover baseline ratio"]
        for r in self.rows:
            det = "-" if r.detection_step is None else str(r.detection_step + 1)
            out.append(f"{r.task} {r.failure} {r.mode} {det} {r.recover_cost:.4f} {self.fmt_cost(r)} {r.ratio:.1f}")
        if self.sensitivity:
            out.append("detection step sensitivity (baseline): step calls cost")
            for step, calls, cost in self.sensitivity:
                out.append(f"  {step + 1} {calls} {cost:.4f}")
        return out


def _cost_row(suite: SuiteConfig, task: str, failure: int, mode: str = "oracle", at_step: Optional[int] = None) -> CostRow:
    rec_cfg = suite.run_config(task, failure, at_step)
    rec = run_recover(rec_cfg)
    base = run_baseline(suite.run_config(task, failure, at_step, verifier="synthetic", baseline_mode=mode))
    return CostRow(
        task, failure, base.detection_index if mode == "oracle" else None,
        rec.replan_calls, rec.cost, base.verifier_calls, base.cost, base.budget_exceeded, mode,
    )


def run_cost(suite: SuiteConfig = SuiteConfig()) -> CostReport:
    """Recover vs per-step baseline cost for every feasible pair, plus the never-detect cases."""
    rows = [_cost_row(suite, t, f) for t in suite.tasks for f in suite.failures if feasible(t, f)]
    rows += [_cost_row(suite, t, f, mode="never") for t, f in suite.never_detect if feasible(t, f)]
    sens = []
    if suite.sensitivity:
        t, f = suite.sensitivity
        if feasible(t, f):
            for step in eligible_steps(get_task(t), f):
                base = run_baseline(suite.run_config(t, f, step, verifier="synthetic", baseline_mode="oracle"))
                sens.append((step, base.verifier_calls if base.detection_index is None else base.detection_index + 1, _prefix_cost(base)))
    return CostReport(rows, sens, suite.pricing.budget)


def _prefix_cost(rec: RunRecord) -> float:
    """Baseline spend up to and including detection (verifier calls only)."""
    n = (rec.detection_index + 1) if rec.detection_index is not None else len(rec.planner_calls)
    return sum(c.cost for c in rec.planner_calls[:n] if c.kind == "verify")
