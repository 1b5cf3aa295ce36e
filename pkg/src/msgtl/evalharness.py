"""Metrics, validation protocols, sweeps and report files."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import TrainConfig
from .funnelgen import FunnelDataset
from .pipeline import ModelRegistry, predict_scores, train_msgtl

log = logging.getLogger(__name__)

VARIANTS = ("NN", "NN-DO", "MSGTL", "MSGTL-R", "MSGTL-DA")
PROTOCOLS = ("crossval", "longitudinal")
POOLED = -1          # fold id of rows pooling every out-of-fold prediction
DEFAULT_DA_LAMBDA = 0.1

RESULT_COLUMNS = ["protocol", "variant", "stage_name", "stage_index", "rho", "omega", "gamma",
                  "seed", "fold", "precision", "recall", "f1", "n_train", "n_test",
                  "runtime_ms", "phase"]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSet:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def f1_positive(decisions, labels) -> MetricSet:
    d = np.asarray(decisions).astype(int).reshape(-1)
    y = np.asarray(labels).astype(int).reshape(-1)
    if d.shape != y.shape:
        raise ValueError(f"length mismatch: {d.size} decisions, {y.size} labels")
    if d.size == 0:
        raise ValueError("no samples")
    tp = int(np.sum((d == 1) & (y == 1)))
    fp = int(np.sum((d == 1) & (y == 0)))
    tn = int(np.sum((d == 0) & (y == 0)))
    fn = int(np.sum((d == 0) & (y == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return MetricSet(p, r, f, tp, fp, tn, fn)


# --------------------------------------------------------------------------
# plans and variants
# --------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    protocol: str = "crossval"
    folds: int = 10
    variant: str = "MSGTL"
    grid: List[Tuple[float, int, int]] = field(default_factory=lambda: [(0.3, 6, 2)])
    seeds: List[int] = field(default_factory=lambda: [0])
    base: TrainConfig = field(default_factory=TrainConfig)
    variants: Optional[List[str]] = None
    jobs: int = 1
    record_timing: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if not self.grid:
            raise ValueError("empty hyperparameter grid")
        for v in self.all_variants():
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")

    def all_variants(self) -> List[str]:
        return list(self.variants) if self.variants else [self.variant]


def full_grid(rhos: Iterable[float], omegas: Iterable[int], gammas: Iterable[int]):
    return [(float(r), int(o), int(g)) for r, o, g in itertools.product(rhos, omegas, gammas)]


def variant_config(variant: str, base: TrainConfig, rho: Optional[float] = None,
                   omega: Optional[int] = None, gamma: Optional[int] = None,
                   seed: Optional[int] = None) -> TrainConfig:
    changes = {}
    if rho is not None:
        changes["rho"] = rho
    if omega is not None:
        changes["omega"] = omega
    if gamma is not None:
        changes["gamma"] = gamma
    if seed is not None:
        changes["seed"] = seed
    if variant == "NN":
        changes.update(transfer=False, dropout_p=0.0, da_lambda=0.0)
    elif variant == "NN-DO":
        changes.update(transfer=False, dropout_p=base.dropout_p or 0.5, da_lambda=0.0)
    elif variant == "MSGTL":
        changes.update(transfer=True, dropout_p=0.0, da_lambda=0.0)
    elif variant == "MSGTL-R":
        changes.update(transfer=True, dropout_p=base.dropout_p or 0.5, da_lambda=0.0)
    elif variant == "MSGTL-DA":
        changes.update(transfer=True, dropout_p=0.0, da_lambda=base.da_lambda or DEFAULT_DA_LAMBDA)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return base.replace(**changes)


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

@dataclass
class Fold:
    index: int
    train_ids: np.ndarray
    test_ids: np.ndarray
    stages: List[Tuple[np.ndarray, np.ndarray]]   # per-stage (train rows, test rows)

    @property
    def empty_test_stages(self) -> List[int]:
        return [q for q, (_, te) in enumerate(self.stages) if te.size == 0]


def kfold_split(dataset: FunnelDataset, k: int, seed: int, allow_small: bool = False) -> List[Fold]:
    """Applicant-level folds, stratified by how far each applicant got.

    Assignment happens once on the first stage's ids and is propagated to
    every later stage, so an applicant is never in train at one stage and
    in test at another.  A stage with fewer than ``k`` rows is an error
    unless ``allow_small``; then its empty test sets are only reported.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    ids = dataset.ids
    if ids.size < k:
        raise ValueError(f"first stage has {ids.size} applicants, fewer than k={k}")
    if not allow_small:
        for q, st in enumerate(dataset.stages):
            if st.m < k:
                raise ValueError(f"stage {q} ({st.name}) has {st.m} rows, fewer than k={k}")
    reached = dataset.furthest_stage()
    rng = np.random.default_rng([seed, 0xF01D])
    assign: Dict[int, int] = {}
    counter = 0
    for level in sorted(set(reached.values()), reverse=True):
        members = np.array(sorted(i for i, r in reached.items() if r == level), dtype=np.int64)
        for i in rng.permutation(members):
            assign[int(i)] = counter % k
            counter += 1
    folds = []
    for f in range(k):
        test_ids = np.array(sorted(i for i, a in assign.items() if a == f), dtype=np.int64)
        train_ids = np.array(sorted(i for i, a in assign.items() if a != f), dtype=np.int64)
        stages = []
        for st in dataset.stages:
            is_test = np.array([assign[int(i)] == f for i in st.ids], dtype=bool)
            stages.append((np.flatnonzero(~is_test), np.flatnonzero(is_test)))
        folds.append(Fold(f, train_ids, test_ids, stages))
        for q in folds[-1].empty_test_stages:
            log.info("fold %d: stage %d has an empty test set", f, q)
    return folds


# --------------------------------------------------------------------------
# single runs
# --------------------------------------------------------------------------

class AccessLog:
    """Counts evaluation passes over guarded datasets."""

    def __init__(self):
        self.events: List[Tuple[str, str]] = []

    def record(self, name: str, what: str) -> None:
        self.events.append((name, what))

    def count(self, name: str) -> int:
        return sum(1 for n, _ in self.events if n == name)


def fit_registry(train: FunnelDataset, config: TrainConfig) -> Tuple[ModelRegistry, Dict[int, float]]:
    """Train every stage; a degenerate stage ends the chain (later stages missing)."""
    reg = None
    times: Dict[int, float] = {}
    stop = len(train) - 1
    for q in range(len(train)):
        st = train[q]
        if st.m == 0 or st.y.min() == st.y.max():
            stop = q - 1
            log.warning("stage %d (%s) has a single class in training; later stages skipped",
                        q, st.name)
            break
    if stop < 0:
        return ModelRegistry({}, {}, {}, {}), times
    t0 = time.perf_counter()
    reg = train_msgtl(train, config, stop=stop)
    total = time.perf_counter() - t0
    steps = {q: max(tr.steps, 1) for q, tr in reg.traces.items()}
    all_steps = sum(steps.values())
    for q in steps:
        times[q] = 1000.0 * total * steps[q] / all_steps
    return reg, times


def score_stages(reg: ModelRegistry, test: FunnelDataset, threshold: float
                 ) -> Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per stage: (ids, decisions, labels) for the test rows."""
    out = {}
    for q in reg.stages():
        st = test[q]
        if st.m == 0:
            out[q] = (st.ids, np.zeros(0, dtype=int), st.y)
            continue
        s = predict_scores(reg, q, st.X)
        out[q] = (st.ids, (s >= threshold).astype(int), st.y)
    return out


def _row(protocol, variant, cfg: TrainConfig, q, stage, seed, fold, metrics: Optional[MetricSet],
         n_train, n_test, runtime_ms) -> dict:
    return {
        "protocol": protocol, "variant": variant, "stage_name": stage.name, "stage_index": q,
        "rho": cfg.rho, "omega": cfg.omega, "gamma": cfg.gamma, "seed": seed, "fold": fold,
        "precision": None if metrics is None else metrics.precision,
        "recall": None if metrics is None else metrics.recall,
        "f1": None if metrics is None else metrics.f1,
        "n_train": n_train, "n_test": n_test, "runtime_ms": runtime_ms, "phase": stage.phase,
    }


def crossval_run(dataset: FunnelDataset, config: TrainConfig, k: int, variant: str = "MSGTL",
                 split_seed: Optional[int] = None, record_timing: bool = False) -> List[dict]:
    """k-fold cross-validation; one row per (fold, stage) plus pooled rows.

    Pooled rows (``fold == -1``) score the concatenated out-of-fold
    decisions, which is the stable estimate for tiny late stages.
    """
    seed = config.seed
    folds = kfold_split(dataset, k, seed if split_seed is None else split_seed)
    rows = []
    pooled: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = {q: [] for q in range(len(dataset))}
    trained_any: Dict[int, bool] = {q: False for q in range(len(dataset))}
    for fold in folds:
        train = dataset.subset(fold.train_ids)
        test = dataset.subset(fold.test_ids)
        reg, times = fit_registry(train, config)
        scored = score_stages(reg, test, config.threshold)
        for q, st in enumerate(dataset.stages):
            n_train, n_test = train[q].m, test[q].m
            if q in scored and n_test > 0:
                _, dec, y = scored[q]
                metrics = f1_positive(dec, y)
                pooled[q].append((dec, y))
                trained_any[q] = True
            else:
                metrics = None
            rt = round(times[q], 3) if record_timing and q in times else None
            rows.append(_row("crossval", variant, config, q, st, seed, fold.index, metrics,
                             n_train, n_test, rt))
    for q, st in enumerate(dataset.stages):
        if pooled[q]:
            dec = np.concatenate([d for d, _ in pooled[q]])
            y = np.concatenate([yy for _, yy in pooled[q]])
            metrics = f1_positive(dec, y)
            n_test = dec.size
        else:
            metrics, n_test = None, 0
        rows.append(_row("crossval", variant, config, q, st, seed, POOLED, metrics,
                         st.m, n_test, None))
    return rows


def longitudinal_run(train_cohort: FunnelDataset, validate_cohort: FunnelDataset,
                     config: TrainConfig, variant: str = "MSGTL",
                     access_log: Optional[AccessLog] = None,
                     record_timing: bool = False) -> List[dict]:
    """Train on one cohort, evaluate once on a later one.

    Model selection (early stopping) only sees the training cohort's inner
    split; the validation cohort is read exactly once, after training.
    """
    if len(train_cohort) != len(validate_cohort):
        raise ValueError("cohorts have different stage structures")
    for q, (a, b) in enumerate(zip(train_cohort.stages, validate_cohort.stages)):
        if a.columns != b.columns:
            raise ValueError(f"stage {q}: feature schemas differ between cohorts")
    reg, times = fit_registry(train_cohort, config)
    if access_log is not None:
        access_log.record("validate", "evaluation pass")
    scored = score_stages(reg, validate_cohort, config.threshold)
    rows = []
    for q, st in enumerate(validate_cohort.stages):
        if q in scored and st.m > 0:
            _, dec, y = scored[q]
            metrics = f1_positive(dec, y)
        else:
            metrics = None
        rt = round(times[q], 3) if record_timing and q in times else None
        rows.append(_row("longitudinal", variant, config, q, st, config.seed, 0, metrics,
                         train_cohort[q].m, st.m, rt))
    return rows


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

DatasetSource = Union[FunnelDataset, Callable[[int], FunnelDataset]]


def _resolve(source: Optional[DatasetSource], seed: int) -> Optional[FunnelDataset]:
    if source is None or isinstance(source, FunnelDataset):
        return source
    return source(seed)


def _run_task(task) -> List[dict]:
    variant, cfg, plan_protocol, folds, data, validate, seed, timing = task
    train = _resolve(data, seed)
    if plan_protocol == "crossval":
        return crossval_run(train, cfg, folds, variant, record_timing=timing)
    return longitudinal_run(train, _resolve(validate, seed), cfg, variant, record_timing=timing)


def sweep(dataset: DatasetSource, plan: ExperimentPlan,
          validate: Optional[DatasetSource] = None) -> List[dict]:
    """Full-factorial execution over variants, grid points and seeds.

    ``dataset`` (and ``validate`` for the longitudinal protocol) may be a
    fixed dataset or a callable mapping a seed to one.  A failing run is
    recorded as missing cells instead of aborting the sweep.
    """
    if plan.protocol == "longitudinal" and validate is None:
        raise ValueError("longitudinal protocol needs a validation cohort")
    tasks = []
    for variant in plan.all_variants():
        for rho, omega, gamma in plan.grid:
            for seed in plan.seeds:
                cfg = variant_config(variant, plan.base, rho, omega, gamma, seed)
                tasks.append((variant, cfg, plan.protocol, plan.folds, dataset, validate, seed,
                              plan.record_timing))
    results: List[Optional[List[dict]]] = [None] * len(tasks)
    if plan.jobs > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            futures = [pool.submit(_run_task, t) for t in tasks]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except Exception as exc:  # recorded as missing cells
                    log.error("run %d failed: %s", i, exc)
    else:
        for i, t in enumerate(tasks):
            try:
                results[i] = _run_task(t)
            except Exception as exc:
                log.error("run %d failed: %s", i, exc)
    rows = []
    for t, res in zip(tasks, results):
        if res is None:
            variant, cfg, protocol, _, data, _, seed, _ = t
            try:
                names = [(st.name, st.phase) for st in _resolve(data, seed).stages]
            except Exception:
                names = []
            for q, (name, phase) in enumerate(names):
                rows.append({**{c: None for c in RESULT_COLUMNS}, "protocol": protocol,
                             "variant": variant, "stage_name": name, "stage_index": q,
                             "rho": cfg.rho, "omega": cfg.omega, "gamma": cfg.gamma,
                             "seed": seed, "phase": phase})
        else:
            rows.extend(res)
    return rows


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def stage_f1(rows: Sequence[dict], variant: str, stage: int, *, rho=None, omega=None,
             gamma=None, protocol=None, pooled: bool = True) -> Dict[int, float]:
    """seed -> F1 at one stage (pooled rows for crossval, the single row otherwise)."""
    out: Dict[int, List[float]] = {}
    for r in rows:
        if r["variant"] != variant or r["stage_index"] != stage or r["f1"] is None:
            continue
        if protocol is not None and r["protocol"] != protocol:
            continue
        if rho is not None and r["rho"] != rho:
            continue
        if omega is not None and r["omega"] != omega:
            continue
        if gamma is not None and r["gamma"] != gamma:
            continue
        if r["protocol"] == "crossval" and (r["fold"] == POOLED) != pooled:
            continue
        out.setdefault(r["seed"], []).append(r["f1"])
    return {s: float(np.mean(v)) for s, v in out.items()}


def paired_wilcoxon_greater(a: Sequence[float], b: Sequence[float]) -> float:
    """One-sided p-value that ``a`` exceeds ``b`` (paired signed-rank test)."""
    from scipy.stats import wilcoxon
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if np.all(diff == 0):
        return 1.0
    return float(wilcoxon(a, b, alternative="greater").pvalue)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in RESULT_COLUMNS])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


_INT_COLS = {"stage_index", "omega", "gamma", "seed", "fold", "n_train", "n_test"}
_FLOAT_COLS = {"rho", "precision", "recall", "f1", "runtime_ms"}


def read_results_csv(path) -> List[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for c in RESULT_COLUMNS:
                v = rec.get(c, "NA")
                if v == "NA" or v is None:
                    row[c] = None
                elif c in _INT_COLS:
                    row[c] = int(v)
                elif c in _FLOAT_COLS:
                    row[c] = float(v)
                else:
                    row[c] = v
            rows.append(row)
    return rows


def _summary_rows(rows: Sequence[dict]) -> List[dict]:
    """Rows that enter the summary: pooled crossval rows when present."""
    has_pooled = {(r["protocol"], r["variant"]) for r in rows
                  if r["protocol"] == "crossval" and r["fold"] == POOLED}
    out = []
    for r in rows:
        if r["protocol"] == "crossval" and (r["protocol"], r["variant"]) in has_pooled:
            if r["fold"] != POOLED:
                continue
        out.append(r)
    return out


def _mean_sd(values: List[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(rows: Sequence[dict]) -> Tuple[str, List[List[str]]]:
    """Markdown table (stages x variants, mean +- sd of F1) and figure data."""
    rows = _summary_rows(rows)
    protocols = sorted({r["protocol"] for r in rows})
    variants = [v for v in VARIANTS if any(r["variant"] == v for r in rows)]
    variants += sorted({r["variant"] for r in rows} - set(variants))
    stages = sorted({(r["stage_index"], r["stage_name"], r["phase"] or "") for r in rows})
    lines = ["# Positive-class F1 by stage", ""]
    fig = [["protocol", "stage_index", "stage_name", "variant", "mean_f1", "sd_f1", "n"]]
    for protocol in protocols:
        lines += [f"## {protocol}", "", "| Stage | " + " | ".join(variants) + " |",
                  "|---|" + "---|" * len(variants)]
        for phase in sorted({p for _, _, p in stages}, key=lambda p: (p != "conversion", p)):
            block = [s for s in stages if s[2] == phase]
            title = phase.capitalize() if phase else "Stages"
            lines.append(f"| **{title} phase** |" + " |" * len(variants))
            block_means: Dict[str, List[float]] = {v: [] for v in variants}
            for q, name, _ in block:
                cells = []
                for v in variants:
                    vals = [r["f1"] for r in rows if r["protocol"] == protocol
                            and r["variant"] == v and r["stage_index"] == q]
                    got = [x for x in vals if x is not None]
                    if not vals:
                        cells.append("")
                        continue
                    if not got:
                        cells.append("NA")
                        fig.append([protocol, str(q), name, v, "NA", "NA", "0"])
                        continue
                    mean, sd = _mean_sd(got)
                    missing = len(vals) - len(got)
                    cells.append(f"{mean:.3f} ± {sd:.3f}" + (f" ({missing} NA)" if missing else ""))
                    block_means[v].append(mean)
                    fig.append([protocol, str(q), name, v, repr(mean), repr(sd), str(len(got))])
                lines.append(f"| {name} | " + " | ".join(cells) + " |")
            mean_cells = [f"{np.mean(block_means[v]):.3f}" if block_means[v] else "NA"
                          for v in variants]
            lines.append("| **MEAN** | " + " | ".join(mean_cells) + " |")
        lines.append("")
    return "\n".join(lines), fig


def report(rows: Sequence[dict], out_dir) -> List[Path]:
    """Write results.csv, summary.md and per-stage figure data."""
    if not rows:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_results_csv(rows, out / "results.csv")]
    text, fig = summarize(rows)
    (out / "summary.md").write_text(text, encoding="utf-8")
    paths.append(out / "summary.md")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(fig)
    (out / "fig_stage_f1.csv").write_text(buf.getvalue(), encoding="utf-8")
    paths.append(out / "fig_stage_f1.csv")
    paths += _sweep_figures(rows, out)
    return paths


def _sweep_figures(rows: Sequence[dict], out: Path) -> List[Path]:
    """rho curve and depth curve for the last stage, when the grid varies them."""
    rows = [r for r in _summary_rows(rows) if r["f1"] is not None]
    if not rows:
        return []
    last = max(r["stage_index"] for r in rows)
    final = [r for r in rows if r["stage_index"] == last]
    paths = []
    for key, fname in ((("rho",), "fig_rho.csv"), (("omega", "gamma"), "fig_depth.csv")):
        points = sorted({tuple(r[k] for k in key) for r in final})
        if len(points) < 2:
            continue
        table = [["variant", *key, "mean_f1", "sd_f1", "n"]]
        for v in sorted({r["variant"] for r in final}):
            for p in points:
                vals = [r["f1"] for r in final if r["variant"] == v
                        and tuple(r[k] for k in key) == p]
                if vals:
                    mean, sd = _mean_sd(vals)
                    table.append([v, *[repr(x) for x in p], repr(mean), repr(sd), str(len(vals))])
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(table)
        (out / fname).write_text(buf.getvalue(), encoding="utf-8")
        paths.append(out / fname)
    return paths
