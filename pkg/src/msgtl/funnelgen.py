"""Synthetic dual-funnel datasets and stage-aligned CSV ingestion.

Each applicant has a latent quality ``z ~ N(0, 1)`` (and an optional second
trait ``u``).  Every stage adds feature columns of the form
``a * z * sign + (1 - a) * noise`` with ``a`` the stage's informativeness,
plus one-hot categorical blocks.  Wide blocks can draw their noise from a
few shared factors, which is how embedding columns behave.

A stage's decision ranks the current pool by ``z`` plus stage noise and
passes the top ``survival_rate`` share, so stage ``q`` holds fewer rows but
more columns than stage ``q - 1``.  The label of a row is 1 when the
applicant advanced past that stage.

``drift`` only touches later cohorts: cohort ``c`` sees every numeric
feature mean shifted by ``drift * c`` (random sign per column) and its
noise scaled by ``1 + drift * c``.
"""
from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)


class FunnelConfigError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    name: str
    new_features: int
    survival_rate: float
    informativeness: float
    categorical: Tuple[int, ...] = ()
    stage_noise: float = 1.0
    phase: str = "conversion"
    feature_focus: float = 0.0      # weight of the second trait in this stage's features
    decision_focus: float = 0.0     # weight of the second trait in this stage's decision
    noise_rank: int = 0             # >0: noise shared through this many factors (embedding-like)

    @property
    def n_columns(self) -> int:
        return self.new_features + sum(self.categorical)


@dataclass
class FunnelConfig:
    stages: List[StageSpec]
    m0: int = 10000
    drift: float = 0.0
    noise: float = 1.0
    seed: int = 0
    cohort: int = 0

    def validate(self) -> None:
        if len(self.stages) < 2:
            raise FunnelConfigError("a funnel needs at least 2 stages")
        if self.m0 < 100:
            raise FunnelConfigError(f"m0 must be at least 100, got {self.m0}")
        if self.drift < 0 or self.noise < 0:
            raise FunnelConfigError("drift and noise must be non-negative")
        for s in self.stages:
            if not 0.0 < s.survival_rate <= 1.0:
                raise FunnelConfigError(f"{s.name}: survival rate {s.survival_rate} not in (0, 1]")
            if not 0.0 <= s.informativeness <= 1.0:
                raise FunnelConfigError(f"{s.name}: informativeness not in [0, 1]")
            if not (0.0 <= s.feature_focus <= 1.0 and 0.0 <= s.decision_focus <= 1.0):
                raise FunnelConfigError(f"{s.name}: trait focus not in [0, 1]")
            if s.noise_rank < 0:
                raise FunnelConfigError(f"{s.name}: noise rank must be non-negative")
            if s.new_features < 0 or any(c < 2 for c in s.categorical):
                raise FunnelConfigError(f"{s.name}: bad feature block sizes")
            if s.n_columns < 1:
                raise FunnelConfigError(f"{s.name}: stage adds no columns")

    def replace(self, **changes) -> "FunnelConfig":
        values = dict(stages=list(self.stages), m0=self.m0, drift=self.drift,
                      noise=self.noise, seed=self.seed, cohort=self.cohort)
        values.update(changes)
        return FunnelConfig(**values)


@dataclass
class StageData:
    name: str
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    n_new: int
    columns: List[str]
    phase: str = "conversion"

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def subset(self, ids) -> "StageData":
        keep = np.isin(self.ids, ids)
        return StageData(self.name, self.X[keep], self.y[keep], self.ids[keep],
                         self.n_new, self.columns, self.phase)


@dataclass
class FunnelDataset:
    stages: List[StageData]
    cohort: int = 0
    prep: Optional[list] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, q: int) -> StageData:
        return self.stages[q]

    @property
    def ids(self) -> np.ndarray:
        return self.stages[0].ids

    def subset(self, ids) -> "FunnelDataset":
        return FunnelDataset([s.subset(ids) for s in self.stages], self.cohort, self.prep)

    def furthest_stage(self) -> Dict[int, int]:
        """Applicant id -> number of stages passed (len(stages) means selected)."""
        reached = {int(i): 0 for i in self.ids}
        for q, st in enumerate(self.stages):
            for i, yy in zip(st.ids, st.y):
                if yy == 1:
                    reached[int(i)] = q + 1
        return reached

    def summary(self) -> List[Tuple[str, int, int, float]]:
        return [(s.name, s.m, s.n, float(s.y.mean()) if s.m else float("nan"))
                for s in self.stages]


def check_invariants(ds: FunnelDataset) -> None:
    """Raise DatasetValidationError on any subset or prefix violation."""
    for q in range(1, len(ds.stages)):
        prev, cur = ds.stages[q - 1], ds.stages[q]
        pos = {int(i): r for r, i in enumerate(prev.ids)}
        for r, i in enumerate(cur.ids):
            if int(i) not in pos:
                raise DatasetValidationError(
                    f"stage {q} ({cur.name}) row {r}: id {int(i)} absent from stage {q - 1}")
        if cur.n < prev.n or cur.columns[:prev.n] != prev.columns:
            raise DatasetValidationError(
                f"stage {q} ({cur.name}): columns do not extend stage {q - 1}")
        rows = np.array([pos[int(i)] for i in cur.ids], dtype=np.int64)
        shared_prev = prev.X[rows]
        diff = shared_prev != cur.X[:, :prev.n]
        if diff.any():
            r, c = map(int, np.argwhere(diff)[0])
            raise DatasetValidationError(
                f"stage {q} ({cur.name}) row {r} (id {int(cur.ids[r])}), column {c} "
                f"({cur.columns[c]!r}): {cur.X[r, c]!r} differs from stage {q - 1} "
                f"value {shared_prev[r, c]!r}")
        advanced = set(int(i) for i, yy in zip(prev.ids, prev.y) if yy == 1)
        if advanced != set(int(i) for i in cur.ids):
            raise DatasetValidationError(
                f"stage {q} ({cur.name}): rows differ from the applicants who passed stage {q - 1}")


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


_RESIDUAL = 0.1   # isotropic share of the noise variance in low-rank blocks


def generate(config: FunnelConfig) -> FunnelDataset:
    """Draw a cohort of applicants and run them through the funnel.

    Structural choices (feature signs, drift directions, category orderings)
    depend on ``seed`` only, so cohorts generated with the same seed share
    one feature schema and differ in their applicants and drift.
    """
    config.validate()
    structure = np.random.default_rng([config.seed, 0x5EED])
    sample = np.random.default_rng([config.seed, 0xC0, config.cohort])
    m0 = config.m0
    c = config.cohort
    noise_scale = config.noise * (1.0 + config.drift * c)
    z = sample.standard_normal(m0)
    u = sample.standard_normal(m0)

    def trait(focus: float) -> np.ndarray:
        # unit-variance mix of the two independent traits
        return z if focus == 0.0 else np.sqrt(1.0 - focus ** 2) * z + focus * u

    ids = np.arange(m0, dtype=np.int64)
    alive = np.ones(m0, dtype=bool)
    blocks: List[np.ndarray] = []
    columns: List[str] = []
    stages: List[StageData] = []
    for q, spec in enumerate(config.stages):
        a = spec.informativeness
        slug = _slug(spec.name)
        signs = structure.choice([-1.0, 1.0], size=spec.new_features)
        shift_dir = structure.choice([-1.0, 1.0], size=spec.new_features)
        perms = [structure.permutation(k) for k in spec.categorical]
        loadings = (structure.standard_normal((spec.noise_rank, spec.new_features))
                    / np.sqrt(spec.noise_rank) if spec.noise_rank else None)
        zf = trait(spec.feature_focus)
        eps = sample.standard_normal((m0, spec.new_features))
        if loadings is not None:
            # mostly low-rank noise with a small isotropic residual
            shared = sample.standard_normal((m0, spec.noise_rank)) @ loadings
            eps = np.sqrt(1.0 - _RESIDUAL) * shared + np.sqrt(_RESIDUAL) * eps
        num = a * zf[:, None] * signs + (1.0 - a) * noise_scale * eps
        num += config.drift * c * shift_dir
        cols = [num]
        names = [f"{slug}_{j}" for j in range(spec.new_features)]
        for b, (k, perm) in enumerate(zip(spec.categorical, perms)):
            latent = a * zf + (1.0 - a) * noise_scale * sample.standard_normal(m0)
            edges = np.quantile(latent, np.linspace(0, 1, k + 1)[1:-1])
            cat = perm[np.searchsorted(edges, latent)]
            cols.append(np.eye(k)[cat])
            names += [f"{slug}_cat{b}_{v}" for v in range(k)]
        blocks.append(np.hstack(cols))
        columns = columns + names

        members = np.flatnonzero(alive)
        # decisions are relative to the current pool: noise scales with its spread
        zm = trait(spec.decision_focus)[members]
        spread = float(zm.std()) if members.size > 1 else 1.0
        score = zm + spec.stage_noise * spread * sample.standard_normal(members.size)
        n_pass = int(round(spec.survival_rate * members.size))
        order = np.argsort(-score, kind="stable")
        passed = np.zeros(members.size, dtype=np.int8)
        passed[order[:n_pass]] = 1
        X = np.hstack(blocks)[members]
        stages.append(StageData(spec.name, X, passed, ids[members].copy(),
                                spec.n_columns, list(columns), spec.phase))
        alive[members[passed == 0]] = False
    return FunnelDataset(stages, cohort=c)


def _stage(name, new, surv, info, cat=(), noise=1.0, phase="conversion", ff=0.0, df=0.0, rank=0):
    return StageSpec(name, new, surv, info, tuple(cat), noise, phase, ff, df, rank)


def paper_like_config(seed: int = 0, m0: int = 10000, drift: float = 0.3,
                      cohort: int = 0) -> FunnelConfig:
    """Twelve stages shaped like a fellowship selection process.

    Seven self-service conversion stages with mild filtering, two of which
    add 300-wide embedding-like blocks, then five evaluation stages that
    bring 10**4 applicants down to about 25 in the last stage.
    """
    stages = [
        _stage("Demographics", 3, 0.75, 0.50, cat=(8,), noise=0.8),
        _stage("Payment", 1, 0.75, 0.40, cat=(3,), noise=0.8),
        _stage("Education", 10, 0.80, 0.50, cat=(6,), noise=0.7),
        _stage("Profile Tests", 20, 0.80, 0.45, noise=0.7),
        _stage("Star", 300, 0.80, 0.15, noise=0.6, rank=8),
        _stage("Logic Tests", 10, 0.85, 0.60, noise=0.6),
        _stage("Video Submission", 300, 0.85, 0.15, noise=0.6, rank=8),
        _stage("Video Evaluation", 4, 0.25, 0.50, noise=0.5, phase="evaluation"),
        _stage("Interview", 4, 0.35, 0.50, noise=0.5, phase="evaluation"),
        _stage("Panel", 4, 0.35, 0.50, noise=0.5, phase="evaluation"),
        _stage("Committee", 2, 0.40, 0.50, noise=0.5, phase="evaluation"),
        _stage("Final", 2, 0.30, 0.50, noise=0.5, phase="evaluation"),
    ]
    return FunnelConfig(stages, m0=m0, drift=drift, seed=seed, cohort=cohort)


def minimal_config(n_stages: int = 2, seed: int = 0, m0: int = 1000, drift: float = 0.0,
                   cohort: int = 0) -> FunnelConfig:
    """Small funnel: a few features per stage, halving survival."""
    stages = [_stage(f"Stage {q}", 3 + 2 * q, 0.5, 0.5, noise=0.8,
                     phase="conversion" if q < n_stages // 2 else "evaluation")
              for q in range(n_stages)]
    return FunnelConfig(stages, m0=m0, drift=drift, seed=seed, cohort=cohort)


PRESETS = {"paper-like": paper_like_config, "minimal": minimal_config}


# --------------------------------------------------------------------------
# feature preparation
# --------------------------------------------------------------------------

@dataclass
class ColumnPrep:
    name: str
    kind: str                       # "numeric" or "categorical"
    mean: float = 0.0
    sd: float = 1.0
    categories: Tuple[str, ...] = ()

    def output_names(self) -> List[str]:
        if self.kind == "numeric":
            return [self.name]
        return [f"{self.name}={c}" for c in self.categories]


def fit_features(table: Dict[str, Sequence[str]], schema: Dict[str, str]) -> List[ColumnPrep]:
    preps = []
    for name, kind in schema.items():
        values = table[name]
        if kind == "categorical":
            preps.append(ColumnPrep(name, kind, categories=tuple(sorted(set(values)))))
        elif kind == "numeric":
            x = _to_float(values, name)
            sd = float(x.std())
            if sd == 0.0:
                log.warning("column %r has zero variance; it will be scaled to 0", name)
            preps.append(ColumnPrep(name, kind, mean=float(x.mean()), sd=sd))
        else:
            raise DatasetValidationError(f"column {name!r}: unknown kind {kind!r}")
    return preps


def apply_features(table: Dict[str, Sequence[str]], preps: List[ColumnPrep]) -> Tuple[np.ndarray, List[str]]:
    n_rows = len(next(iter(table.values()))) if table else 0
    blocks, names = [], []
    for p in preps:
        values = table[p.name]
        if p.kind == "numeric":
            x = _to_float(values, p.name)
            blocks.append(((x - p.mean) / p.sd if p.sd > 0 else np.zeros_like(x))[:, None])
        else:
            index = {c: k for k, c in enumerate(p.categories)}
            onehot = np.zeros((n_rows, len(p.categories)))
            for r, v in enumerate(values):
                k = index.get(v)
                if k is not None:
                    onehot[r, k] = 1.0
            blocks.append(onehot)
        names += p.output_names()
    X = np.hstack(blocks) if blocks else np.zeros((n_rows, 0))
    return X, names


def prepare_features(table: Dict[str, Sequence[str]], schema: Dict[str, str],
                     fitted: Optional[List[ColumnPrep]] = None):
    """One-hot categorical columns and z-score numeric ones.

    Statistics come from ``fitted`` when given (apply-time), otherwise they
    are fitted on ``table`` itself.  Returns ``(X, names, fitted)``.
    """
    preps = fitted if fitted is not None else fit_features(table, schema)
    X, names = apply_features(table, preps)
    return X, names, preps


def _to_float(values: Sequence[str], name: str) -> np.ndarray:
    out = np.empty(len(values))
    for r, v in enumerate(values):
        try:
            out[r] = float(v)
        except (TypeError, ValueError):
            raise DatasetValidationError(f"column {name!r} row {r}: non-numeric value {v!r}") from None
    return out


# --------------------------------------------------------------------------
# manifest + CSV I/O
# --------------------------------------------------------------------------

def read_manifest(path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Parse ``key = value`` lines; each ``[stage]`` header opens a stage."""
    header: Dict[str, str] = {}
    stages: List[Dict[str, str]] = []
    current = header
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[stage]":
            current = {}
            stages.append(current)
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetValidationError(f"{path}:{lineno}: expected 'key = value'")
        current[key.strip()] = value.strip().strip('"')
    return header, stages


def _read_csv(path: Path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetValidationError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader]
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise DatasetValidationError(
                f"{path} line {k + 2}: {len(r)} fields, header has {len(header)}")
    return header, rows


def _read_schema(path: Path) -> Dict[str, str]:
    schema = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            schema[k.strip()] = v.strip().strip('"')
    return schema


def load_stage_csv(manifest_path, fitted: Optional[list] = None) -> FunnelDataset:
    """Load and validate a stage-aligned dataset described by a manifest.

    Raw feature columns of stage ``q`` must start with those of stage
    ``q - 1`` and agree with them for every shared applicant.  With a schema
    the new columns of each stage are prepared (one-hot / z-score); without
    one they are read as numbers.  ``fitted`` carries the preparation state
    of another cohort (``FunnelDataset.prep``) so a validation cohort is
    encoded exactly like the training one.
    """
    manifest_path = Path(manifest_path)
    header, specs = read_manifest(manifest_path)
    if not specs:
        raise DatasetValidationError(f"{manifest_path}: no [stage] entries")
    base = manifest_path.parent
    stages: List[StageData] = []
    preps_out: list = []
    prev_raw: List[str] = []
    prev_table: Dict[str, List[str]] = {}
    prev_pos: Dict[int, int] = {}
    for q, spec in enumerate(specs):
        for key in ("name", "csv", "id_column", "label_column"):
            if key not in spec:
                raise DatasetValidationError(f"{manifest_path}: stage {q} is missing {key!r}")
        csv_path = base / spec["csv"]
        cols, rows = _read_csv(csv_path)
        id_col, label_col = spec["id_column"], spec["label_column"]
        for needed in (id_col, label_col):
            if needed not in cols:
                raise DatasetValidationError(f"{csv_path}: missing column {needed!r}")
        table = {c: [r[k] for r in rows] for k, c in enumerate(cols)}
        ids = np.empty(len(rows), dtype=np.int64)
        for r, v in enumerate(table[id_col]):
            try:
                ids[r] = int(v)
            except ValueError:
                raise DatasetValidationError(
                    f"{csv_path} row {r}: id {v!r} is not an integer") from None
        if np.unique(ids).size != ids.size:
            raise DatasetValidationError(f"{csv_path}: duplicate applicant ids")
        labels = _to_float(table[label_col], label_col)
        if not np.isin(labels, (0.0, 1.0)).all():
            r = int(np.flatnonzero(~np.isin(labels, (0.0, 1.0)))[0])
            raise DatasetValidationError(f"{csv_path} row {r}: label {table[label_col][r]!r} not 0/1")
        raw = [c for c in cols if c not in (id_col, label_col)]
        if raw[:len(prev_raw)] != prev_raw:
            raise DatasetValidationError(
                f"{csv_path}: feature columns must start with the previous stage's columns")
        if q > 0:
            for r, i in enumerate(ids):
                if int(i) not in prev_pos:
                    raise DatasetValidationError(
                        f"stage {q} ({spec['name']}) row {r}: id {int(i)} absent from "
                        f"stage {q - 1} ({stages[-1].name})")
            for c in prev_raw:
                for r, i in enumerate(ids):
                    old = prev_table[c][prev_pos[int(i)]]
                    if table[c][r] != old:
                        raise DatasetValidationError(
                            f"stage {q} ({spec['name']}) row {r} (id {int(i)}), column {c!r}: "
                            f"{table[c][r]!r} differs from stage {q - 1} value {old!r}")
        new_cols = raw[len(prev_raw):]
        if "schema" in spec:
            schema = _read_schema(base / spec["schema"])
            unknown = [c for c in new_cols if c not in schema]
            if unknown:
                raise DatasetValidationError(f"{csv_path}: columns {unknown} have no schema entry")
            new_schema = {c: schema[c] for c in new_cols}
            X_new, names, preps = prepare_features(
                {c: table[c] for c in new_cols}, new_schema,
                fitted[q] if fitted is not None else None)
        else:
            X_new = (np.column_stack([_to_float(table[c], c) for c in new_cols])
                     if new_cols else np.zeros((len(rows), 0)))
            names, preps = list(new_cols), None
        preps_out.append(preps)
        if not np.isfinite(X_new).all():
            r, c = map(int, np.argwhere(~np.isfinite(X_new))[0])
            raise DatasetValidationError(f"{csv_path} row {r}, column {names[c]!r}: non-finite value")
        if q > 0:
            prev = stages[-1]
            X_old = prev.X[[prev_pos[int(i)] for i in ids]]
            X = np.hstack([X_old, X_new])
            columns = prev.columns + names
        else:
            X, columns = X_new, names
        order = np.argsort(ids, kind="stable")
        st = StageData(spec["name"], X[order], labels[order].astype(np.int8), ids[order],
                       len(names), list(columns), spec.get("phase", "conversion"))
        stages.append(st)
        prev_raw = raw
        prev_table = {c: [table[c][k] for k in order] for c in raw}
        prev_pos = {int(i): r for r, i in enumerate(st.ids)}
    return FunnelDataset(stages, cohort=int(header.get("cohort", 0)), prep=preps_out)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def export_dataset(ds: FunnelDataset, out_dir) -> Path:
    """Write one CSV per stage plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"cohort = {ds.cohort}", ""]
    for q, st in enumerate(ds.stages):
        fname = f"stage_{q:02d}_{_slug(st.name)}.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["applicant_id", "label"] + st.columns)
        for i, yy, row in zip(st.ids, st.y, st.X):
            w.writerow([int(i), int(yy)] + [_fmt_float(v) for v in row])
        (out / fname).write_text(buf.getvalue(), encoding="utf-8")
        lines += ["[stage]", f'name = "{st.name}"', f"csv = {fname}",
                  "id_column = applicant_id", "label_column = label", f"phase = {st.phase}", ""]
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines), encoding="utf-8")
    return manifest
