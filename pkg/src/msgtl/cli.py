"""Command-line front end: gen-data, train, eval, sweep, report.

Every command writes ``run_manifest.txt`` into its output directory before
it starts and finalizes it afterwards.  The ``[config]`` section of that
file lists every resolved flag, so ``msgtl <command> --config
run_manifest.txt`` repeats the run.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import evalharness as H
from .engine import TrainConfig
from .funnelgen import (PRESETS, DatasetValidationError, FunnelConfigError, FunnelDataset,
                        export_dataset, generate, load_stage_csv)
from .pipeline import DegenerateStageError, predict_scores, train_msgtl
from .registry_io import save_registry

log = logging.getLogger("msgtl")

EXIT_OK, EXIT_USAGE, EXIT_ASSERT = 0, 1, 2
MANIFEST_NAME = "run_manifest.txt"
REGISTRY_NAME = "registry.msgt"

VARIANT_FLAGS = {"nn": "NN", "nn-do": "NN-DO", "msgtl": "MSGTL", "msgtl-r": "MSGTL-R",
                 "msgtl-da": "MSGTL-DA"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# flags
# --------------------------------------------------------------------------

def _add_data_source(p, allow_validate: bool = False):
    p.add_argument("--data", help="dataset manifest.txt (default: generate from --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper-like",
                   help="generated funnel when --data is absent (default: %(default)s)")
    p.add_argument("--stages", type=int, default=2,
                   help="stage count for the minimal preset (default: %(default)s)")
    p.add_argument("--m0", type=int, default=None, help="initial population (preset default)")
    p.add_argument("--drift", type=float, default=0.3, help="cohort drift (default: %(default)s)")
    if allow_validate:
        p.add_argument("--validate", help="validation cohort manifest for the longitudinal "
                                          "protocol (default: next generated cohort)")


def _expand(text: str, kind) -> list:
    """Comma list; ``a,b,...,c`` expands to the arithmetic run a, b, ..., c."""
    parts = [x.strip() for x in text.split(",") if x.strip()]
    if "..." not in parts:
        return [kind(x) for x in parts]
    k = parts.index("...")
    if k != 2 or len(parts) != 4:
        raise ValueError(f"range must look like a,b,...,c: {text!r}")
    a, b, c = (float(parts[0]), float(parts[1]), float(parts[3]))
    step = b - a
    if step == 0 or (c - a) / step < 0:
        raise ValueError(f"range does not reach its end: {text!r}")
    n = int(round((c - a) / step))
    if abs(a + n * step - c) > 1e-9 * max(1.0, abs(c)):
        raise ValueError(f"range end is not on the step grid: {text!r}")
    # round to the step's precision so 0.1 steps give 0.3, not 0.30000000000000004
    digits = max(len(p.partition(".")[2]) for p in (parts[0], parts[1], parts[3]))
    return [kind(round(a + i * step, digits)) for i in range(n + 1)]


def _float_list(text: str) -> List[float]:
    return _expand(text, float)


def _int_list(text: str) -> List[int]:
    return _expand(text, int)


def _add_training(p, grid: bool = False):
    """Training flags; with ``grid`` rho/omega/gamma take comma lists."""
    d = TrainConfig()
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default="msgtl",
                   help="model variant (default: %(default)s)")
    if grid:
        p.add_argument("--rho", type=_float_list, default=[d.rho],
                       help="comma list of mask keep rates (default: %(default)s)")
        p.add_argument("--omega", type=_int_list, default=[d.omega],
                       help="comma list of max depths (default: %(default)s)")
        p.add_argument("--gamma", type=_int_list, default=[d.gamma],
                       help="comma list of bottleneck widths (default: %(default)s)")
    else:
        p.add_argument("--rho", type=float, default=d.rho,
                       help="mask keep rate (default: %(default)s)")
        p.add_argument("--omega", type=int, default=d.omega, help="max depth (default: %(default)s)")
        p.add_argument("--gamma", type=int, default=d.gamma,
                       help="bottleneck width (default: %(default)s)")
    p.add_argument("--eta0", type=float, default=d.eta0, help="initial step size (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=d.epochs, help="max epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="(default: %(default)s)")
    p.add_argument("--dropout", type=float, default=None,
                   help="dropout rate (default: set by the variant)")
    p.add_argument("--da-lambda", type=float, default=None,
                   help="adversarial weight (default: set by the variant)")
    p.add_argument("--patience", type=int, default=d.patience, help="(default: %(default)s)")
    p.add_argument("--val-fraction", type=float, default=d.val_fraction, help="(default: %(default)s)")
    p.add_argument("--threshold", type=float, default=d.threshold, help="(default: %(default)s)")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=d.optimizer,
                   help="(default: %(default)s)")
    p.add_argument("--shared-mask", action="store_true", help="use pf as pb (default: off)")
    p.add_argument("--prev-score-feature", action="store_true",
                   help="feed previous-stage scores as an input (default: off)")


def _add_common(p):
    p.add_argument("--config", help="key = value file with flag values (CLI flags win)")
    p.add_argument("--seed", type=int, default=0, help="seed; MSGTL_SEED overrides the config "
                                                       "file and default (default: %(default)s)")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")


def build_parser() -> _Parser:
    parser = _Parser(prog="msgtl", description="Multi-stage transfer learning toolkit.")
    parser.add_argument("--version", action="version", version=f"msgtl {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="(default: %(default)s)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic funnel and write stage CSVs")
    _add_common(g)
    g.add_argument("--preset", choices=sorted(PRESETS), default="paper-like",
                   help="(default: %(default)s)")
    g.add_argument("--stages", type=int, default=2,
                   help="stage count for the minimal preset (default: %(default)s)")
    g.add_argument("--m0", type=int, default=None, help="initial population (preset default)")
    g.add_argument("--drift", type=float, default=0.3, help="(default: %(default)s)")
    g.add_argument("--noise", type=float, default=1.0, help="(default: %(default)s)")
    g.add_argument("--cohort", type=int, default=0, help="cohort index (default: %(default)s)")

    t = sub.add_parser("train", help="train one network per stage and save the registry")
    _add_common(t)
    _add_data_source(t)
    _add_training(t)
    t.add_argument("--start", type=int, default=0, help="first stage (default: %(default)s)")
    t.add_argument("--stop", type=int, default=None, help="last stage (default: the final one)")

    e = sub.add_parser("eval", help="cross-validation or longitudinal evaluation")
    _add_common(e)
    _add_data_source(e, allow_validate=True)
    _add_training(e)
    e.add_argument("--protocol", choices=H.PROTOCOLS, default="crossval",
                   help="(default: %(default)s)")
    e.add_argument("--folds", type=int, default=10, help="(default: %(default)s)")
    e.add_argument("--timing", action="store_true", help="record runtime_ms (default: off)")
    e.add_argument("--assert-min-f1", type=float, default=None, dest="assert_min_f1",
                   help="exit 2 unless mean evaluation-phase F1 reaches this value")

    s = sub.add_parser("sweep", help="grid over rho/omega/gamma, seeds and variants")
    _add_common(s)
    _add_data_source(s, allow_validate=True)
    _add_training(s, grid=True)
    s.add_argument("--depth-pairs", default=None,
                   help="explicit omega:gamma pairs, e.g. 4:8,6:2 (replaces the omega x gamma "
                        "product)")
    s.add_argument("--variants", default=None, help="comma list of variants (default: --variant)")
    s.add_argument("--seeds", default="1",
                   help="N for seeds seed..seed+N-1, or a comma list (default: %(default)s)")
    s.add_argument("--protocol", choices=H.PROTOCOLS, default="crossval",
                   help="(default: %(default)s)")
    s.add_argument("--folds", type=int, default=10, help="(default: %(default)s)")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs (default: %(default)s)")
    s.add_argument("--timing", action="store_true", help="record runtime_ms (default: off)")
    s.add_argument("--assert-min-f1", type=float, default=None, dest="assert_min_f1",
                   help="exit 2 unless every variant's mean evaluation-phase F1 reaches this")

    r = sub.add_parser("report", help="summary.md and figure data from results.csv")
    _add_common(r)
    r.add_argument("--in", dest="inp", required=True, help="results.csv")
    return parser


# --------------------------------------------------------------------------
# config file and manifest
# --------------------------------------------------------------------------

def _dests(parser: argparse.ArgumentParser) -> Dict[str, argparse.Action]:
    out = {}
    for action in parser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                out[opt[2:].replace("-", "_")] = action
    return out


def read_config(path, sub: argparse.ArgumentParser) -> List[str]:
    """Turn a ``key = value`` file into argv tokens for ``sub``.

    Lines before any section header and lines in ``[config]`` are flags;
    other sections (the manifest's ``[run]`` block) are ignored.  Unknown
    keys are errors.
    """
    actions = _dests(sub)
    argv: List[str] = []
    section = "config"
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if section != "config":
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip().replace("-", "_")
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] == '"':
            value = value[1:-1]
        if key in ("config",) or key not in actions:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        action = actions[key]
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false"):
                raise UsageError(f"{path}:{lineno}: {key} must be true or false")
            if value.lower() == "true":
                argv.append(flag)
        elif value.lower() in ("none", "na", ""):
            continue
        else:
            argv.append(f"{flag}={value}")
    return argv


def _config_items(args: argparse.Namespace, sub: argparse.ArgumentParser) -> List[tuple]:
    skip = {"config", "help"}
    return [(a.dest, getattr(args, a.dest)) for a in sub._actions
            if a.option_strings and a.dest not in skip]


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    return f'"{v}"'


class RunManifest:
    """Record of one command: resolved flags, seed, artifacts, timing."""

    def __init__(self, command: str, config: List[tuple], seed: int, out_dir: Path):
        self.command = command
        self.config = config
        self.seed = seed
        self.path = out_dir / MANIFEST_NAME
        self.artifacts: List[str] = []
        self.started = time.time()
        self.status = "running"
        self.wall_clock = None

    def text(self) -> str:
        lines = ["# msgtl run manifest; replay with: msgtl "
                 f"{self.command} --config {MANIFEST_NAME}", "",
                 "[run]",
                 f'command = "{self.command}"',
                 f'tool_version = "{__version__}"',
                 f"seed = {self.seed}",
                 f'status = "{self.status}"',
                 f"started = {self.started!r}",
                 f"wall_clock_s = {_fmt(self.wall_clock)}",
                 f'artifacts = "{",".join(self.artifacts)}"',
                 "", "[config]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.config]
        return "\n".join(lines) + "\n"

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(self.text(), encoding="utf-8")

    def finalize(self, status: str, artifacts: Sequence[Path]) -> None:
        self.status = status
        self.artifacts = [Path(a).name for a in artifacts]
        self.wall_clock = round(time.time() - self.started, 3)
        self.write()


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _funnel_config(args, seed: int, cohort: int = 0):
    maker = PRESETS[args.preset]
    kw = dict(seed=seed, drift=args.drift, cohort=cohort)
    if args.m0 is not None:
        kw["m0"] = args.m0
    if args.preset == "minimal":
        kw["n_stages"] = args.stages
    return maker(**kw)


def _dataset_source(args):
    """(train source, validation source): fixed datasets or per-seed generators."""
    if args.data:
        train = load_stage_csv(args.data)
        val = None
        if getattr(args, "validate", None):
            val = load_stage_csv(args.validate, fitted=train.prep)
        return train, val
    if getattr(args, "validate", None):
        raise UsageError("--validate needs --data")
    train = lambda seed: generate(_funnel_config(args, seed, 0))  # noqa: E731
    val = lambda seed: generate(_funnel_config(args, seed, 1))  # noqa: E731
    return train, val


def _first(v):
    return v[0] if isinstance(v, list) else v


def _base_config(args, seed: int) -> TrainConfig:
    return TrainConfig(rho=_first(args.rho), gamma=_first(args.gamma), omega=_first(args.omega),
                       eta0=args.eta0,
                       epochs=args.epochs, batch_size=args.batch_size,
                       dropout_p=args.dropout if args.dropout is not None else 0.0,
                       da_lambda=args.da_lambda if args.da_lambda is not None else 0.0,
                       shared_mask=args.shared_mask, prev_score_feature=args.prev_score_feature,
                       optimizer=args.optimizer, patience=args.patience,
                       val_fraction=args.val_fraction, threshold=args.threshold, seed=seed)


def print_funnel(ds: FunnelDataset, out=None) -> None:
    out = out or sys.stdout
    print(f"{'q':>3}  {'stage':<20} {'m':>7} {'n':>5}  {'pos':>6}  phase", file=out)
    for q, (name, m, n, pos) in enumerate(ds.summary()):
        bar = "#" * max(1, int(round(30 * m / max(ds[0].m, 1))))
        print(f"{q:>3}  {name:<20} {m:>7} {n:>5}  {pos:>6.3f}  {ds[q].phase:<10} {bar}", file=out)


def _csv_list(text: str, kind) -> List:
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad list {text!r}") from None


def _seed_list(text: str, base: int) -> List[int]:
    if "," in text:
        return _csv_list(text, int)
    n = int(text)
    if n < 1:
        raise UsageError("--seeds must be positive")
    return list(range(base, base + n))


def _check_min_f1(rows, bound: Optional[float]) -> bool:
    """True when every (variant, grid point) reaches ``bound`` on evaluation stages."""
    if bound is None:
        return True
    groups: Dict[tuple, List[float]] = {}
    for r in rows:
        if r["phase"] != "evaluation":
            continue
        if r["protocol"] == "crossval" and r["fold"] != H.POOLED:
            continue
        key = (r["variant"], r["rho"], r["omega"], r["gamma"])
        groups.setdefault(key, []).append(np.nan if r["f1"] is None else r["f1"])
    ok = True
    for key, vals in sorted(groups.items()):
        mean = float(np.mean(vals))
        passed = bool(np.isfinite(mean) and mean >= bound)
        ok &= passed
        print(f"assert {'PASS' if passed else 'FAIL'} {key}: evaluation-phase mean F1 "
              f"{mean:.4f} (bound {bound})")
    return ok and bool(groups)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args, out: Path) -> List[Path]:
    cfg = _funnel_config(args, args.seed, args.cohort)
    if args.noise != 1.0:
        cfg = cfg.replace(noise=args.noise)
    ds = generate(cfg)
    manifest = export_dataset(ds, out)
    print_funnel(ds)
    files = sorted(out.glob("stage_*.csv"))
    return [manifest] + files


def cmd_train(args, out: Path) -> List[Path]:
    source, _ = _dataset_source(args)
    ds = source if isinstance(source, FunnelDataset) else source(args.seed)
    variant = VARIANT_FLAGS[args.variant]
    base = _base_config(args, args.seed)
    cfg = H.variant_config(variant, base, args.rho, args.omega, args.gamma, args.seed)
    reg = train_msgtl(ds, cfg, start=args.start, stop=args.stop)
    print(f"{'q':>3}  {'stage':<20} {'m':>6} {'n':>5} {'epochs':>6} {'loss':>8} {'val':>8} "
          f"{'F1':>6}")
    for q in reg.stages():
        st, tr = ds[q], reg.traces[q]
        f1 = H.f1_positive((predict_scores(reg, q, st.X) >= cfg.threshold).astype(int), st.y).f1
        val = tr.val_loss[tr.best_epoch] if tr.val_loss and tr.best_epoch >= 0 else float("nan")
        loss = tr.train_loss[-1] if tr.train_loss else float("nan")
        print(f"{q:>3}  {st.name:<20} {st.m:>6} {reg.n_raw[q]:>5} {len(tr.train_loss):>6} "
              f"{loss:>8.4f} {val:>8.4f} {f1:>6.3f}")
    path = save_registry(reg, out / REGISTRY_NAME)
    return [path]


def _plan_from(args, protocol, grid, seeds, variants) -> H.ExperimentPlan:
    base = _base_config(args, seeds[0])
    return H.ExperimentPlan(protocol=protocol, folds=args.folds, variant=variants[0],
                            grid=grid, seeds=seeds, base=base, variants=variants,
                            jobs=getattr(args, "jobs", 1), record_timing=args.timing)


def _run_plan(args, plan: H.ExperimentPlan, out: Path):
    train, val = _dataset_source(args)
    if plan.protocol == "longitudinal" and val is None:
        raise UsageError("longitudinal protocol needs --validate (or a generated preset)")
    rows = H.sweep(train, plan, validate=val if plan.protocol == "longitudinal" else None)
    paths = H.report(rows, out)
    text, _ = H.summarize(rows)
    print(text)
    return rows, paths


def cmd_eval(args, out: Path):
    variant = VARIANT_FLAGS[args.variant]
    plan = _plan_from(args, args.protocol, [(args.rho, args.omega, args.gamma)], [args.seed],
                      [variant])
    rows, paths = _run_plan(args, plan, out)
    return paths, _check_min_f1(rows, args.assert_min_f1)


def cmd_sweep(args, out: Path):
    rhos = args.rho
    if args.depth_pairs:
        pairs = []
        for tok in args.depth_pairs.split(","):
            o, _, g = tok.partition(":")
            try:
                pairs.append((int(o), int(g)))
            except ValueError:
                raise UsageError(f"bad omega:gamma pair {tok!r}") from None
        grid = [(r, o, g) for r in rhos for o, g in pairs]
    else:
        grid = H.full_grid(rhos, args.omega, args.gamma)
    names = _csv_list(args.variants, str) if args.variants else [args.variant]
    unknown = [v for v in names if v.lower() not in VARIANT_FLAGS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(VARIANT_FLAGS)}")
    variants = [VARIANT_FLAGS[v.lower()] for v in names]
    seeds = _seed_list(args.seeds, args.seed)
    plan = _plan_from(args, args.protocol, grid, seeds, variants)
    rows, paths = _run_plan(args, plan, out)
    return paths, _check_min_f1(rows, args.assert_min_f1)


def cmd_report(args, out: Path) -> List[Path]:
    rows = H.read_results_csv(args.inp)
    if not rows:
        raise UsageError(f"{args.inp}: no result rows")
    paths = H.report(rows, out)
    print(H.summarize(rows)[0])
    return paths


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "report": cmd_report}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def parse(argv: Sequence[str]):
    parser = build_parser()
    argv = list(argv)
    first = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[first.command]
    cfg_argv: List[str] = []
    if first.config:
        cfg_argv = read_config(first.config, sub)
    idx = argv.index(first.command)
    merged = argv[:idx + 1] + cfg_argv + argv[idx + 1:]
    args = parser.parse_args(merged)
    cli_seed = any(a == "--seed" or a.startswith("--seed=") for a in argv[idx + 1:])
    env = os.environ.get("MSGTL_SEED")
    if env is not None and not cli_seed:
        try:
            args.seed = int(env)
        except ValueError:
            raise UsageError(f"MSGTL_SEED={env!r} is not an integer") from None
    return parser, sub, args


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser, sub, args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(message)s")
    out = Path(args.out)
    manifest = RunManifest(args.command, _config_items(args, sub), args.seed, out)
    try:
        manifest.write()
        result = COMMANDS[args.command](args, out)
    except (UsageError, FunnelConfigError, DatasetValidationError, DegenerateStageError,
            ValueError, OSError) as exc:
        print(f"msgtl {args.command}: error: {exc}", file=sys.stderr)
        try:
            manifest.finalize("error", [])
        except OSError:
            pass
        return EXIT_USAGE
    passed = True
    if isinstance(result, tuple):
        result, passed = result
    manifest.finalize("ok" if passed else "assertion-failed", result)
    return EXIT_OK if passed else EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
