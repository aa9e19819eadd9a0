"""Command-line entry point: ``deepsimreg <subcommand> [flags]``.

Subcommands mirror the workflow: ``gen-data``, ``train-extractor``,
``train-reg``, ``sweep``, ``evaluate``, ``compare`` and ``plot``.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs, schema
mismatch), 2 runtime failure. Diagnostics go to stderr; machine-readable
outputs are written to files only.

Any flag may also come from ``--config FILE``, a text file of ``key=value``
lines (``#`` starts a comment). Flags given on the command line win. A run
manifest JSON is also accepted as a config file, which replays the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import reports
from .data import (
    FormatError,
    SyntheticConfig,
    load_checkpoint,
    load_dataset,
    make_synthetic_dataset,
    save_checkpoint,
    save_dataset,
    save_field,
    split_dataset,
)
from .evaluation import evaluate_fields, lambda_sweep, paired_stats
from .metrics import METRIC_KINDS
from .train import TrainConfig, predict_fields, train_extractor, train_registration
from .warp import AffineRanges

log = logging.getLogger("deepsimreg")

SEED_ENV = "DEEPSIMREG_SEED"
EXTRACTOR_ROLE = {"deepsim_ae": "autoencoder", "deepsim_seg": "segmentation"}


class UsageError(Exception):
    """Bad command line; reported with usage text and exit code 1."""

    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


# -- run manifest -----------------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Everything needed to repeat an invocation."""

    command: str
    config: str
    seed: int
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__
    wall_clock_seconds: float = 0.0
    started: str = ""

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(artifact) -> Path:
    """Manifests sit beside their artifact: ``<dir>/manifest.json`` or ``<file>.manifest.json``."""
    p = Path(artifact)
    return p / "manifest.json" if p.is_dir() else p.with_name(p.name + ".manifest.json")


# -- config files -----------------------------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} does not exist")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            text = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise UsageError(f"{p}: JSON config must be a run manifest with a 'config' entry") from None
    return parse_config_text(text, str(p))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _config_argv(values: dict[str, str], parser: argparse.ArgumentParser, source: str) -> list[str]:
    """Translate ``key=value`` pairs into flags for ``parser``."""
    actions = {}
    for a in parser._actions:
        if a.option_strings and a.dest not in ("help", "config"):
            actions[a.dest] = a
            for opt in a.option_strings:  # "lambda" as well as "lam"
                actions.setdefault(opt.lstrip("-").replace("-", "_"), a)
    argv = []
    for key, value in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"{source}: unknown key {key!r}", parser.format_usage())
        flag = action.option_strings[-1]
        if isinstance(action, argparse.BooleanOptionalAction):
            v = value.lower()
            if v not in _TRUE | _FALSE:
                raise UsageError(f"{source}: {key} must be true or false, got {value!r}")
            name = action.option_strings[0].lstrip("-")
            argv.append(f"--{name}" if v in _TRUE else f"--no-{name}")
        elif action.nargs in ("+", "*"):
            argv += [flag, *value.split()]
        else:
            argv += [flag, value]
    return argv


def config_text(args: argparse.Namespace, parser: argparse.ArgumentParser) -> str:
    """Resolved flags as ``key=value`` lines, readable back through ``--config``."""
    lines = []
    for a in parser._actions:
        if not a.option_strings or a.dest in ("help", "config"):
            continue
        v = getattr(args, a.dest)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, (list, tuple)):
            v = " ".join(str(x) for x in v)
        lines.append(f"{a.dest}={v}")
    return "\n".join(lines) + "\n"


# -- flag types -------------------------------------------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _float_list(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _add_common(p: argparse.ArgumentParser, seed_default: int) -> None:
    p.add_argument("--config", help="key=value config file (or run manifest); flags override it")
    p.add_argument("--seed", type=int, default=seed_default, help=f"random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--quiet", action=argparse.BooleanOptionalAction, default=False, help="only report warnings")


def _add_training(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=_positive_int, default=d.epochs)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--micro-batch", type=_positive_int, default=d.micro_batch)
    g.add_argument("--accumulation", type=_positive_int, default=d.accumulation)
    g.add_argument("--patience", type=_positive_int, default=d.plateau_patience)
    g.add_argument("--lr-decay", type=float, default=d.lr_decay)
    g.add_argument("--min-lr", type=float, default=d.min_lr)
    g.add_argument("--channels", type=_int_list, default=list(d.channels), help="comma-separated widths per stage")
    g.add_argument("--dropout", type=float, default=d.dropout_p)
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="random affine augmentation of training inputs")


def _add_registration(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("registration")
    g.add_argument("--metric", choices=METRIC_KINDS, required=True)
    g.add_argument("--extractor", help="feature-extractor checkpoint (deepsim metrics)")
    g.add_argument("--window", type=_positive_int, default=d.ncc_window, help="NCC window size (odd)")
    g.add_argument("--gamma", type=float, default=d.sup_gamma, help="label-term weight for ncc_sup")


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = _Parser(prog="deepsimreg", description="Deformable image registration with learned similarity metrics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--pairs", type=_positive_int, default=250)
    p.add_argument("--fractions", type=_float_list, default=[0.8, 0.1, 0.1], help="train,val,test shares")
    s = SyntheticConfig()
    p.add_argument("--height", type=_positive_int, default=s.height)
    p.add_argument("--width", type=_positive_int, default=s.width)
    p.add_argument("--classes", type=_positive_int, default=s.classes)
    p.add_argument("--noise", type=float, default=s.noise_sigma)
    p.add_argument("--amplitude", type=float, default=s.amplitude)
    p.add_argument("--smoothness", type=float, default=s.smoothness)
    p.add_argument("--overwrite", action=argparse.BooleanOptionalAction, default=False)
    _add_common(p, seed_default)

    p = sub.add_parser("train-extractor", help="train a feature extractor on a surrogate task")
    p.add_argument("--task", choices=("ae", "seg"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.dsrc)")
    p.add_argument("--log", help="train-log CSV (default: <out>.train_log.csv)")
    _add_training(p)
    _add_common(p, seed_default)

    p = sub.add_parser("train-reg", help="train a registration model")
    p.add_argument("--lambda", dest="lam", type=float, default=TrainConfig().lam, help="regularizer weight")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.dsrc)")
    p.add_argument("--log", help="train-log CSV (default: <out>.train_log.csv)")
    _add_registration(p)
    _add_training(p)
    _add_common(p, seed_default)

    p = sub.add_parser("sweep", help="train one model per lambda and select the best on validation Dice")
    p.add_argument("--lambdas", type=_float_list, required=True, help="comma-separated regularizer weights")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory (one subdirectory per lambda)")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel training processes")
    _add_registration(p)
    _add_training(p)
    _add_common(p, seed_default)

    p = sub.add_parser("evaluate", help="score a registration model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="evaluation CSV")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--fields", help="also write predicted displacement fields (.dspf) to this directory")
    _add_common(p, seed_default)

    p = sub.add_parser("compare", help="paired significance tests between evaluation reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--correction", choices=("bonferroni", "none"), default="bonferroni")
    p.add_argument("--out", required=True, help="comparison CSV")
    _add_common(p, seed_default)

    p = sub.add_parser("plot", help="render report CSVs as SVG")
    p.add_argument("--kind", choices=("convergence", "sweep", "boxplot"), required=True)
    p.add_argument("--inputs", nargs="+", required=True, help="train-log, sweep or evaluation CSVs")
    p.add_argument("--labels", nargs="+", help="series labels (default: file stems)")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--title")
    _add_common(p, seed_default)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def _config_flag(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file argument")
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: list[str]) -> tuple[argparse.Namespace, argparse.ArgumentParser]:
    parser = build_parser(_default_seed())
    command = next((a for a in argv if not a.startswith("-")), None)
    config = _config_flag(argv)
    if config and command in COMMANDS:
        # file values go right after the subcommand so explicit flags override them
        extra = _config_argv(read_config_file(config), _subparser(parser, command), config)
        i = argv.index(command)
        argv = argv[:i + 1] + extra + argv[i + 1:]
    args = parser.parse_args(argv)
    return args, _subparser(parser, args.command)


# -- helpers ----------------------------------------------------------------------------------------


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, lr=args.lr, micro_batch=args.micro_batch, accumulation=args.accumulation,
        plateau_patience=args.patience, lr_decay=args.lr_decay, min_lr=args.min_lr,
        channels=tuple(args.channels), dropout_p=args.dropout, augment=AffineRanges() if args.augment else None,
        seed=args.seed, **extra,
    )


def _registration_config(args, lam: float) -> TrainConfig:
    return _train_config(args, lam=lam, metric=args.metric, ncc_window=args.window, sup_gamma=args.gamma)


def _load_data(path):
    classes = 0
    m = Path(path) / "manifest.json"
    if m.is_file():
        try:
            classes = int(parse_config_text(RunManifest.load(m).config).get("classes", 0))
        except (ValueError, TypeError, KeyError):
            classes = 0
    return load_dataset(path, num_classes=classes)


def _load_extractor(args):
    role = EXTRACTOR_ROLE.get(args.metric)
    if role is None:
        if args.extractor:
            raise ValueError(f"--extractor is only used with deepsim metrics, not {args.metric}")
        return None
    if not args.extractor:
        raise ValueError(f"metric {args.metric} needs --extractor")
    net, _, _ = load_checkpoint(args.extractor)
    if net.config.role != role:
        raise ValueError(f"metric {args.metric} needs a {role} extractor; {args.extractor} holds a {net.config.role}")
    return net


def _log_path(args) -> Path:
    return Path(args.log) if args.log else Path(args.out).with_name(Path(args.out).name + ".train_log.csv")


def _ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# -- subcommands ------------------------------------------------------------------------------------


def cmd_gen_data(args) -> list[Path]:
    out = Path(args.out)
    if out.exists() and any((out / s).exists() for s in ("train", "val", "test")):
        if not args.overwrite:
            raise ValueError(f"{out} already holds a dataset; pass --overwrite to replace it")
        for s in ("train", "val", "test"):
            shutil.rmtree(out / s, ignore_errors=True)
    if len(args.fractions) != 3:
        raise ValueError("--fractions needs exactly three values (train, val, test)")
    cfg = SyntheticConfig(height=args.height, width=args.width, classes=args.classes, noise_sigma=args.noise,
                          amplitude=args.amplitude, smoothness=args.smoothness)
    sizes = [len(p) for p in split_dataset(args.pairs, args.fractions, args.seed)]
    ds = make_synthetic_dataset(cfg, *sizes, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    log.info("wrote %d pairs (%d/%d/%d) to %s", args.pairs, *sizes, out)
    return [out]


def cmd_train_extractor(args) -> list[Path]:
    ds = _load_data(args.data)
    cfg = _train_config(args)
    net, trainlog = train_extractor(ds, args.task, cfg)
    _ensure_parent(args.out)
    save_checkpoint(net, args.out, extra={"task": args.task, "num_classes": ds.num_classes,
                                          "train_config": cfg.to_dict()})
    lp = _log_path(args)
    reports.write_train_log(trainlog, lp)
    return [Path(args.out), lp]


def cmd_train_reg(args) -> list[Path]:
    ds = _load_data(args.data)
    extractor = _load_extractor(args)
    cfg = _registration_config(args, args.lam)
    net, trainlog = train_registration(ds, extractor, cfg)
    _ensure_parent(args.out)
    save_checkpoint(net, args.out, extra={"num_classes": ds.num_classes, "train_config": cfg.to_dict(),
                                          "extractor": args.extractor})
    lp = _log_path(args)
    reports.write_train_log(trainlog, lp)
    log.info("best validation mean Dice %.4f", trainlog.best_val_dice)
    return [Path(args.out), lp]


def _lambda_dir(out: Path, lam: float) -> Path:
    return out / f"lambda_{lam:g}"


def cmd_sweep(args) -> list[Path]:
    ds = _load_data(args.data)
    extractor = _load_extractor(args)
    if len(set(args.lambdas)) != len(args.lambdas):
        raise ValueError("--lambdas contains duplicates")
    if any(lam < 0 for lam in args.lambdas):
        raise ValueError("lambdas must be non-negative")
    base = _registration_config(args, args.lambdas[0])
    best, scores, results = lambda_sweep(ds, extractor, base, args.lambdas, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for lam, (net, trainlog) in results.items():
        d = _lambda_dir(out, lam)
        d.mkdir(exist_ok=True)
        save_checkpoint(net, d / "model.dsrc", extra={"num_classes": ds.num_classes, "extractor": args.extractor,
                                                      "train_config": base.replace(lam=lam).to_dict()})
        reports.write_train_log(trainlog, d / "train_log.csv")
        artifacts += [d, d / "model.dsrc", d / "train_log.csv"]
    reports.write_sweep(scores, out / "sweep.csv")
    shutil.copyfile(_lambda_dir(out, best) / "model.dsrc", out / "best.dsrc")
    (out / "best_lambda.txt").write_text(f"{best!r}\n")
    log.info("best lambda %g (validation mean Dice %.4f)", best, scores[best])
    return [out, out / "sweep.csv", out / "best.dsrc", out / "best_lambda.txt", *artifacts]


def cmd_evaluate(args) -> list[Path]:
    net, _, extra = load_checkpoint(args.model)
    if net.config.role != "registration":
        raise ValueError(f"{args.model} holds a {net.config.role} network, not a registration model")
    ds = load_dataset(args.data, num_classes=int(extra.get("num_classes", 0)))
    samples = ds.split(args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} of {args.data} is empty")
    if not all(s.has_labels for s in samples):
        raise ValueError(f"split {args.split!r} of {args.data} lacks label maps")
    fields = predict_fields(net, samples)
    rows = evaluate_fields(samples, fields, ds.num_classes)
    _ensure_parent(args.report)
    reports.write_evaluation(rows, args.report)
    artifacts = [Path(args.report)]
    if args.fields:
        fd = Path(args.fields)
        fd.mkdir(parents=True, exist_ok=True)
        for s, u in zip(samples, fields):
            save_field(u, fd / f"{s.sample_id}.dspf")
        artifacts.append(fd)
    log.info("mean Dice %.4f over %d pairs", float(np.mean([r.mean_dice for r in rows])), len(rows))
    return artifacts


def cmd_compare(args) -> list[Path]:
    if len(args.reports) < 2:
        raise ValueError("compare needs at least two reports")
    means = {p: reports.read_evaluation_means(p) for p in args.reports}
    ids = set(next(iter(means.values())))
    for p, m in means.items():
        if set(m) != ids:
            diff = sorted(ids.symmetric_difference(m))[:5]
            raise ValueError(f"reports are not paired: {p} differs in sample ids, e.g. {diff}")
    order = sorted(ids)
    pairs = list(itertools.combinations(args.reports, 2))
    m = len(pairs) if args.correction == "bonferroni" else 1
    rows = []
    for a, b in pairs:
        va = np.array([means[a][i] for i in order])
        vb = np.array([means[b][i] for i in order])
        try:
            s = paired_stats(va, vb, alpha=args.alpha, comparisons=m)
        except ValueError as exc:
            raise ValueError(f"cannot compare {a} with {b}: {exc}") from None
        rows.append((a, b, s.p_value, s.effect_size_d, s.significance_threshold, s.significant))
    _ensure_parent(args.out)
    reports.write_csv(args.out, reports.COMPARE_COLUMNS, rows)
    return [Path(args.out)]


def cmd_plot(args) -> list[Path]:
    labels = args.labels or [Path(p).stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise ValueError(f"{len(labels)} labels for {len(args.inputs)} inputs")
    title = {} if args.title is None else {"title": args.title}
    if args.kind == "convergence":
        svg = reports.convergence_svg({lab: reports.read_convergence(p) for lab, p in zip(labels, args.inputs)}, **title)
    elif args.kind == "sweep":
        if len(args.inputs) != 1:
            raise ValueError("sweep plots take exactly one sweep CSV")
        svg = reports.sweep_svg(reports.read_sweep(args.inputs[0]), **title)
    else:
        svg = reports.boxplot_svg({lab: list(reports.read_evaluation_means(p).values())
                                   for lab, p in zip(labels, args.inputs)}, **title)
    _ensure_parent(args.out)
    Path(args.out).write_text(svg)
    return [Path(args.out)]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-extractor": cmd_train_extractor,
    "train-reg": cmd_train_reg,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def run(argv: list[str] | None = None) -> int:
    """Execute one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, sp = parse_args(argv)
    except UsageError as exc:
        if exc.usage:
            sys.stderr.write(exc.usage)
        sys.stderr.write(f"deepsimreg: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("deepsimreg")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root.propagate = False

    t0 = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        artifacts = COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, FormatError, reports.SchemaError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 2

    manifest = RunManifest(command=args.command, config=config_text(args, sp), seed=args.seed,
                           artifacts=[str(p) for p in artifacts], wall_clock_seconds=time.time() - t0,
                           started=started)
    # one manifest beside the primary artifact and one in every output directory
    targets = {manifest_path(artifacts[0])} | {manifest_path(p) for p in artifacts[1:] if p.is_dir()}
    try:
        for t in sorted(targets):
            manifest.save(t)
    except OSError as exc:
        log.error("could not write run manifest: %s", exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
