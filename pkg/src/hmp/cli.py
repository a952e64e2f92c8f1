"""Command-line entry point.

Exit status: 0 on success, 1 on a usage error, 2 when the command fails.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from hmp.admission import pretrain_admission
from hmp.checkpoint import load_checkpoint, save_checkpoint
from hmp.config import PROFILES, Config, coerce_value, resolve_config
from hmp.data.records import Dataset
from hmp.data.serialize import load_dataset, save_dataset
from hmp.data.synthetic import generate_dataset
from hmp.downstream.ablation import AblationRow, ablation_over_seeds, mean_by_arm, write_tsv
from hmp.downstream.finetune import INITS, LEVEL_TASKS, TaskSpec, finetune
from hmp.errors import HmpError
from hmp.stay import pretrain_stay

log = logging.getLogger("hmp")

COMMANDS = ("gen-data", "pretrain-stay", "pretrain-admission", "finetune", "ablate", "eval", "gradcheck")
ALL_TASKS = sorted({t for tasks in LEVEL_TASKS.values() for t in tasks})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("configuration (defaults <- profile <- --config file <- flags)")
    group.add_argument("--profile", choices=PROFILES, default=None,
                       help="parameter profile (default: $HMP_PROFILE, else desk)")
    group.add_argument("--config", default=None, metavar="FILE", help="key = value file (default: none)")
    defaults = Config()
    for f in fields(Config):
        if f.name == "profile":
            continue
        default = getattr(defaults, f.name)
        kind = {"int": int, "float": float, "bool": str, "str": str}[f.type]
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(
            *flags,
            dest=f.name,
            type=kind,
            default=None,
            metavar=f.type.upper(),
            help=f"(default: {default!r})",
        )


def _task_flags(parser: argparse.ArgumentParser, init_default: str = "a+s"):
    parser.add_argument("--level", choices=tuple(LEVEL_TASKS), default="stay", help="(default: stay)")
    parser.add_argument("--task", choices=ALL_TASKS, default="arf", help="(default: arf)")
    parser.add_argument("--init", default=init_default, help=f"one of {INITS} (default: {init_default})")
    parser.add_argument("--fraction", type=float, default=1.0, help="training fraction (default: 1.0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmp", description="Hierarchical EHR pretraining, fine-tuning and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset file to write")
    _add_config_flags(p)

    for name, helptext in (("pretrain-stay", "stage 1: stay reconstruction"),
                           ("pretrain-admission", "stage 2: masked codes + contrast")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", default=None, help="dataset file (default: generate from config)")
        p.add_argument("--out", required=True, help="checkpoint file to write")
        if name == "pretrain-admission":
            p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
        _add_config_flags(p)

    p = sub.add_parser("finetune", help="fine-tune one task and report test metrics")
    p.add_argument("--data", default=None, help="dataset file (default: generate from config)")
    p.add_argument("--ckpt", default=None, help="checkpoint to initialize from (default: none, scratch weights)")
    _task_flags(p)
    p.add_argument("--history-out", default=None, help="write per-epoch history as TSV (default: not written)")
    p.add_argument("--out", default=None, help="write the result row to this TSV (default: not written)")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="training-size ablation, pretrained vs scratch")
    p.add_argument("--data", default=None, help="dataset file (default: generate from config)")
    p.add_argument("--ckpt", required=True, help="checkpoint for the pretrained arm")
    _task_flags(p)
    p.add_argument("--fractions", default="0.1,0.25,0.5,1.0", help="(default: 0.1,0.25,0.5,1.0)")
    p.add_argument("--seeds", default="0", help="comma-separated run seeds (default: 0)")
    p.add_argument("--out", default=None, help="results TSV (default: stdout)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="multi-seed fine-tuning, one row per seed and init")
    p.add_argument("--data", default=None, help="dataset file (default: generate from config)")
    p.add_argument("--ckpt", default=None, help="checkpoint for pretrained inits (default: none)")
    _task_flags(p)
    p.add_argument("--inits", default="a+s,scratch", help="comma-separated inits (default: a+s,scratch)")
    p.add_argument("--seeds", default="0,1,2,3,4", help="(default: 0,1,2,3,4)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    p.add_argument("--out", default=None, help="results TSV (default: stdout)")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    p.add_argument("--seeds", type=int, default=20, help="random instances per layer (default: 20)")
    p.add_argument("--tol", type=float, default=1e-4, help="(default: 0.0001)")
    _add_config_flags(p)
    return parser


def _config(args) -> Config:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(Config) if f.name != "profile"}
    try:
        if isinstance(overrides.get("ft_grid"), str):
            overrides["ft_grid"] = coerce_value("bool", overrides["ft_grid"])
        return resolve_config(args.profile, args.config, overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _setup_logging(cfg: Config):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    fmt = logging.Formatter("%(message)s")
    out = logging.StreamHandler(sys.stdout)
    out.setFormatter(fmt)
    log.addHandler(out)
    if cfg.log_file:
        fh = logging.FileHandler(cfg.log_file, encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
        log.addHandler(fh)


def _dataset(args, cfg: Config) -> Dataset:
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_dataset(cfg.gen())


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _spec(args, seed: int = 0, init: str | None = None) -> TaskSpec:
    try:
        return TaskSpec(args.level, args.task, args.fraction, seed, init or args.init)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(rows: list[AblationRow], path: str | None):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_tsv(rows, fh)
    else:
        write_tsv(rows, sys.stdout)


def cmd_gen_data(args, cfg: Config) -> int:
    ds = generate_dataset(cfg.gen())
    save_dataset(ds, args.out)
    log.info("wrote %d patients to %s", len(ds.patients), args.out)
    return 0


def cmd_pretrain_stay(args, cfg: Config) -> int:
    ckpt = pretrain_stay(_dataset(args, cfg), cfg.dims(), cfg.stay_train())
    save_checkpoint(ckpt, args.out)
    log.info("wrote stage-1 checkpoint to %s", args.out)
    return 0


def cmd_pretrain_admission(args, cfg: Config) -> int:
    stage1 = load_checkpoint(args.stage1)
    ckpt = pretrain_admission(_dataset(args, cfg), stage1, cfg.admission_train())
    save_checkpoint(ckpt, args.out)
    log.info("wrote stage-2 checkpoint to %s", args.out)
    return 0


def _finetune_one(job):
    ds, ckpt, spec, ft, dims, grid = job
    return AblationRow.from_report(spec, finetune(ds, ckpt, spec, ft, dims, grid=grid))


def cmd_finetune(args, cfg: Config) -> int:
    spec = _spec(args, seed=cfg.seed)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    report = finetune(_dataset(args, cfg), ckpt, spec, cfg.finetune(), cfg.dims() if ckpt is None else None,
                      grid=cfg.ft_grid)
    log.info(
        "auroc=%.6f aupr=%.6f f1=%.6f kappa=%.6f epochs=%d best_epoch=%d",
        report.auroc, report.aupr, report.f1, report.kappa, report.epochs, report.best_epoch,
    )
    if args.history_out:
        keys = list(report.history[0]) if report.history else ["epoch"]
        with open(args.history_out, "w", encoding="utf-8") as fh:
            fh.write("\t".join(keys) + "\n")
            for row in report.history:
                fh.write("\t".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys) + "\n")
    if args.out:
        _emit([AblationRow.from_report(spec, report)], args.out)
    return 0


def cmd_ablate(args, cfg: Config) -> int:
    spec = _spec(args)
    fractions = _float_list(args.fractions, "--fractions")
    seeds = _int_list(args.seeds, "--seeds")
    rows = ablation_over_seeds(_dataset(args, cfg), load_checkpoint(args.ckpt), spec, fractions, seeds,
                               cfg.finetune())
    _emit(rows, args.out)
    for (init, fraction), value in sorted(mean_by_arm(rows).items()):
        log.info("mean_auroc init=%s fraction=%s value=%.6f", init, fraction, value)
    return 0


def cmd_eval(args, cfg: Config) -> int:
    seeds = _int_list(args.seeds, "--seeds")
    inits = [s.strip() for s in args.inits.split(",") if s.strip()]
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    ds = _dataset(args, cfg)
    dims = cfg.dims() if ckpt is None else None
    jobs = [(ds, ckpt, _spec(args, seed, init), cfg.finetune(), dims, cfg.ft_grid) for init in inits for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_finetune_one, jobs))
    else:
        rows = [_finetune_one(job) for job in jobs]
    _emit(rows, args.out)
    for init in inits:
        picked = [r for r in rows if r.init == _spec(args, 0, init).init]
        log.info(
            "mean init=%s auroc=%.6f aupr=%.6f f1=%.6f kappa=%.6f epochs=%.2f",
            init,
            *(float(np.mean([getattr(r, k) for r in picked])) for k in ("auroc", "aupr", "f1", "kappa", "epochs")),
        )
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    from hmp.gradsuite import gradient_suite

    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    results = gradient_suite(range(args.seeds))
    failed = 0
    for layer in dict.fromkeys(r.layer for r in results):
        errs = [r.report.max_rel_error for r in results if r.layer == layer]
        ok = max(errs) <= args.tol
        failed += not ok
        log.info("%s %s max_rel_error=%.3e seeds=%d", "PASS" if ok else "FAIL", layer, max(errs), len(errs))
    return 0 if failed == 0 else 2


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-stay": cmd_pretrain_stay,
    "pretrain-admission": cmd_pretrain_admission,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        _setup_logging(cfg)
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"hmp {args.command}: error: {exc}\n")
        return 1
    except (HmpError, OSError, ValueError) as exc:
        sys.stderr.write(f"hmp {args.command}: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    if hasattr(signal, "SIGPIPE"):
        # exit quietly when piped into head and friends
        signal.signal(signal.SIGPIPE, signal.SIG_DFL)
    sys.exit(run())


if __name__ == "__main__":
    main()
