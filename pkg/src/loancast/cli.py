"""Command-line entry point: ``loancast {synth,train,eval,predict,gradcheck,params}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or shape
error, 4 failed internal check (gradcheck).

Run configuration is an INI-style file with ``[model]``, ``[train]`` and
``[paths]`` sections; any key can also be set with ``--set section.key=value``
and the common ones have dedicated flags. ``train`` writes the effective
configuration to ``config.ini`` in the run directory, and that file alone
reproduces the run (``loancast train --config run/config.ini --force``).
"""
import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import config as cfgtext
from . import metrics
from .datacube import (
    apply_norm, archive_summary, ensure_parent, fit_norm, generate_synthetic, norm_from_section,
    norm_to_section, read_archive, write_archive,
)
from .errors import ContractError, DimensionError, FormatError
from .gradcheck import format_results, timed_suite
from .model import ModelConfig, build_model, param_breakdown, param_count, read_checkpoint
from .trainer import Trainer, TrainConfig, evaluate, predict_scores

log = logging.getLogger("loancast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4
SEED_ENV = "LOANCAST_SEED"
PARAM_BRACKET = (250_000, 500_000)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    train: str = ""
    val: str = ""
    out_dir: str = ""


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "paths": PathsConfig}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    paths: PathsConfig = PathsConfig()

    def dumps(self):
        return cfgtext.dumps({"model": self.model, "train": self.train, "paths": self.paths})


# ------------------------------------------------------------------ config


def _read_config_text(path):
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_USAGE) from None


def parse_run_config(text, source="<config>"):
    """Parse config text; unknown sections or keys are errors that name the line."""
    try:
        sections = cfgtext.read_sections(text, source)
    except ContractError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    parts = {}
    for name, items in sections.items():
        if name not in SECTIONS:
            raise CliError(f"{source}: unknown section [{name}]", EXIT_USAGE)
        for key in items:
            try:
                cfgtext.from_mapping(SECTIONS[name], {key: items[key]}, f"[{name}]")
            except ContractError as exc:
                line = cfgtext.line_of(text, name, key)
                raise CliError(f"{source}: line {line}: {exc}", EXIT_USAGE) from None
        parts[name] = cfgtext.from_mapping(SECTIONS[name], items, f"[{name}]")
    return RunConfig(**parts), sections


def _override(run, section, key, value):
    cls = SECTIONS[section]
    current = getattr(run, section)
    try:
        updated = cfgtext.from_mapping(cls, {key: value}, f"--set {section}.{key}")
    except ContractError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    return dataclasses.replace(run, **{section: dataclasses.replace(current, **{key: getattr(updated, key)})})


def _model_flags(args):
    out = []
    if getattr(args, "loan", None) is not None:
        out.append(("model", "loan_blocks", "none" if args.loan.lower() == "off" else args.loan))
    if getattr(args, "te", None) is not None:
        out.append(("model", "te", args.te))
    if getattr(args, "arch", None) is not None:
        out.append(("model", "arch", args.arch))
    if getattr(args, "loan_variant", None) is not None:
        out.append(("model", "loan_variant", args.loan_variant))
    return out


def resolve_run_config(args, text=None, source="<config>"):
    """Config file, then ``LOANCAST_SEED``, then flags; later wins."""
    run, given = (RunConfig(), {}) if text is None else parse_run_config(text, source)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and getattr(args, "seed", None) is None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env_seed!r}", EXIT_USAGE) from None
        for section in ("model", "train"):
            if "seed" not in given.get(section, {}):
                run = _override(run, section, "seed", str(seed))
    updates = _model_flags(args)
    for flag, section, key in (("train", "paths", "train"), ("val", "paths", "val"), ("out_dir", "paths", "out_dir"),
                               ("epochs", "train", "epochs"), ("batch_size", "train", "batch_size"),
                               ("lr", "train", "lr"), ("threshold", "train", "threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            updates.append((section, key, str(value)))
    if getattr(args, "seed", None) is not None:
        updates += [("model", "seed", str(args.seed)), ("train", "seed", str(args.seed))]
    for item in getattr(args, "set", None) or []:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise CliError(f"--set expects section.key=value with section in {sorted(SECTIONS)}: {item!r}", EXIT_USAGE)
        updates.append((section, key.strip(), value.strip()))
    for section, key, value in updates:
        run = _override(run, section, key, value)
    try:
        run.model.validate()
        run.train.validate()
    except (ContractError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE) from None
    return run


# ------------------------------------------------------------------ helpers


def _load_cube(path):
    try:
        return read_archive(path)
    except FormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_DATA) from None


def _check_dims(cfg, archive, path):
    vd, vs, t, h, w = archive.dims
    want = (cfg.dyn_vars, cfg.static_vars, cfg.time_steps, cfg.patch, cfg.patch)
    if (vd, vs, t, h, w) != want:
        raise CliError(
            f"{path}: cube dims (V_d={vd}, V_s={vs}, T={t}, H={h}, W={w}) do not match model config "
            f"(V_d={want[0]}, V_s={want[1]}, T={want[2]}, patch={want[3]})", EXIT_DATA)


def _load_for_inference(checkpoint, cube_path):
    try:
        ckpt = read_checkpoint(checkpoint)
    except FormatError as exc:
        raise CliError(f"{checkpoint}: {exc}", EXIT_DATA) from None
    except OSError as exc:
        raise CliError(f"cannot read {checkpoint}: {exc.strerror}", EXIT_DATA) from None
    model = build_model(ckpt.cfg)
    try:
        model.load_state_dict(ckpt.params, ckpt.buffers)
    except (ContractError, DimensionError) as exc:
        raise CliError(f"{checkpoint}: {exc}", EXIT_DATA) from None
    archive = _load_cube(cube_path)
    _check_dims(ckpt.cfg, archive, cube_path)
    if "norm" in ckpt.sections:
        archive = apply_norm(archive, norm_from_section(ckpt.sections["norm"]))
    return model, archive


def _write_text(path, text):
    try:
        ensure_parent(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_USAGE) from None


def _prepare_run_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CliError(f"run directory {path} is not empty; pass --force to reuse it", EXIT_USAGE)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc.strerror}", EXIT_USAGE) from None


# ------------------------------------------------------------------ commands


def cmd_synth(args):
    dims = tuple(int(v) for v in args.dims.split(","))
    if len(dims) != 5:
        raise CliError("--dims needs five values V_d,V_s,T,H,W", EXIT_USAGE)
    if args.pos < 0 or args.neg < 0:
        raise CliError("--pos and --neg must be non-negative", EXIT_USAGE)
    seed = _seed_or_env(args.seed)
    archive = generate_synthetic(seed, args.pos, args.neg, dims=dims)
    try:
        ensure_parent(args.out)
        write_archive(archive, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_USAGE) from None
    print(archive_summary(archive))
    return EXIT_OK


def _seed_or_env(seed):
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {env!r}", EXIT_USAGE) from None


def cmd_train(args):
    text = _read_config_text(args.config) if args.config else None
    run = resolve_run_config(args, text, args.config or "<config>")
    paths = run.paths
    if not paths.train:
        raise CliError("no training archive: pass --train or set [paths] train", EXIT_USAGE)
    if not paths.out_dir:
        raise CliError("no run directory: pass --out-dir or set [paths] out_dir", EXIT_USAGE)
    train_raw = _load_cube(paths.train)
    _check_dims(run.model, train_raw, paths.train)
    val_raw = None
    if paths.val:
        val_raw = _load_cube(paths.val)
        _check_dims(run.model, val_raw, paths.val)
    if len(train_raw) == 0:
        raise CliError(f"{paths.train}: training archive is empty", EXIT_DATA)

    _prepare_run_dir(paths.out_dir, args.force)
    echoed = dataclasses.replace(run, paths=PathsConfig(
        os.path.abspath(paths.train), os.path.abspath(paths.val) if paths.val else "", os.path.abspath(paths.out_dir)))
    _write_text(os.path.join(paths.out_dir, "config.ini"), echoed.dumps())

    norm = fit_norm(train_raw)
    train_set = apply_norm(train_raw, norm)
    val_set = apply_norm(val_raw, norm) if val_raw is not None else None
    model = build_model(run.model)
    trainer = Trainer(model, run.train)
    trainer.checkpoint_extra = {"norm": norm_to_section(norm)}
    print(f"model {run.model.arch}: {param_count(model)} parameters; "
          f"{len(train_set)} training samples, run directory {paths.out_dir}")
    trainer.fit(train_set, val_set, paths.out_dir)
    for rec in trainer.log.epochs:
        print(rec.line())
    final = evaluate(model, train_set, run.train.threshold)
    print(f"final training OA {final['OA']:.2f}  F1 {final['F1']:.2f}")
    if val_set is not None:
        print(f"best validation F1 {trainer.log.best_f1:.2f} at epoch {trainer.log.best_epoch}")
    return EXIT_OK


def cmd_eval(args):
    model, archive = _load_for_inference(args.checkpoint, args.cube)
    rep = evaluate(model, archive, args.threshold)
    table = metrics.format_table(rep)
    print(table, end="")
    extras = {k: rep[k] for k in ("RecallPos", "RecallNeg", "Loss", "Threshold", "Samples", "Flags")}
    print(metrics.format_keyvalue(extras), end="")
    out = args.out or os.path.splitext(args.checkpoint)[0] + ".eval.tsv"
    _write_text(out, table)
    _write_text(out + ".kv", metrics.format_keyvalue(rep))
    return EXIT_OK


def cmd_predict(args):
    model, archive = _load_for_inference(args.checkpoint, args.cube)
    scores = predict_scores(model, archive)
    lines = ["index,score,label"]
    lines += [f"{i},{s!r},{int(s >= args.threshold)}" for i, s in enumerate(scores.tolist())]
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(scores)} scores to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.size != "tiny":
        raise CliError("only --size tiny is supported", EXIT_USAGE)
    results, elapsed = timed_suite(_seed_or_env(args.seed))
    print(format_results(results, elapsed))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.layer} {r.param}: max relative error {r.error:.3e} >= {r.tol:g}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


def _loan_total(model):
    return sum(p.size for name, p in model.named_parameters() if name.startswith("loans."))


def cmd_params(args):
    text = _read_config_text(args.config) if args.config else None
    run = resolve_run_config(args, text, args.config or "<config>")
    cfg = run.model
    model = build_model(cfg)
    total = param_count(model)
    for name, count in param_breakdown(model).items():
        print(f"{name:<16} {count:>10,d}")
    print(f"{'total':<16} {total:>10,d}")
    lo, hi = PARAM_BRACKET
    inside = lo <= total <= hi
    print(f"in [{lo:,d}, {hi:,d}]: {'yes' if inside else 'no'}")
    if cfg.arch == "two-branch":
        te_flip = param_count(build_model(cfg.replace(te=not cfg.te)))
        print(f"TE {'off' if cfg.te else 'on'}: {te_flip:,d} (delta {total - te_flip:+,d})")
        if cfg.loan_blocks:
            no_loan = param_count(build_model(cfg.replace(loan_blocks=())))
            loans = _loan_total(model)
            print(f"LOAN off: {no_loan:,d} (delta {total - no_loan:+,d}: LOAN layers {loans:,d}, "
                  f"block-1 batch-norm affine {total - no_loan - loans:+,d})")
        one = build_model(cfg.replace(arch="one-branch-3d", loan_blocks=()))
        print(f"one-branch 3D at dynamic widths {cfg.dyn_channels}: {param_count(one):,d}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_model_flags(p):
    p.add_argument("--loan", help="LOAN blocks, e.g. '1,2', or 'off'")
    p.add_argument("--te", choices=("on", "off"), help="temporal encoding")
    p.add_argument("--arch", choices=("two-branch", "one-branch-3d"))
    p.add_argument("--loan-variant", choices=("activation", "variable"))
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="loancast", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic archive")
    p.add_argument("--seed", type=int)
    p.add_argument("--pos", type=int, required=True, help="number of positive samples")
    p.add_argument("--neg", type=int, required=True, help="number of negative samples")
    p.add_argument("--dims", default="10,15,10,25,25", help="V_d,V_s,T,H,W")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model into a run directory")
    p.add_argument("--config")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint on an archive")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write index,score,label lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--size", default="tiny")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per module")
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"loancast {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (DimensionError, FormatError) as exc:
        print(f"loancast {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"loancast {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
