"""``mno`` command line: data generation, training, evaluation and diagnostics.

Exit status is 0 on success, 2 on argument errors and 1 on runtime errors.
Everything is written under ``--out``; a run is staged in a sibling
directory and moved into place only once it has finished.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bench import MODULES, bench_modes, bench_points
from .datagen import GENERATORS, GenSpec, write_corpus
from .geometry import PointSample
from .io import file_sha256, read_corpus, read_keyvalue, read_pointset, write_keyvalue
from .model import TABLE3_MASKS, MnoConfig, MnoModel, ModuleMask, init_model
from .training import (
    TrainConfig,
    ablate,
    evaluate,
    gradient_check,
    load_model,
    parse_fields,
    predict,
    run_manifest,
    train,
)

log = logging.getLogger("mno")


class UsageError(Exception):
    """Bad command-line input; maps to exit status 2."""


# Manifest keys that describe a run rather than configure it.
_METADATA_KEYS = {"fingerprint", "checkpoint", "sha256", "best_epoch", "in_features",
                  "out_features", "loss", "command", "version"}


def _int_list(text: str) -> list[int]:
    try:
        return [int(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _mask_list(text: str) -> list[ModuleMask]:
    try:
        return [ModuleMask.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _mask(text: str) -> ModuleMask:
    try:
        return ModuleMask.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    if data:
        p.add_argument("--data", type=Path, help="directory of .mno files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p: argparse.ArgumentParser) -> None:
    d = MnoConfig()
    p.add_argument("--blocks", type=int, default=d.blocks)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--modes", type=int, default=d.modes)
    p.add_argument("--heads", type=int, default=d.heads)
    p.add_argument("--k", type=int, default=d.k)
    p.add_argument("--mask", type=_mask, default=d.mask, help="modules to enable, e.g. GLM or GL")


def _add_train(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--max-lr", type=float, default=d.max_lr)
    p.add_argument("--fields", default=d.fields,
                   help="field grouping, e.g. 'velocity:0-2,pressure:3@surface' or 'sphere-flow'")
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--eps", type=float, default=d.eps)
    p.add_argument("--pct-start", type=float, default=d.pct_start)
    p.add_argument("--div-start", type=float, default=d.div_start)
    p.add_argument("--div-final", type=float, default=d.div_final)
    p.add_argument("--test", type=Path, help="held-out .mno directory for evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mno", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mno {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic corpus of MNO1 files")
    _add_common(p, data=False)
    p.add_argument("--generator", choices=sorted(GENERATORS), default="sphere-flow")
    p.add_argument("--n", type=int, default=2048, help="points per sample")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--speed", type=float, default=1.0)

    p = sub.add_parser("train", help="train a model on a corpus")
    _add_common(p)
    _add_model(p)
    _add_train(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fields", default="all")

    p = sub.add_parser("ablate", help="train one model per module mask")
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--masks", type=_mask_list, default=list(TABLE3_MASKS))
    p.add_argument("--seeds", type=_int_list, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradients")
    _add_common(p, data=False)
    _add_model(p)
    p.set_defaults(blocks=1, dim=4, modes=2, heads=1, k=2)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--h", type=float, default=1e-5)

    p = sub.add_parser("bench", help="time attention modules against N (and M)")
    _add_common(p, data=False)
    p.add_argument("--module", choices=MODULES + ("all",), default="all")
    p.add_argument("--n", type=_int_list, default=[1000, 2000, 4000, 8000])
    p.add_argument("--m", type=_int_list, default=None, help="mode counts for the global module")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--modes", type=int, default=64)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("dump-fields", help="per-point truth/prediction/error CSV")
    _add_common(p, data=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True, help="an .mno file")
    return parser


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        values = read_keyvalue(args.config)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    # apply the file as defaults of the chosen subcommand, then re-parse so flags win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest in _METADATA_KEYS or dest.startswith("sha256") or dest == "data_hash":
            continue
        if dest not in known or dest in ("config", "out", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        action = known[dest]
        try:
            defaults[dest] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from exc
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


@contextlib.contextmanager
def staged_dir(out: Path):
    """Yield a scratch directory that becomes ``out`` only on success."""
    out = Path(out)
    parent = out.parent if str(out.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if not out.exists():
        os.replace(tmp, out)
        return
    for child in tmp.iterdir():
        dest = out / child.name
        if dest.is_dir():
            shutil.rmtree(dest)
        os.replace(child, dest)
    tmp.rmdir()


def _model_config(args, sample: PointSample) -> MnoConfig:
    return MnoConfig(in_features=sample.n_features, out_features=sample.n_outputs,
                     blocks=args.blocks, dim=args.dim, modes=args.modes, heads=args.heads,
                     k=args.k, mask=args.mask)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, max_lr=args.max_lr,
                       seed=args.seed, precision=args.precision, fields=args.fields,
                       weight_decay=args.weight_decay, beta1=args.beta1, beta2=args.beta2,
                       eps=args.eps, pct_start=args.pct_start, div_start=args.div_start,
                       div_final=args.div_final, val_fraction=args.val_fraction)


def _require_data(args) -> list[PointSample]:
    if args.data is None:
        raise UsageError("--data is required")
    if not args.data.is_dir():
        raise UsageError(f"--data {args.data} is not a directory")
    return read_corpus(args.data)


def _data_hash(directory: Path) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in sorted(Path(directory).glob("*.mno")):
        h.update(p.name.encode())
        h.update(file_sha256(p).encode())
    return h.hexdigest()


def _write_run_manifest(stage: Path, values: dict) -> None:
    """Final manifest: config, data hash and hashes of every artifact."""
    out = dict(values)
    for p in sorted(stage.rglob("*")):
        if p.is_file() and p.name != "run.manifest":
            out[f"sha256.{p.relative_to(stage).as_posix()}"] = file_sha256(p)
    write_keyvalue(out, stage / "run.manifest")


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> None:
    try:
        GenSpec(args.generator, args.n, args.seed, args.noise, args.speed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    with staged_dir(args.out) as stage:
        write_corpus(stage, args.generator, args.n, args.count, args.seed, args.noise, args.speed)
        _write_run_manifest(stage, {"command": "gen-data", "generator": args.generator, "n": args.n,
                                    "count": args.count, "seed": args.seed, "noise": args.noise,
                                    "speed": args.speed})
    print(f"gen-data: wrote {args.count} {args.generator} samples to {args.out}")


def _validate_train_args(args, dataset):
    try:
        cfg = _model_config(args, dataset[0])
        tcfg = _train_config(args)
        parse_fields(tcfg.fields, cfg.out_features)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg, tcfg


def cmd_train(args) -> None:
    dataset = _require_data(args)
    cfg, tcfg = _validate_train_args(args, dataset)
    test = read_corpus(args.test) if args.test else None
    model = init_model(cfg, seed=args.seed, precision=args.precision)
    with staged_dir(args.out) as stage:
        result = train(model, dataset, tcfg, out_dir=stage)
        print(f"train: {result.steps} steps, final loss {result.losses[-1]:.5g}, "
              f"best epoch {result.best_epoch}, {result.wall_time:.1f}s")
        manifest = {"command": "train", **run_manifest(model, tcfg),
                    "data": args.data, "data_hash": _data_hash(args.data)}
        if args.test:
            manifest["test"] = args.test
        if test:
            report = evaluate(model, test, tcfg.field_groups(cfg.out_features))
            report.to_csv(stage / "metrics.csv")
            print("eval: " + ", ".join(f"{f} rl2={r:.4g}" for f, r, _ in report.rows))
        _write_run_manifest(stage, manifest)


def cmd_eval(args) -> None:
    dataset = _require_data(args)
    model, manifest = load_model(args.checkpoint)
    fields_text = args.fields if args.fields != "all" else manifest.get("fields", "all")
    try:
        fields_ = parse_fields(fields_text, model.config.out_features)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate(model, dataset, fields_)
    with staged_dir(args.out) as stage:
        report.to_csv(stage / "metrics.csv")
        _write_run_manifest(stage, {"command": "eval", "checkpoint": args.checkpoint,
                                    "data": args.data, "fields": fields_text})
    print("eval: " + ", ".join(f"{f} rl2={r:.4g} mae={m:.4g}" for f, r, m in report.rows))


def cmd_ablate(args) -> None:
    dataset = _require_data(args)
    cfg, tcfg = _validate_train_args(args, dataset)
    test = read_corpus(args.test) if args.test else None
    with staged_dir(args.out) as stage:
        result = ablate(cfg, tcfg, dataset, args.masks, test=test, seeds=args.seeds,
                        out_dir=stage / "runs")
        result.to_csv(stage / "ablation.csv")
        result.runs_to_csv(stage / "ablation_runs.csv")
        manifest = {"command": "ablate", **run_manifest(init_model(cfg), tcfg),
                    "masks": ",".join(m.code for m in args.masks),
                    "seeds": ",".join(str(s) for s in (args.seeds or [args.seed])),
                    "data": args.data, "data_hash": _data_hash(args.data)}
        if args.test:
            manifest["test"] = args.test
        _write_run_manifest(stage, manifest)
    print(f"ablate: {len(result.runs)} runs, table in {args.out / 'ablation.csv'}")


def cmd_gradcheck(args) -> None:
    rng = np.random.default_rng(args.seed)
    try:
        cfg = MnoConfig(in_features=1, out_features=2, blocks=args.blocks, dim=args.dim,
                        modes=args.modes, heads=args.heads, k=args.k, mask=args.mask)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sample = PointSample(rng.normal(size=(args.n, 3)), rng.normal(size=(args.n, 1)),
                         rng.normal(size=(args.n, 2)), "gradcheck")
    try:
        report = gradient_check(cfg, sample, h=args.h, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    with staged_dir(args.out) as stage:
        with open(stage / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "max_rel_error"])
            for name, err in report.per_param.items():
                w.writerow([name, repr(err)])
    print(f"gradcheck: max relative error {report.max_rel_error:.3g} at "
          f"{report.worst_param}{list(report.worst_index)}")


def cmd_bench(args) -> None:
    modules = MODULES if args.module == "all" else (args.module,)
    kw = dict(dim=args.dim, k=args.k, heads=args.heads, repeats=args.repeats, seed=args.seed)
    table = []
    for mod in modules:
        rows = bench_points(mod, args.n, modes=args.modes, **kw)
        table += [(mod, r.size, args.modes, r) for r in rows]
        worst = max((r.ratio for r in rows if r.ratio), default=float("nan"))
        print(f"bench {mod}: " + ", ".join(f"N={r.size} {r.wall_ms:.2f}ms" for r in rows)
              + f"; worst ratio per doubling {worst:.2f}")
    if args.m and "global" in modules:
        n_fixed = args.n[len(args.n) // 2]
        rows = bench_modes(args.m, n=n_fixed, **kw)
        table += [("global", n_fixed, r.size, r) for r in rows]
        print("bench global: " + ", ".join(f"M={r.size} {r.wall_ms:.2f}ms" for r in rows))
    with staged_dir(args.out) as stage:
        with open(stage / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["module", "N", "M", "wall_ms", "ratio"])
            for mod, n, m, r in table:
                w.writerow([mod, n, m, f"{r.wall_ms:.4f}", "" if r.ratio is None else f"{r.ratio:.4f}"])


def dump_fields(model: MnoModel, sample: PointSample, path) -> None:
    """Per-point CSV: x, y, z, truth_i, pred_i, abs_err_i."""
    if sample.n_features != model.config.in_features or sample.n_outputs != model.config.out_features:
        raise ValueError("sample channels do not match the checkpoint")
    pred = predict(model, sample)
    truth = sample.targets.astype(np.float64)
    o = truth.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"] + [f"truth_{i}" for i in range(o)]
                   + [f"pred_{i}" for i in range(o)] + [f"abs_err_{i}" for i in range(o)])
        err = np.abs(pred - truth)
        for p, t, q, e in zip(sample.positions, truth, pred, err):
            w.writerow([repr(float(v)) for v in (*p, *t, *q, *e)])


def cmd_dump_fields(args) -> None:
    model, _ = load_model(args.checkpoint)
    sample = read_pointset(args.sample)
    try:
        with staged_dir(args.out) as stage:
            dump_fields(model, sample, stage / "fields.csv")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"dump-fields: {sample.n_points} rows to {args.out / 'fields.csv'}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "dump-fields": cmd_dump_fields,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"mno: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mno {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as runtime failure
        log.debug("failure", exc_info=True)
        print(f"mno {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
