"""Command-line entry point: ``ovdkt {gen,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 missing data, 4 numeric
failure, 5 artifact mismatch, 6 gradient check failure.

Data directory layout written by ``gen``::

    run_config.json  resolved configuration (read back by train/eval)
    train.json       train split
    eval.json        eval split
    bank.json        text embedding bank
    teacher_cache.json
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import ablation
from .concepts import ORACLE, SIMILARITY, PriorConfigError
from .config import ConfigError, RunConfig
from .detector import CheckpointError, load_checkpoint, save_checkpoint
from .embedding import EmbeddingBankError, import_embedding_bank
from .evaluator import COMBINED, POSTPROCESS_MODES, SIMILARITY_ONLY, InferenceError, InferenceOptions
from .evaluator import evaluate, infer_split, write_results_csv
from .gradcheck import GradcheckSizes, run_gradcheck
from .scenes import Dataset, load_cache, load_split, save_cache, save_split
from .trainer import TrainingError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_DATA = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5
EXIT_GRADCHECK = 6

DATA_FILES = ("run_config.json", "train.json", "eval.json", "bank.json", "teacher_cache.json")
CHECKPOINT_FILE = "checkpoint.json"
TRAIN_LOG_FILE = "train_log.csv"
METRICS_FILE = "metrics.csv"
DETECTIONS_FILE = "detections_{}.json"  # one list per postprocess mode
FILTER_NAMES = {"similarity": SIMILARITY, "oracle": ORACLE}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(args, data_dir: Path | None = None) -> RunConfig:
    """``--config`` if given, else the config saved next to the data; ``--seed`` wins over both."""
    if args.config:
        rc = RunConfig.load(args.config)
    elif data_dir is not None and (data_dir / "run_config.json").exists():
        rc = RunConfig.load(data_dir / "run_config.json")
    else:
        rc = RunConfig.from_dict({})
    if getattr(args, "seed", None) is not None:
        rc = replace(rc, seed=args.seed)
    return rc


def _out_dir(args, rc: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_data(data_dir: Path, names) -> None:
    missing = [n for n in names if not (data_dir / n).is_file()]
    if missing:
        raise CliError(EXIT_MISSING_DATA, f"missing data in {data_dir}: {', '.join(missing)} (run 'ovdkt gen' first)")


def _load_data(data_dir: Path, rc: RunConfig, train_split: bool = True):
    _require_data(data_dir, ["bank.json", "eval.json"] + (["train.json", "teacher_cache.json"] if train_split else []))
    try:
        bank = import_embedding_bank(data_dir / "bank.json", rc.category_space)
        ev = load_split(data_dir / "eval.json")
        tr = load_split(data_dir / "train.json") if train_split else ()
        cache = load_cache(data_dir / "teacher_cache.json") if train_split else None
    except (EmbeddingBankError, ValueError, KeyError) as exc:
        raise CliError(EXIT_MISMATCH, f"data in {data_dir} does not match the configuration: {exc}") from exc
    return bank, Dataset(tr, ev), cache


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    rc = _load_config(args)
    out = Path(args.out) if args.out else Path(rc.output_dir)
    world = ablation.build_world(rc)
    out.mkdir(parents=True, exist_ok=True)
    # write into a scratch dir first so a failure never leaves a partial set
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        tmp = Path(tmp)
        (tmp / "run_config.json").write_text(rc.to_json())
        save_split(world.dataset.train, tmp / "train.json")
        save_split(world.dataset.eval, tmp / "eval.json")
        world.bank.save(tmp / "bank.json")
        save_cache(world.cache, tmp / "teacher_cache.json")
        for name in DATA_FILES:
            os.replace(tmp / name, out / name)
    print(f"wrote {len(world.dataset.train)} train / {len(world.dataset.eval)} eval scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = Path(args.data)
    _require_data(data, DATA_FILES)
    rc = _load_config(args, data)
    bank, ds, cache = _load_data(data, rc)
    cfg = rc.train_config()
    out = _out_dir(args, rc)

    def progress(epoch, loss):
        print(f"epoch {epoch}/{cfg.total_epochs} phase {cfg.phase(epoch)} lr {cfg.lr(epoch):.3g} loss {loss:.6f}",
              flush=True)

    try:
        state, tlog = train(ds.train, cache, bank, cfg, rc.category_space, progress=progress)
    except TrainingError as exc:
        raise CliError(EXIT_NUMERIC, f"numeric failure (scene {exc.scene_id}): {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    save_checkpoint(state, out / CHECKPOINT_FILE, extra={"config": rc.to_dict()})
    tlog.write_csv(out / TRAIN_LOG_FILE)
    print(f"checkpoint: {out / CHECKPOINT_FILE}\nlog: {out / TRAIN_LOG_FILE} ({len(tlog.records)} steps)")
    return EXIT_OK


def _filter_from_flags(rc: RunConfig, args):
    changes = {}
    if args.filter:
        changes["method"] = FILTER_NAMES[args.filter]
    if args.rho is not None:
        changes["rho"] = args.rho
    if args.priors is not None:
        changes["max_priors"] = args.priors
    try:
        return replace(rc.filter, **changes)
    except PriorConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def cmd_eval(args) -> int:
    data = Path(args.data)
    if not Path(args.checkpoint).is_file():
        raise CliError(EXIT_MISSING_DATA, f"checkpoint not found: {args.checkpoint}")
    rc = _load_config(args, data)
    bank, ds, _ = _load_data(data, rc, train_split=False)
    try:
        state, _ = load_checkpoint(args.checkpoint)
    except (CheckpointError, KeyError) as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from exc
    D = bank.dimension
    if state.D != D or (ds.eval and ds.eval[0].context.shape[1] != D):
        raise CliError(EXIT_MISMATCH, f"checkpoint embedding dimension D={state.D} does not match data D={D}")
    if state.N != rc.detector.num_queries:
        raise CliError(EXIT_MISMATCH, f"checkpoint has N={state.N} queries but the data config expects "
                                      f"N={rc.detector.num_queries}")
    fc = _filter_from_flags(rc, args)
    if fc.max_priors > state.N:
        raise CliError(EXIT_MISMATCH, f"{fc.max_priors} priors need at least as many queries; checkpoint has N={state.N}")
    if fc.max_priors > len(rc.category_space):
        raise CliError(EXIT_CONFIG, f"--priors {fc.max_priors} exceeds the {len(rc.category_space)} categories")
    modes = args.postprocess or [rc.eval.postprocess]
    rows, dets_by_mode = [], {}
    for mode in dict.fromkeys(modes):
        opts = InferenceOptions(postprocess=mode, score_floor=rc.eval.score_floor, tau_cls=rc.train.tau_cls,
                                background_noise=rc.scenes.background_noise, seed=rc.seed)
        try:
            dets = infer_split(state, ds.eval, bank, fc, rc.category_space, opts)
        except InferenceError as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from exc
        res = evaluate(dets, ds.eval, rc.category_space)
        rows.append(({"postprocess": mode, "filter": fc.method, "rho": fc.rho, "priors": fc.max_priors}, res))
        dets_by_mode[mode] = [d.to_json() for d in dets]
        print(f"{mode}: ap50_novel {res.ap50_novel:.4f} ap50_base {res.ap50_base:.4f} map_all {res.map_all:.4f}")
    out = _out_dir(args, rc)
    write_results_csv(rows, out / METRICS_FILE)
    for mode, dets in dets_by_mode.items():
        (out / DETECTIONS_FILE.format(mode)).write_text(json.dumps(dets))
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _load_config(args)
    if args.suite not in ablation.SUITES:
        raise CliError(EXIT_CONFIG, f"unknown suite {args.suite!r}; expected one of {', '.join(ablation.SUITES)}")
    variants = ablation.suite_variants(args.suite, rc)
    if args.suite == "priors_grid" and 2 * rc.filter.max_priors > rc.detector.num_queries:
        raise CliError(EXIT_CONFIG, "priors_grid evaluates 2L priors; detector.num_queries must be >= 2 * filter.max_priors")
    seeds = [rc.seed + k for k in range(args.seeds)]
    try:
        rows = ablation.ablation_harness(rc, variants, seeds, progress=lambda m: print(m, flush=True))
    except TrainingError as exc:
        raise CliError(EXIT_NUMERIC, f"numeric failure (scene {exc.scene_id}): {exc}") from exc
    out = _out_dir(args, rc)
    path = out / f"ablation_{args.suite}.csv"
    ablation.write_harness_csv(rows, rc, path)
    for name, v in ablation.mean_by_variant(rows).items():
        print(f"{name}: mean ap50_novel {v:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _parse_sizes(text: str | None) -> GradcheckSizes:
    if not text:
        return GradcheckSizes()
    kw = {}
    try:
        for part in text.split(","):
            k, v = part.split("=")
            kw[k.strip()] = int(v)
        sizes = GradcheckSizes(**kw)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"bad --sizes {text!r}; expected e.g. N=4,G=4,D=8,Dq=8,H=8,K=6,M=3") from exc
    if min(kw.values(), default=1) < 1 or sizes.M > sizes.N:
        raise CliError(EXIT_CONFIG, "sizes must be positive with M <= N")
    return sizes


def cmd_gradcheck(args) -> int:
    sizes = _parse_sizes(args.sizes)
    if args.trials < 1 or args.tol < 0:
        raise CliError(EXIT_CONFIG, "--trials must be >= 1 and --tol >= 0")
    rows = run_gradcheck(args.trials, args.tol, args.seed or 0, sizes)
    width = max(len(r.component) for r in rows)
    print(f"{'component':<{width}}  worst_rel_error  status")
    for r in rows:
        print(f"{r.component:<{width}}  {r.worst_error:15.3e}  {'ok' if r.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w") as fh:
            fh.write("component,worst_rel_error,trials,tolerance,passed\n")
            for r in rows:
                fh.write(f"{r.component},{r.worst_error!r},{r.trials},{r.tolerance!r},{r.passed}\n")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovdkt", description="Open-vocabulary detection with knowledge transfer, on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        if data:
            sp.add_argument("--data", required=True, help="directory written by 'ovdkt gen'")

    sp = sub.add_parser("gen", help="generate the synthetic dataset, text bank and teacher cache")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a detector on generated data")
    common(sp, data=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(sp, data=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--filter", choices=sorted(FILTER_NAMES))
    sp.add_argument("--rho", type=float)
    sp.add_argument("--priors", type=int, help="number of priors L")
    sp.add_argument("--postprocess", choices=POSTPROCESS_MODES, action="append",
                    help=f"repeatable; default from config ({SIMILARITY_ONLY} or {COMBINED})")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation suite and write a CSV")
    common(sp)
    sp.add_argument("--suite", required=True, help=f"one of: {', '.join(ablation.SUITES)}")
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds starting at the config seed")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--sizes", help="e.g. N=4,G=4,D=8,Dq=8,H=8,K=6,M=3")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="also write gradcheck.csv here")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, PriorConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
