"""Command-line entry point: ``datadrop {train,score,two-round,loo-oracle,check}``.

Exit codes: 0 ok, 1 configuration/input error, 2 numeric/runtime failure,
3 self-test failure. Settings resolve as flags > ``--config`` JSON > defaults,
and the resolved values are echoed into ``manifest.json`` in the output
directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import backend, persist, selfcheck
from .data import CsvSchema, Dataset, load_csv, load_idx, standardize, synth_blobs
from .ihvp import IhvpConfig, IhvpError
from .influence import InfluenceError, score_all
from .loo import LooError, loo_oracle
from .model import ModelSpec
from .pipeline import PipelineError, carve_validation, multi_round, two_round, write_round_counts, write_two_round
from .trainer import TrainConfig, evaluate, objective_spec, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "epochs": 30,
    "batch_size": 32,
    "lr": "0:0.1",
    "momentum": 0.9,
    "weight_decay": 0.0,
    "init": "scaled-normal-fan-in",
    "no_shuffle": False,
    "l2_reg": None,
    "ihvp": "cg",
    "damping": 0.01,
    "cg_tol": 1e-10,
    "cg_max_iter": 1000,
    "lissa_depth": 1000,
    "lissa_scale": 10.0,
    "lissa_repeats": 4,
    "lissa_batch": 8,
    "rounds": 2,
    "val_fraction": 0.1,
    "round2_seed": None,
    "workers": 1,
    "standardize": False,
    "label_column": "label",
    "max_samples": 500,
    "tol": 1e-8,
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- argument plumbing ----------------------------------------------------

def _add_common(p, *, data=True, spec=True):
    if data:
        p.add_argument("--data", required=True, help="CSV path, idx:IMAGES,LABELS or synth:key=value,...")
        p.add_argument("--val-data", help="validation data (same forms as --data)")
    if spec:
        p.add_argument("--spec", required=True, help="ModelSpec as a JSON file or JSON text")
        p.add_argument("--l2-reg", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of defaults (flags win)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--label-column", default=None)
    p.add_argument("--standardize", action="store_true", default=None,
                   help="standardize features with training-set statistics")


def _add_train(p):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", default=None, help="rate, or schedule like 0:0.1,15:0.01")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--init", choices=["scaled-normal-fan-in", "scaled-uniform-fan-avg"], default=None)
    p.add_argument("--no-shuffle", action="store_true", default=None)


def _add_solver(p):
    p.add_argument("--ihvp", choices=["cg", "lissa", "both"], default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--cg-tol", type=float, default=None)
    p.add_argument("--cg-max-iter", type=int, default=None)
    p.add_argument("--lissa-depth", type=int, default=None)
    p.add_argument("--lissa-scale", type=float, default=None)
    p.add_argument("--lissa-repeats", type=int, default=None)
    p.add_argument("--lissa-batch", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="datadrop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("score", help="influence report for a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-data", "--data", dest="data", required=True)
    p.add_argument("--val-data", required=True)
    _add_common(p, data=False, spec=False)
    p.add_argument("--weight-decay", type=float, default=None,
                   help="weight decay the checkpoint was trained with")
    _add_solver(p)

    p = sub.add_parser("two-round", help="train, drop unfavorable samples, retrain")
    _add_common(p)
    _add_train(p)
    _add_solver(p)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--round2-seed", type=int, default=None)

    p = sub.add_parser("loo-oracle", help="compare influence totals with leave-one-out retraining")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--tol", type=float, default=None)

    p = sub.add_parser("check", help="gradient / HVP / CG self-tests")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--out", help="optional directory for a manifest of the results")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(from_file)
    for key, value in vars(args).items():
        if value is not None and key in DEFAULTS:
            cfg[key] = value
    return cfg


def parse_schedule(text) -> tuple[tuple[int, float], ...]:
    if isinstance(text, (int, float)):
        return ((0, float(text)),)
    if isinstance(text, list):
        return tuple((int(e), float(r)) for e, r in text)
    text = str(text)
    if ":" not in text:
        return ((0, float(text)),)
    return tuple((int(e), float(r)) for e, r in (part.split(":") for part in text.split(",")))


def train_config(cfg) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       lr_schedule=parse_schedule(cfg["lr"]), momentum=cfg["momentum"],
                       weight_decay=cfg["weight_decay"], seed=cfg["seed"], init=cfg["init"],
                       shuffle=not cfg["no_shuffle"])


def ihvp_config(cfg) -> IhvpConfig:
    return IhvpConfig(method=cfg["ihvp"], damping=cfg["damping"], cg_tol=cfg["cg_tol"],
                      cg_max_iter=cfg["cg_max_iter"], lissa_depth=cfg["lissa_depth"],
                      lissa_scale=cfg["lissa_scale"], lissa_repeats=cfg["lissa_repeats"],
                      lissa_batch=cfg["lissa_batch"], seed=cfg["seed"])


def load_spec(text: str, l2_reg) -> ModelSpec:
    try:
        raw = json.loads(text) if text.lstrip().startswith("{") else json.loads(Path(text).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--spec is neither a JSON file nor JSON text: {exc}") from None
    spec = ModelSpec.from_dict(raw)
    return spec.with_l2(l2_reg) if l2_reg is not None else spec


def _synth(arg: str):
    opts = dict(kv.split("=", 1) for kv in arg.split(",") if kv)
    known = {"n", "dim", "classes", "sep", "flip", "seed", "center_seed", "id_offset"}
    if set(opts) - known:
        raise ConfigError(f"unknown synth options {sorted(set(opts) - known)}")
    return synth_blobs(int(opts.get("n", 500)), int(opts.get("dim", 2)), int(opts.get("classes", 3)),
                       float(opts.get("sep", 3.0)), float(opts.get("flip", 0.0)),
                       int(opts.get("seed", 0)),
                       None if "center_seed" not in opts else int(opts["center_seed"]),
                       int(opts.get("id_offset", 0)))


def load_data(arg: str, spec: ModelSpec | None, cfg) -> tuple[Dataset, str, object]:
    """Returns (dataset, input checksum, planted truth or None)."""
    if arg.startswith("synth:"):
        ds, truth = _synth(arg[len("synth:"):])
        return ds, ds.checksum(), truth
    if arg.startswith("idx:"):
        try:
            img, lab = arg[len("idx:"):].split(",")
        except ValueError:
            raise ConfigError("idx data must be given as idx:IMAGES,LABELS") from None
        return load_idx(img, lab), _file_digest(img, lab), None
    task = "regression" if spec is not None and not spec.is_classifier else "classification"
    ds = load_csv(arg, CsvSchema(label_column=cfg["label_column"], task=task))
    return ds, _file_digest(arg), None


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def prepare_out(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {out} is not empty; pass --overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_input_dim(spec, ds, what):
    if ds.input_dim != spec.input_dim:
        raise ConfigError(f"{what} has {ds.input_dim} features but spec.input_dim = {spec.input_dim}")


# -- commands -------------------------------------------------------------

def cmd_train(args, cfg, out, manifest) -> int:
    spec = load_spec(args.spec, cfg["l2_reg"])
    ds, digest, _ = load_data(args.data, spec, cfg)
    manifest["input_checksums"]["data"] = digest
    _check_input_dim(spec, ds, "--data")
    val = None
    if args.val_data:
        val, vdigest, _ = load_data(args.val_data, spec, cfg)
        manifest["input_checksums"]["val_data"] = vdigest
    if cfg["standardize"]:
        ds, *rest = standardize(ds, *([val] if val is not None else []))
        val = rest[0] if rest else None
    tc = train_config(cfg)
    params = train(spec, ds, tc)
    ckpt = out / "model.ckpt"
    persist.save_checkpoint(ckpt, spec, params,
                            {"seed": tc.seed, "config": tc.to_dict(), "dataset_checksum": ds.checksum()})
    manifest["output_paths"] = {"checkpoint": str(ckpt), "checkpoint_meta": f"{ckpt}.json"}
    manifest["results"] = {"train": evaluate(spec, params, ds).to_dict()}
    if val is not None:
        manifest["results"]["val"] = evaluate(spec, params, val).to_dict()
    return EXIT_OK


def cmd_score(args, cfg, out, manifest) -> int:
    try:
        spec, params = persist.load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None
    manifest["input_checksums"]["checkpoint"] = _file_digest(args.checkpoint)
    train_set, digest, _ = load_data(args.data, spec, cfg)
    val_set, vdigest, _ = load_data(args.val_data, spec, cfg)
    manifest["input_checksums"].update(train_data=digest, val_data=vdigest)
    _check_input_dim(spec, train_set, "--train-data")
    _check_input_dim(spec, val_set, "--val-data")
    if cfg["standardize"]:
        train_set, val_set = standardize(train_set, val_set)
    obj = objective_spec(spec, TrainConfig(weight_decay=cfg["weight_decay"]))
    report = score_all(obj, params, train_set, val_set, ihvp_config(cfg), workers=cfg["workers"])
    path = out / "influence.jsonl"
    persist.save_report(path, report)
    manifest["output_paths"] = {"report": str(path)}
    manifest["results"] = {"n": report.n, "k": report.k, "ihvp_solve_count": report.ihvp_solve_count,
                           "max_residual": float(report.ihvp_residuals.max()),
                           "unfavorable": sum(1 for s in report.scores if s.total > 0)}
    return EXIT_OK


def cmd_two_round(args, cfg, out, manifest) -> int:
    spec = load_spec(args.spec, cfg["l2_reg"])
    train_set, digest, truth = load_data(args.data, spec, cfg)
    manifest["input_checksums"]["data"] = digest
    _check_input_dim(spec, train_set, "--data")
    if args.val_data:
        val_set, vdigest, _ = load_data(args.val_data, spec, cfg)
        manifest["input_checksums"]["val_data"] = vdigest
    else:
        train_set, val_set = carve_validation(train_set, spec, cfg["val_fraction"], cfg["seed"])
    if cfg["standardize"]:
        train_set, val_set = standardize(train_set, val_set)
    tc, ic = train_config(cfg), ihvp_config(cfg)
    if cfg["rounds"] < 1:
        raise ConfigError("--rounds must be >= 1")
    try:
        result = two_round(spec, train_set, val_set, tc, ic, round2_seed=cfg["round2_seed"],
                           workers=cfg["workers"])
    except PipelineError as exc:
        if exc.report is not None:
            persist.save_report(out / "influence.jsonl", exc.report)
            manifest["output_paths"] = {"report": str(out / "influence.jsonl")}
        raise
    paths = write_two_round(out, spec, result, tc, train_set.checksum())
    manifest["output_paths"] = paths
    manifest["results"] = {
        "train_size": result.train_size,
        "dropped": len(result.dropped_ids),
        "reduced_train_size": result.reduced_train_size,
        "round1_val": result.metrics_round1.to_dict(),
        "round2_val": result.metrics_round2.to_dict(),
    }
    if truth is not None and truth.flipped_ids:
        persist.save_ids(out / "planted_flipped_ids.txt", truth.flipped_ids)
        hit = len(result.dropped_ids & truth.flipped_ids)
        manifest["results"]["planted_precision"] = hit / max(1, len(result.dropped_ids))
        manifest["results"]["planted_recall"] = hit / len(truth.flipped_ids)
    series = None
    try:
        series = multi_round(spec, train_set, val_set, tc, ic, cfg["rounds"], workers=cfg["workers"])
    except PipelineError as exc:
        series = exc.series
        raise
    finally:
        if series is not None:
            write_round_counts(out / "round_counts.csv", series)
            paths["round_counts"] = str(out / "round_counts.csv")
            manifest["results"]["round_counts"] = series.counts
    return EXIT_OK


def cmd_loo_oracle(args, cfg, out, manifest) -> int:
    spec = load_spec(args.spec, cfg["l2_reg"])
    train_set, digest, _ = load_data(args.data, spec, cfg)
    if not args.val_data:
        raise ConfigError("loo-oracle needs --val-data")
    val_set, vdigest, _ = load_data(args.val_data, spec, cfg)
    manifest["input_checksums"].update(data=digest, val_data=vdigest)
    _check_input_dim(spec, train_set, "--data")
    if cfg["standardize"]:
        train_set, val_set = standardize(train_set, val_set)
    try:
        res = loo_oracle(spec, train_set, val_set, ihvp_config(cfg), tol=cfg["tol"],
                         max_samples=cfg["max_samples"], force=args.force)
    except LooError as exc:
        if "cap" in str(exc):
            raise ConfigError(str(exc)) from None
        raise
    table = out / "loo.csv"
    lines = ["id,influence_total,loo_delta,converged"]
    lines += [f"{r['id']},{r['influence_total']!r},{r['loo_delta']!r},{int(r['converged'])}"
              for r in res.rows()]
    persist.write_atomic(table, "\n".join(lines) + "\n")
    persist.save_report(out / "influence.jsonl", res.report)
    persist.write_json(out / "summary.json", res.summary())
    manifest["output_paths"] = {"loo": str(table), "report": str(out / "influence.jsonl"),
                                "summary": str(out / "summary.json")}
    manifest["results"] = res.summary()
    return EXIT_OK


def cmd_check(args, cfg, out, manifest) -> int:
    results = selfcheck.run_all(args.seed, fault=1e-3 if args.inject_fault else 0.0,
                               draws=args.draws)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"backend={backend.name()} {len(results) - len(failed)}/{len(results)} passed")
    manifest["results"] = {"checks": {r.name: {"passed": r.passed, "worst": r.worst}
                                      for r in results},
                           "failed": failed}
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "score": cmd_score,
    "two-round": cmd_two_round,
    "loo-oracle": cmd_loo_oracle,
    "check": cmd_check,
}


def exit_code_for(exc: BaseException) -> int | None:
    if isinstance(exc, (ArithmeticError, IhvpError, InfluenceError, PipelineError, LooError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, OSError, KeyError, TypeError)):
        return EXIT_CONFIG
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = prepare_out(args.out, args.overwrite) if args.out else None
    except (ValueError, OSError) as exc:
        print(f"datadrop {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config_snapshot": cfg,
        "backend": backend.name(),
        "input_checksums": {},
        "output_paths": {},
        "exit_status": None,
    }
    start = time.perf_counter()
    status = EXIT_NUMERIC
    try:
        status = COMMANDS[args.command](args, cfg, out, manifest)
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        status = code
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"datadrop {args.command}: {exc}", file=sys.stderr)
    finally:
        manifest["wall_time_seconds"] = time.perf_counter() - start
        manifest["exit_status"] = status
        if out is not None:
            persist.write_json(out / "manifest.json", manifest)
    return status


if __name__ == "__main__":
    sys.exit(main())
