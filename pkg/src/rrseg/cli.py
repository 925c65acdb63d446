"""Command-line interface: phantom data, training, prediction, ensembling,
evaluation, and the gradient self-check.

Exit codes: 0 success, 1 validation problem (bad flag, config key, or input
file; the message names the offender), 2 runtime failure.  Every command
routes randomness through one seeded generator and echoes the seed; commands
that produce outputs write the effective configuration next to them, so a
rerun with identical inputs reproduces identical results.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _setup_threads():
    """RRSEG_THREADS caps BLAS/OpenMP workers; must run before numpy loads."""
    n = os.environ.get("RRSEG_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rrseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--dims", type=int, default=32, help="cubic volume edge length")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise-std", type=float, default=None)
    sp.add_argument("--oracle", action="store_true",
                    help="oracle-learnable mode: no noise, fixed geometry")

    sp = sub.add_parser("train", help="train a model from a config and manifest")
    sp.add_argument("--config", help="JSON config (defaults used when omitted)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config key (dotted paths ok)")

    sp = sub.add_parser("predict", help="run inference on one volume")
    sp.add_argument("--model", required=True, help="RCKP checkpoint")
    sp.add_argument("--in", dest="input", required=True, help="input RVOL image")
    sp.add_argument("--out", required=True, help="output RVOL probability map")

    sp = sub.add_parser("ensemble", help="fuse probability maps")
    sp.add_argument("maps", nargs="+", help="input RVOL probability maps")
    sp.add_argument("--out-map", required=True)
    sp.add_argument("--out-mask", required=True)
    sp.add_argument("--report", required=True, help="confidence report JSON path")
    sp.add_argument("--method", choices=("confidence", "mean", "geomean"),
                    default="confidence")
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = sub.add_parser("eval", help="score predictions against a manifest")
    sp.add_argument("--pred", required=True, help="directory of <case_id>.rvol predictions")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    sp.add_argument("--precision", type=int, choices=(32, 64), default=64)
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(cfg_dict: dict, overrides: list[str]) -> dict:
    from . import errors
    for item in overrides:
        if "=" not in item:
            raise errors.InvalidConfig(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        node = cfg_dict
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise errors.InvalidConfig(f"override references unknown key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise errors.InvalidConfig(f"override references unknown key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return cfg_dict


def _echo_config(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cmd_phantom(args) -> int:
    from .phantom import PhantomConfig, generate_dataset
    cfg = PhantomConfig.for_edge(args.dims, count=args.count, seed=args.seed,
                                 oracle=args.oracle)
    if args.noise_std is not None:
        cfg.noise_std = args.noise_std
    cfg.validate()
    print(f"seed: {cfg.seed}")
    manifest = generate_dataset(cfg, args.out)
    from dataclasses import asdict
    _echo_config(Path(args.out) / "effective_config.json", asdict(cfg))
    print(f"wrote {cfg.count} cases; manifest: {manifest}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from . import trainer
    cfg_dict = (trainer.TrainConfig.from_json(args.config).to_dict()
                if args.config else trainer.TrainConfig().to_dict())
    cfg_dict = _apply_overrides(cfg_dict, args.overrides)
    cfg = trainer.TrainConfig.from_dict(cfg_dict)
    manifest = Path(args.manifest)
    if not manifest.exists():
        from . import errors
        raise errors.IoError(f"manifest not found: {manifest}")
    print(f"seed: {cfg.seed}")
    _echo_config(Path(args.out) / "effective_config.json", cfg.to_dict())
    result = trainer.train(cfg, manifest, args.out, log=print)
    print(f"best validation mean dice {result.best_val_dice:.4f} at epoch "
          f"{result.best_epoch}; checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    from . import errors, network
    from .volume import Volume, normalize_nonzero, read_rvol, write_rvol
    params, _, _ = network.load_checkpoint(args.model)
    model = network.model_from_params(params)
    vol = read_rvol(args.input)
    if not isinstance(vol, Volume):
        raise errors.IoError(f"{args.input} is not a float32 image volume")
    probs = network.predict(model, normalize_nonzero(vol))
    write_rvol(probs, args.out)
    _echo_config(Path(args.out).parent / "effective_config.json",
                 {"command": "predict", "model": args.model,
                  "input": args.input, "output": args.out})
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_ensemble(args) -> int:
    from . import errors
    from .ensemble import (ProbabilityMapSet, binarize, confidence_ensemble,
                           ensemble_geomean, ensemble_mean)
    from .volume import Volume, read_rvol, write_rvol
    maps = []
    for path in args.maps:
        v = read_rvol(path)
        if not isinstance(v, Volume):
            raise errors.IoError(f"{path} is not a float32 probability map")
        maps.append(v)
    pset = ProbabilityMapSet(maps=maps, model_ids=[Path(p).stem for p in args.maps])
    fused, report = confidence_ensemble(pset, args.threshold)
    if args.method == "mean":
        fused = ensemble_mean(pset)
    elif args.method == "geomean":
        fused = ensemble_geomean(pset)
    write_rvol(fused, args.out_map)
    write_rvol(binarize(fused, args.threshold), args.out_mask)
    Path(args.report).write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")
    _echo_config(Path(args.out_map).parent / "effective_config.json",
                 {"command": "ensemble", "method": args.method,
                  "threshold": args.threshold, "maps": list(args.maps)})
    print(f"fused {pset.count} maps -> {args.out_map}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import errors, metrics, trainer
    from .ensemble import binarize
    from .volume import LabelMask, Volume, labels_to_regions, read_rvol
    entries = trainer.read_manifest(args.manifest)
    pred_dir = Path(args.pred)
    preds, truths = {}, {}
    for case_id, _, label_path in entries:
        truths[case_id] = labels_to_regions(read_rvol(label_path)).data
        pred_path = pred_dir / f"{case_id}.rvol"
        if not pred_path.exists():
            raise errors.MissingCase(f"no prediction for case {case_id} at {pred_path}")
        pred = read_rvol(pred_path)
        if isinstance(pred, Volume):
            pred = binarize(pred, args.threshold)
        if not isinstance(pred, LabelMask) or not pred.is_regions:
            pred = labels_to_regions(pred)
        preds[case_id] = pred.data
    results, summary = metrics.evaluate(preds, truths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_results_csv(results, out / "results.csv")
    metrics.write_summary_csv(summary, out / "summary.csv")
    _echo_config(out / "effective_config.json",
                 {"command": "eval", "pred": str(pred_dir),
                  "manifest": str(args.manifest), "threshold": args.threshold})
    for name in ("et", "tc", "wt"):
        mean, std = summary[f"dice_{name}"]
        print(f"dice_{name}: {mean:.4f} +- {std:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import selfcheck
    threshold = selfcheck.THRESHOLDS[args.precision]
    print(f"gradient self-check at {args.precision}-bit "
          f"(finite-difference oracle in 64-bit, threshold {threshold:g})")
    results = selfcheck.run_suite(args.precision, log=print)
    worst = max(results.values())
    ok = worst < threshold
    print(f"worst {worst:.3e} {'<' if ok else '>='} {threshold:g}: "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


_COMMANDS = {
    "phantom": _cmd_phantom,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "ensemble": _cmd_ensemble,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    from . import errors
    try:
        return _COMMANDS[args.command](args)
    except (errors.InvalidConfig, errors.IoError, errors.TooFewCases,
            errors.MissingCase, errors.UnknownLabel, errors.CropTooLarge) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except errors.RRSegError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # never panic past the top level
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
