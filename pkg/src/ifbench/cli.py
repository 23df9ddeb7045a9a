"""Command-line entry point. Exit codes: 0 success, 1 configuration error, 2 runtime failure."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args):
    from .harness.config import ExperimentConfig, toy_preset

    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif args.family:
        cfg = toy_preset(args.family, seed=args.seed or 0)
    else:
        raise UsageError("give --config or --family")
    changes = {k: getattr(args, k) for k in ("name", "epochs", "seed", "steps_per_epoch", "output_root", "workers")
               if getattr(args, k, None) is not None}
    return cfg.replace(**changes) if changes else cfg


def _manifests(path, purpose):
    from .dataio import read_manifest

    ms = read_manifest(path)
    if purpose:
        ms = [m for m in ms if m.purpose == purpose]
    if not ms:
        raise UsageError(f"no plates with purpose {purpose!r} in {path}")
    return ms


def cmd_ingest(args):
    from .dataio import build_manifest, check_disjoint, load_split_config, write_manifest

    ms = build_manifest(args.root, load_split_config(args.split_config))
    check_disjoint(ms)
    write_manifest(ms, args.out)
    for m in ms:
        print(f"{m.plate_barcode}\t{m.purpose}\t{len(m.sites)} sites\t{len(m.rejected)} rejected")


def cmd_toygen(args):
    from .dataio import generate_toy_dataset, write_manifest

    ms = generate_toy_dataset(args.out, seed=args.seed, wells_per_group=args.wells_per_group,
                              sites_per_well=args.sites_per_well, style=args.style,
                              test_wells_per_group=args.test_wells_per_group)
    write_manifest(ms, Path(args.out) / "manifest.csv")
    for m in ms:
        print(f"{m.plate_barcode}\t{m.purpose}\t{len(m.sites)} sites")


def cmd_train(args):
    from .harness.run import run_experiment

    print(run_experiment(_config(args)))


def cmd_infer(args):
    from .dataio import PreprocessParams, load_plate
    from .harness.run import infer_sites
    from .training import load_state

    state = load_state(args.checkpoint)
    pairs = [p for m in _manifests(args.manifest, args.purpose)
             for p in load_plate(m, PreprocessParams(target_size=args.target_size))]
    secs = infer_sites(state, pairs, Path(args.out), args.seed)
    print(f"{len(secs)} sites, {sum(secs) / len(secs):.4f} s/site")


def cmd_evaluate(args):
    from .dataio import PreprocessParams
    from .metrics import evaluate_model

    report = evaluate_model(args.pred_dir, _manifests(args.manifest, args.purpose),
                            PreprocessParams(target_size=args.target_size), args.model)
    report.save(args.out)
    print(json.dumps(report.summary(), indent=2, sort_keys=True))


def cmd_profile(args):
    from .dataio import PreprocessParams, load_plate
    from .harness.run import load_predictions, profile_pairs

    pairs = [p for m in _manifests(args.manifest, args.purpose)
             for p in load_plate(m, PreprocessParams(target_size=args.target_size))]
    stacks = load_predictions(Path(args.pred_dir), pairs) if args.pred_dir else None
    ft = profile_pairs(pairs, args.source, stacks, workers=args.workers)
    ft.to_csv(args.out)
    print(f"{len(ft)} objects, {len(ft.feature_columns)} features -> {args.out}")


def cmd_analyze(args):
    import pandas as pd

    from .harness.run import analyze_tables
    from .profiling import FeatureTable

    real = FeatureTable(pd.read_csv(args.real))
    synth = FeatureTable(pd.read_csv(args.synth))
    res = analyze_tables(real, synth, args.model, Path(args.out), args.seed)
    for n in res["notices"]:
        print(f"notice: {n}", file=sys.stderr)
    for k in sorted(res):
        if k.startswith("moa_"):
            print(f"{k}: F1 six-class {res[k]['f1_six_class']:.3f}, binary {res[k]['f1_binary_dmso']:.3f}")


def cmd_crosseval(args):
    from .harness.run import run_crosseval

    run_dir, m = run_crosseval(_config(args), styles=args.styles)
    print(run_dir)
    print(json.dumps(m.to_dict(), indent=2, sort_keys=True))


def cmd_report(args):
    from .harness.report import render_report

    s = render_report(args.runs, args.out)
    for n in s["notices"]:
        print(f"notice: {n}", file=sys.stderr)
    print(json.dumps(s["sections"], indent=2, sort_keys=True))


def cmd_resources(args):
    from .harness.resources import record_resources

    print(record_resources(args.run, n_sites=args.sites).to_json())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ifbench", description="Brightfield-to-fluorescence benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="index real plates into a manifest")
    s.add_argument("--root", required=True)
    s.add_argument("--split-config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("toygen", help="render synthetic toy plates")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--wells-per-group", type=int, default=4)
    s.add_argument("--test-wells-per-group", type=int, default=1)
    s.add_argument("--sites-per-well", type=int, default=2)
    s.add_argument("--style", default="A")
    s.set_defaults(fn=cmd_toygen)

    for name, fn, help_ in (("train", cmd_train, "run a full experiment"),
                            ("crosseval", cmd_crosseval, "cross-style generalisation protocol")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--family", help="use the toy preset for this family")
        s.add_argument("--name")
        s.add_argument("--epochs", type=int)
        s.add_argument("--steps-per-epoch", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--output-root")
        if name == "crosseval":
            s.add_argument("--styles", nargs="+", default=["A", "B"])
        s.set_defaults(fn=fn)

    def data_args(s):
        s.add_argument("--manifest", required=True)
        s.add_argument("--purpose", default="test")
        s.add_argument("--target-size", type=int, default=512)

    s = sub.add_parser("infer", help="predict IF for a manifest split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    data_args(s)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("evaluate", help="score stored predictions")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--model", default="model")
    s.add_argument("--out", required=True)
    data_args(s)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("profile", help="segment and measure real or predicted IF")
    s.add_argument("--pred-dir", help="profile predictions instead of ground truth")
    s.add_argument("--source", default="real")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    data_args(s)
    s.set_defaults(fn=cmd_profile)

    s = sub.add_parser("analyze", help="feature correlation and MoA classification")
    s.add_argument("--real", required=True)
    s.add_argument("--synth", required=True)
    s.add_argument("--model", default="model")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("report", help="render figures over run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("resources", help="compute-cost report for a run")
    s.add_argument("run")
    s.add_argument("--sites", type=int, default=10)
    s.set_defaults(fn=cmd_resources)
    return p


def main(argv=None) -> int:
    from .dataio import ManifestError
    from .harness.config import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ConfigError, UsageError, ManifestError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
