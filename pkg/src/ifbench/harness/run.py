"""End-to-end experiment runs: data, training, inference, scoring, profiling, analytics."""
from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import analysis
from ..dataio import (
    PreprocessParams,
    build_manifest,
    generate_toy_dataset,
    load_plate,
    load_split_config,
    read_manifest,
    write_manifest,
)
from ..metrics import QualityReport, evaluate_model, prediction_path, save_prediction
from ..models import fit, new_state, predict, site_seed
from ..profiling import FeatureTable, ProfilingConfig, profile_site
from ..training import MetricsLog, TrainState, load_state, save_state, save_weights
from .config import ExperimentConfig
from .resources import TIMINGS_FILE, record_resources

log = logging.getLogger(__name__)

STAGES = ("data", "train", "infer", "evaluate", "profile", "analyze", "resources")
SUMMARY_FILE = "metrics_summary.json"
FAILURE_FILE = "failure.json"


class RunFailed(RuntimeError):
    def __init__(self, run_dir: Path, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed in {run_dir}: {cause}")
        self.run_dir, self.stage, self.cause = run_dir, stage, cause


def new_run_dir(cfg: ExperimentConfig) -> Path:
    root = cfg.runs_root()
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{cfg.name}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def pool_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map over a bounded thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _params(cfg: ExperimentConfig) -> PreprocessParams:
    return PreprocessParams(target_size=cfg.target_size)


def prepare_data(cfg: ExperimentConfig, run_dir: Path):
    d = cfg.data
    if d.kind == "toy":
        root = Path(d.root) if d.root else run_dir / "data"
        manifests = generate_toy_dataset(
            root, seed=d.toy_seed, wells_per_group=d.wells_per_group, sites_per_well=d.sites_per_well,
            style=d.style, test_wells_per_group=d.test_wells_per_group, raw_size=d.raw_size,
        )
    else:
        manifests = build_manifest(d.root, load_split_config(d.split_config))
    write_manifest(manifests, run_dir / "manifest.csv")
    return manifests


def split(manifests, purpose: str):
    return [m for m in manifests if m.purpose == purpose]


def load_pairs(manifests, params: PreprocessParams) -> list:
    return [p for m in manifests for p in load_plate(m, params)]


def load_split(run_dir, purpose: str) -> list:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_json(run_dir / "config.json")
    return load_pairs(split(read_manifest(run_dir / "manifest.csv"), purpose), _params(cfg))


def train_model(cfg: ExperimentConfig, train, val, run_dir: Path) -> tuple[TrainState, dict]:
    state = new_state(cfg.family, cfg.model_spec)
    ck = run_dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    state.snapshot_dir = ck
    t0 = time.monotonic()
    series = fit(state, train, epochs=cfg.epochs, batch_size=cfg.batch_size,
                 steps_per_epoch=cfg.steps_per_epoch, val_pairs=val,
                 metrics_log=MetricsLog(run_dir / "metrics.csv"))
    train_s = time.monotonic() - t0
    save_state(state, ck / "state.ckpt")
    save_weights(state.sampler, ck / "generator.ckpt", {"family": cfg.family, "role": "generator"})
    if state.disc is not None:
        save_weights(state.disc, ck / "discriminator.ckpt", {"family": cfg.family, "role": "discriminator"})
    return state, {"train_seconds": train_s, "epochs": cfg.epochs, "steps": state.step, "series": series}


def infer_sites(state: TrainState, pairs, pred_dir: Path, seed: int, workers: int = 1) -> list[float]:
    """Predict and store every site as a unit-range stack; returns per-site seconds."""
    def one(item):
        i, p = item
        t0 = time.monotonic()
        out = predict(state, p.bf, seed=site_seed(seed, i))
        dt = time.monotonic() - t0
        save_prediction(pred_dir, p.plate, p.site_id, out)
        return dt

    return pool_map(one, list(enumerate(pairs)), workers)


def _meta(p, source: str) -> dict:
    return dict(Plate=p.plate, Well=p.well_id, Site=p.site, Compound=p.compound_label,
                MoA=p.moa_group, Source=source)


def profile_pairs(pairs, source: str, stacks: Iterable[np.ndarray] | None = None,
                  config: ProfilingConfig = ProfilingConfig(), workers: int = 1) -> FeatureTable:
    stacks = list(stacks) if stacks is not None else [p.if_gt for p in pairs]

    def one(item):
        p, s = item
        return profile_site(s, _meta(p, source), config)[1]

    return FeatureTable.concat(pool_map(one, list(zip(pairs, stacks)), workers))


def load_predictions(pred_dir: Path, pairs) -> list[np.ndarray]:
    return [np.load(prediction_path(pred_dir, p.plate, p.site_id)).astype(np.float64) for p in pairs]


def analyze_tables(real: FeatureTable, synth: FeatureTable, model: str, out_dir: Path, seed: int = 0) -> dict:
    """Correlation matrices and MoA classification; precondition failures become notices."""
    out_dir.mkdir(parents=True, exist_ok=True)
    result: dict = {"notices": []}
    for grouping in ("channelwise", "overall"):
        try:
            cm = analysis.feature_correlation(real, synth, grouping, method=model)
        except ValueError as e:
            result["notices"].append(f"correlation/{grouping}: {e}")
            continue
        (out_dir / f"correlation_{grouping}.json").write_text(cm.to_json())
        result[f"correlation_{grouping}"] = cm.to_dict()
    for source, table in (("real", real), (model, synth)):
        try:
            moa = analysis.moa_classify(table, seed=seed, source=source)
        except ValueError as e:
            result["notices"].append(f"moa/{source}: {e}")
            continue
        (out_dir / f"moa_{source}.json").write_text(moa.to_json())
        result[f"moa_{source}"] = dict(f1_six_class=moa.f1_six_class, f1_binary_dmso=moa.f1_binary_dmso,
                                       top5=moa.top5)
    (out_dir / "notices.txt").write_text("\n".join(result["notices"]) + ("\n" if result["notices"] else ""))
    return result


def _write_failure(run_dir: Path, stage: str, done: list[str], exc: BaseException) -> None:
    (run_dir / FAILURE_FILE).write_text(json.dumps(dict(
        stage=stage, completed=done, error=type(exc).__name__, message=str(exc),
        traceback=traceback.format_exc(),
    ), indent=2, sort_keys=True))


def run_experiment(cfg: ExperimentConfig, run_dir=None) -> Path:
    """Run every enabled stage and return the run directory.

    On a stage failure the outputs produced so far stay in place, a
    ``failure.json`` manifest is written and RunFailed is raised.
    """
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    params = _params(cfg)
    ctx: dict = {}
    summary: dict = {"name": cfg.name, "family": cfg.family, "seed": cfg.seed}
    done: list[str] = []

    def stage_data():
        ctx["manifests"] = prepare_data(cfg, run_dir)
        ctx["train"] = load_pairs(split(ctx["manifests"], "train"), params)
        ctx["val"] = load_pairs(split(ctx["manifests"], "validate"), params)
        ctx["test"] = load_pairs(split(ctx["manifests"], "test"), params)
        if not ctx["train"] or not ctx["test"]:
            raise ValueError("data needs at least one train and one test plate")
        summary["sites"] = {k: len(ctx[k]) for k in ("train", "val", "test")}

    def stage_train():
        ctx["state"], timings = train_model(cfg, ctx["train"], ctx["val"], run_dir)
        ctx["timings"] = timings
        summary["training"] = dict(steps=timings["steps"], epochs=cfg.epochs, **timings["series"])
        summary["events"] = list(ctx["state"].events)

    def stage_infer():
        secs = infer_sites(ctx["state"], ctx["test"], run_dir / "predictions", cfg.seed, cfg.workers)
        ctx["timings"]["infer_seconds"] = secs
        timings = {k: v for k, v in ctx["timings"].items() if k != "series"}
        (run_dir / TIMINGS_FILE).write_text(json.dumps(timings, indent=2, sort_keys=True))

    def stage_evaluate():
        report = evaluate_model(run_dir / "predictions", split(ctx["manifests"], "test"), params, cfg.family)
        report.save(run_dir / "quality")
        ctx["quality"] = report
        summary["quality"] = report.to_dict()

    def stage_profile():
        preds = load_predictions(run_dir / "predictions", ctx["test"])
        ctx["real_ft"] = profile_pairs(ctx["test"], "real", workers=cfg.workers)
        ctx["synth_ft"] = profile_pairs(ctx["test"], cfg.family, preds, workers=cfg.workers)
        ctx["real_ft"].to_csv(run_dir / "features" / "real.csv")
        ctx["synth_ft"].to_csv(run_dir / "features" / f"{cfg.family}.csv")
        summary["objects"] = {"real": len(ctx["real_ft"]), cfg.family: len(ctx["synth_ft"])}

    def stage_analyze():
        res = analyze_tables(ctx["real_ft"], ctx["synth_ft"], cfg.family, run_dir / "analysis", cfg.seed)
        summary["analysis"] = res

    def stage_resources():
        record_resources(run_dir, n_sites=cfg.resource_sites)

    plan = [("data", stage_data), ("train", stage_train), ("infer", stage_infer)]
    if cfg.evaluate:
        plan.append(("evaluate", stage_evaluate))
    if cfg.profile:
        plan.append(("profile", stage_profile))
        if cfg.analyze:
            plan.append(("analyze", stage_analyze))
    if cfg.resources:
        plan.append(("resources", stage_resources))
    for name, fn in plan:
        try:
            log.info("run %s: stage %s", run_dir.name, name)
            fn()
        except Exception as e:
            _write_failure(run_dir, name, done, e)
            raise RunFailed(run_dir, name, e) from e
        done.append(name)
    summary["stages"] = done
    # no wall-clock values here so reruns compare byte-for-byte
    (run_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable))
    return run_dir


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def reevaluate(run_dir) -> QualityReport:
    """Score a run's stored predictions again (the report bytes must match)."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_json(run_dir / "config.json")
    manifests = split(read_manifest(run_dir / "manifest.csv"), "test")
    return evaluate_model(run_dir / "predictions", manifests, _params(cfg), cfg.family)


# ---------------------------------------------------------------- cross-style protocol

def run_crosseval(cfg: ExperimentConfig, styles: Sequence[str] = ("A", "B"), run_dir=None) -> tuple[Path, analysis.CrossEvalMatrix]:
    """Train one model per rendering style and score it on every style's test plate."""
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(cfg.replace(name=f"{cfg.name}-crosseval"))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    params = _params(cfg)
    data, states = {}, {}
    for s in styles:
        sub = cfg.replace(name=f"{cfg.name}-{s}", data={**cfg.to_dict()["data"], "style": s, "root": None})
        sdir = run_dir / f"line_{s}"
        sdir.mkdir(exist_ok=True)
        manifests = prepare_data(sub, sdir)
        data[s] = {p: load_pairs(split(manifests, p), params) for p in ("train", "validate", "test")}
    for s in styles:
        states[s], timings = train_model(cfg, data[s]["train"], data[s]["validate"], run_dir / f"line_{s}")
        (run_dir / f"line_{s}" / TIMINGS_FILE).write_text(
            json.dumps({k: v for k, v in timings.items() if k != "series"}, indent=2, sort_keys=True))
    runs = {}
    for tr in styles:
        for te in styles:
            pairs = data[te]["test"]
            preds = [predict(states[tr], p.bf, seed=site_seed(cfg.seed, i)) for i, p in enumerate(pairs)]
            runs[(tr, te)] = [(p.key, pr, p.if_gt) for p, pr in zip(pairs, preds)]
    matrix = analysis.cross_cellline_eval(runs)
    (run_dir / "crosseval.json").write_text(json.dumps(matrix.to_dict(), indent=2, sort_keys=True))
    return run_dir, matrix


def resume_state(run_dir) -> TrainState:
    return load_state(Path(run_dir) / "checkpoints" / "state.ckpt")
