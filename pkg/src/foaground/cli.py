"""Batch command-line entry point.

Subcommands: gen-dataset, doa, train-niv, eval, cross-eval, simulate. Every
command is reproducible from (config file, seed); flags override config-file
values and the effective configuration is echoed into the written outputs.
FOAGROUND_THREADS sets the default worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset_gen, eval_harness
from .dataset_gen import (
    DatasetSpec,
    GenConfig,
    KIND_PHRASES,
    QaSample,
    default_counts,
    make_sample,
    parse_bbox_answer,
    parse_doa_answer,
    persist_sample,
    read_jsonl,
)
from .errors import EstimationError
from .foa_core import StftConfig, read_foa_wav
from .neural_iv import NivConfig, NivModel, TrainConfig, forward_doa, load_model, save_model, train
from .spatial_frame import DoA


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FOAGROUND_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items, threads: int):
    """Order-preserving map over a bounded worker pool."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_config_file(path) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _effective(args, names, file_cfg) -> dict:
    """Flag value if given, else config-file value, else parser default."""
    out = {}
    for name, default in names.items():
        flag = getattr(args, name, None)
        out[name] = flag if flag is not None else file_cfg.get(name, default)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foaground",
        description="Spatial audio-visual pipelines: dataset synthesis, "
        "DoA estimation, training, and evaluation.",
    )
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker pool size (default: FOAGROUND_THREADS or 1)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-dataset",
        help="generate train/val/test splits with media and a manifest",
        description="Writes <out>/<split>/{samples.jsonl, audio/, depth/, mask/} "
        "plus manifest.json. Counts default to the A:320 B:300 C:600 D:140 "
        "E:290 task mix, split 70/10/20.",
    )
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--counts", help="JSON {split: {task: count}} overriding defaults")
    p.add_argument("--totals", help="JSON {task: total} split 70/10/20")
    p.add_argument("--max-order", type=int, default=None, help="image-source order (default 0)")
    p.add_argument("--absorption", type=float, default=None, help="wall absorption (default 0.7)")
    p.add_argument("--duration", type=float, default=None, help="dry-signal seconds (default 1.0)")

    p = sub.add_parser(
        "doa",
        help="estimate directions of arrival for a wav file or a dataset split",
        description="Classical uses STFT intensity vectors; neural needs a "
        "checkpoint. Predictions are written as JSONL {sample_id, answer_text}; "
        "metrics are reported when ground truth is available.",
    )
    p.add_argument("--input", required=True, help="4-channel wav or dataset directory")
    p.add_argument("--split", default="test", help="dataset split (default test)")
    p.add_argument("--task", default="A", choices=["A", "B"], help="DoA task (default A)")
    p.add_argument("--method", default="classical", choices=["classical", "neural"])
    p.add_argument("--model", help="checkpoint path (required for --method neural)")
    p.add_argument("--band", help="LO:HI Hz band mask for the classical method")
    p.add_argument("--out", help="predictions JSONL path")
    p.add_argument("--report", help="metrics JSON path")

    p = sub.add_parser(
        "train-niv",
        help="train the learned spatial front-end on a dataset split",
        description="Trains on the split's single-source (task A) samples and "
        "writes a checkpoint plus a step,loss CSV curve.",
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--task", default="A", choices=["A", "B"])
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="loss-curve CSV path (default: <out>.curve.csv)")
    p.add_argument("--steps", type=int, default=None, help="Adam steps (default 1000)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 8)")
    p.add_argument("--crop", type=int, default=None, help="training window samples (default 2000)")
    p.add_argument("--width", type=int, default=None, help="CNN channel width (default 64)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser(
        "eval",
        help="score a predictions file against a dataset split",
        description="Metrics per task: A/B angular error (median and mean), "
        "C grounding IoU and center offset, D/E accuracy. --assert gates the "
        "exit code, e.g. --assert 'doa_median_deg<=10'.",
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--task", required=True, choices=list(dataset_gen.TASKS))
    p.add_argument("--predictions", required=True, help="JSONL {sample_id, answer_text}")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--assert", dest="assertions", action="append", default=[],
                   help="metric<=value or metric>=value; repeatable")

    p = sub.add_parser(
        "cross-eval",
        help="2x2 regime matrix for classical and neural estimators",
        description="Single regime = task A samples; overlap regime = task B "
        "samples whose target is the harmonic tone. Classical 'training' is "
        "its aggregation config (full band vs tone-band mask).",
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--single-model", required=True, help="checkpoint trained on single-source")
    p.add_argument("--overlap-model", required=True, help="checkpoint trained on overlap")
    p.add_argument("--out", help="matrix JSON path")

    p = sub.add_parser(
        "simulate",
        help="render one scene end to end for debugging",
        description="Generates a single sample of the chosen task and writes "
        "its media plus sample.json.",
    )
    p.add_argument("--task", default="A", choices=list(dataset_gen.TASKS))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-order", type=int, default=None)
    p.add_argument("--absorption", type=float, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        file_cfg = _load_config_file(args.config)
        seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
        threads = args.threads if args.threads is not None else int(
            file_cfg.get("threads", _default_threads())
        )
        handler = {
            "gen-dataset": _cmd_gen_dataset,
            "doa": _cmd_doa,
            "train-niv": _cmd_train_niv,
            "eval": _cmd_eval,
            "cross-eval": _cmd_cross_eval,
            "simulate": _cmd_simulate,
        }[args.command]
        return handler(args, file_cfg, seed, threads)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface toolkit errors with a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


class UsageError(Exception):
    pass


def entrypoint() -> None:
    sys.exit(main())


# ---------------------------------------------------------------------------


def _cmd_gen_dataset(args, file_cfg, seed, threads) -> int:
    opts = _effective(
        args,
        {"max_order": 0, "absorption": 0.7, "duration": 1.0},
        file_cfg,
    )
    if args.counts:
        counts = json.loads(args.counts)
    elif "counts" in file_cfg:
        counts = file_cfg["counts"]
    elif args.totals:
        counts = default_counts({k: int(v) for k, v in json.loads(args.totals).items()})
    else:
        counts = default_counts()
    spec = DatasetSpec(
        counts=counts,
        seed=seed,
        max_order=int(opts["max_order"]),
        absorption=float(opts["absorption"]),
        duration_s=float(opts["duration"]),
    )
    manifest = dataset_gen.gen_split(spec, args.out, threads=threads)
    print(f"dataset written to {args.out}")
    print(f"manifest sha256: {manifest['manifest_sha256']}")
    for split, info in sorted(manifest["splits"].items()):
        print(f"  {split}: {info['counts']}")
    return 0


def _target_band(sample: QaSample):
    """Band of the source kind named in the question (overlap tasks)."""
    question = sample.question.lower()
    for kind, phrase in KIND_PHRASES.items():
        if phrase in question:
            for src in sample.scene.get("sources", []):
                if src["kind"] == kind:
                    return tuple(src["band"])
    return None


def _predict_split(dataset, split, task, method, model_path, band, threads, seed):
    root = Path(dataset)
    samples = [s for s in read_jsonl(root / split / "samples.jsonl") if s.task == task]
    if not samples:
        raise UsageError(f"no task {task} samples in {root / split}")
    model = load_model(model_path) if method == "neural" else None
    cfg = StftConfig()

    def predict(sample: QaSample) -> dict:
        foa = read_foa_wav(root / split / sample.media["foa_wav"])
        if method == "neural":
            pred = forward_doa(model, foa)
        else:
            use_band = band if band is not None else (
                _target_band(sample) if task == "B" else None
            )
            try:
                pred = eval_harness.classical_predict(foa, cfg, use_band)
            except EstimationError:
                pred = DoA(0.0, 0.0)
        return {
            "sample_id": sample.sample_id,
            "answer_text": dataset_gen.format_doa_answer(pred),
            "_pred": pred,
        }
    return samples, _parallel_map(predict, samples, threads)


def _cmd_doa(args, file_cfg, seed, threads) -> int:
    if args.method == "neural" and not args.model:
        raise UsageError("--method neural requires --model")
    band = None
    if args.band:
        m = re.match(r"^(\d+(?:\.\d+)?):(\d+(?:\.\d+)?)$", args.band)
        if not m:
            raise UsageError(f"--band must be LO:HI, got {args.band!r}")
        band = (float(m.group(1)), float(m.group(2)))
    in_path = Path(args.input)
    if in_path.is_file():
        foa = read_foa_wav(in_path)
        if args.method == "neural":
            pred = forward_doa(load_model(args.model), foa)
        else:
            pred = eval_harness.classical_predict(foa, StftConfig(), band)
        print(dataset_gen.format_doa_answer(pred))
        return 0
    samples, rows = _predict_split(
        args.input, args.split, args.task, args.method, args.model, band, threads, seed
    )
    out_path = Path(args.out) if args.out else in_path / f"predictions_{args.task}.jsonl"
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({k: v for k, v in row.items() if not k.startswith("_")}))
            fh.write("\n")
    print(f"predictions written to {out_path}")
    gts = [DoA(s.ground_truth["doa"]["azimuth_deg"], s.ground_truth["doa"]["elevation_deg"])
           for s in samples]
    med, mean = eval_harness.eval_doa([r["_pred"] for r in rows], gts)
    report = {
        "task": args.task,
        "n_samples": len(samples),
        "metrics": {"doa_median_deg": med, "doa_mean_deg": mean},
        "config": {"method": args.method, "band": band, "seed": seed,
                   "model": args.model, "split": args.split},
    }
    print(json.dumps(report["metrics"], sort_keys=True))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _load_training_pairs(root: Path, split: str, task: str):
    samples = [s for s in read_jsonl(root / split / "samples.jsonl") if s.task == task]
    pairs = []
    for s in samples:
        foa = read_foa_wav(root / split / s.media["foa_wav"])
        doa = DoA(s.ground_truth["doa"]["azimuth_deg"], s.ground_truth["doa"]["elevation_deg"])
        pairs.append((foa, doa))
    return pairs


def _cmd_train_niv(args, file_cfg, seed, threads) -> int:
    opts = _effective(
        args,
        {"steps": 1000, "lr": 1e-3, "batch_size": 8, "crop": 2000, "width": 64},
        file_cfg,
    )
    root = Path(args.dataset)
    pairs = _load_training_pairs(root, args.split, args.task)
    if not pairs:
        raise UsageError(f"no task {args.task} samples in {root / args.split}")
    if args.resume:
        model = load_model(args.resume)
        start_step = model.steps_trained
    else:
        model = NivModel.initialize(NivConfig(channel_width=int(opts["width"]), seed=seed))
        start_step = 0
    cfg = TrainConfig(
        learning_rate=float(opts["lr"]),
        batch_size=int(opts["batch_size"]),
        steps=int(opts["steps"]),
        seed=seed,
        crop_samples=int(opts["crop"]),
    )
    if cfg.learning_rate == 0.0:
        print("warning: learning rate 0; weights will not change", file=sys.stderr)
    model, curve = train(model, pairs, cfg)
    save_model(model, args.out)
    curve_path = Path(args.curve) if args.curve else Path(str(args.out) + ".curve.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(curve, start=start_step + 1):
            writer.writerow([i, f"{loss:.6f}"])
    print(f"checkpoint written to {args.out} ({model.steps_trained} total steps)")
    print(f"loss: initial {curve[0]:.4f} final {curve[-1]:.4f}")
    return 0


_ASSERT_RE = re.compile(r"^\s*([a-z_]+)\s*(<=|>=)\s*(-?\d+(?:\.\d+)?)\s*$")


def _check_assertions(assertions, metrics) -> list[str]:
    failures = []
    for expr in assertions:
        m = _ASSERT_RE.match(expr)
        if not m:
            raise UsageError(f"bad --assert expression {expr!r}")
        name, op, value = m.group(1), m.group(2), float(m.group(3))
        if name not in metrics:
            raise UsageError(f"--assert names unknown metric {name!r}")
        actual = metrics[name]
        ok = actual <= value if op == "<=" else actual >= value
        if not ok:
            failures.append(f"{name}={actual} violates {expr}")
    return failures


def _cmd_eval(args, file_cfg, seed, threads) -> int:
    root = Path(args.dataset)
    samples = {
        s.sample_id: s
        for s in read_jsonl(root / args.split / "samples.jsonl")
        if s.task == args.task
    }
    preds = {}
    with open(args.predictions, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "sample_id" not in row or "answer_text" not in row:
                raise UsageError(f"{args.predictions}:{lineno}: need sample_id and answer_text")
            preds[row["sample_id"]] = row["answer_text"]
    missing = sorted(set(samples) - set(preds))
    if missing:
        print(f"error: missing prediction for sample_id {missing[0]}", file=sys.stderr)
        return 1
    task = args.task
    metrics: dict[str, float] = {}
    if task in ("A", "B"):
        pred_doas, gt_doas = [], []
        for sid, sample in samples.items():
            pred_doas.append(parse_doa_answer(preds[sid]))
            gt_doas.append(parse_doa_answer(sample.answer))
        med, mean = eval_harness.eval_doa(pred_doas, gt_doas)
        metrics = {"doa_median_deg": med, "doa_mean_deg": mean}
    elif task == "C":
        pred_boxes, gt_boxes = [], []
        for sid, sample in samples.items():
            pred_boxes.append([b for _, b in parse_bbox_answer(preds[sid])])
            gt_boxes.append([b for _, b in parse_bbox_answer(sample.answer)])
        metrics = eval_harness.eval_grounding(pred_boxes, gt_boxes)
    else:
        correct = sum(preds[sid].strip() == s.answer for sid, s in samples.items())
        metrics = {"accuracy": correct / len(samples)}
    report = {
        "task": task,
        "split": args.split,
        "n_samples": len(samples),
        "metrics": {k: (v if not (isinstance(v, float) and np.isinf(v)) else "inf")
                    for k, v in metrics.items()},
        "config": {"seed": seed, "predictions": str(args.predictions)},
    }
    print(json.dumps(report["metrics"], sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    failures = _check_assertions(args.assertions, metrics)
    for failure in failures:
        print(f"assertion failed: {failure}", file=sys.stderr)
    return 1 if failures else 0


def _tone_source_doa(sample: QaSample) -> DoA:
    """Receiver-frame DoA of a task B sample's harmonic-tone source."""
    from .spatial_frame import angles_from_dir, world_to_camera

    recv = sample.scene["receiver"]
    for src in sample.scene["sources"]:
        if src["kind"] == "harmonic_tone":
            rel = np.asarray(src["position"]) - np.asarray(recv["position"])
            return angles_from_dir(world_to_camera(rel, recv["yaw_deg"]))
    raise UsageError(f"sample {sample.sample_id} has no harmonic tone source")


def _cmd_cross_eval(args, file_cfg, seed, threads) -> int:
    root = Path(args.dataset)
    all_samples = read_jsonl(root / args.split / "samples.jsonl")
    single, overlap = [], []
    tone_band = None
    for s in all_samples:
        if s.task not in ("A", "B"):
            continue
        foa = read_foa_wav(root / args.split / s.media["foa_wav"])
        if s.task == "A":
            gt = DoA(s.ground_truth["doa"]["azimuth_deg"],
                     s.ground_truth["doa"]["elevation_deg"])
            single.append((foa, gt))
        else:
            # the overlap regime always targets the harmonic tone
            overlap.append((foa, _tone_source_doa(s)))
            for src in s.scene["sources"]:
                if src["kind"] == "harmonic_tone":
                    tone_band = tuple(src["band"])
    if not single or not overlap:
        raise UsageError("cross-eval needs task A and task B samples")
    matrix = eval_harness.cross_eval(
        train_cfgs={
            "classical": {"single": {"band": None}, "overlap": {"band": tone_band}},
            "neural": {
                "single": load_model(args.single_model),
                "overlap": load_model(args.overlap_model),
            },
        },
        test_sets={"single": single, "overlap": overlap},
    )
    print(matrix.to_text())
    if args.out:
        Path(args.out).write_text(matrix.to_json())
    return 0


def _cmd_simulate(args, file_cfg, seed, threads) -> int:
    opts = _effective(args, {"max_order": 0, "absorption": 0.7}, file_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = GenConfig(
        max_order=int(opts["max_order"]),
        absorption=float(opts["absorption"]),
        room_pool=dataset_gen.default_room_pool(0, base_seed=seed),
    )
    rng = np.random.default_rng((seed, 0))
    sample, bundle = make_sample(args.task, rng, cfg, sample_id=f"sim-{args.task}0",
                                 split="sim", sample_seed=0)
    persist_sample(sample, bundle, out)
    (out / "sample.json").write_text(json.dumps(sample.to_dict(), indent=2, sort_keys=True))
    print(f"task {args.task} sample written to {out}")
    print(f"question: {sample.question}")
    print(f"answer:   {sample.answer}")
    return 0
