"""Metrics, baseline predictors, cross-evaluation, and ablation reports.

Medians use lower interpolation on even counts so reported values always
belong to the observed sample. The source-matching baseline compares
directions only: ambisonic intensity carries no range, so a candidate's 3D
box is reduced to the bearing of its center.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    ConfigurationError,
    EstimationError,
    GroundingError,
)
from .foa_core import FoaSignal, StftConfig, band_mask, classical_iv, doa_from_iv
from .scene_render import InstanceMask, visibility_threshold
from .spatial_frame import (
    Box3D,
    DepthFrame,
    DoA,
    angles_from_dir,
    angular_error,
    backproject,
    center_offset,
    iou3d,
)

LABEL_ORDER = ("Left", "Center", "Right")


def median_lower(values) -> float:
    """Median with lower interpolation: element (n-1)//2 of the sorted values."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise AlignmentError("median of an empty collection")
    return float(arr[(arr.size - 1) // 2])


@dataclass
class EvalReport:
    """Per-task metric bundle; only the metrics that apply are present."""

    task: str
    n_samples: int
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_samples": self.n_samples,
            "metrics": {k: _scrub(v) for k, v in self.metrics.items()},
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _scrub(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def eval_doa(predictions, ground_truths) -> tuple[float, float]:
    """(median, mean) angular error in degrees over aligned DoA lists."""
    if len(predictions) != len(ground_truths):
        raise AlignmentError(
            f"{len(predictions)} predictions vs {len(ground_truths)} ground truths"
        )
    if not predictions:
        raise AlignmentError("empty prediction list")
    errors = [angular_error(p, g) for p, g in zip(predictions, ground_truths)]
    return median_lower(errors), float(np.mean(errors))


def greedy_match(pred_boxes, gt_boxes):
    """Greedy highest-IoU assignment; returns (pred_idx, gt_idx, iou) triples."""
    pairs = []
    for i, p in enumerate(pred_boxes):
        for j, g in enumerate(gt_boxes):
            pairs.append((iou3d(p, g), i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, out = set(), set(), []
    for score, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, score))
    return out


def eval_grounding(pred_boxes, gt_boxes) -> dict:
    """Grounding statistics over per-sample box lists.

    Boxes are matched greedily by IoU within each sample. Matched pairs
    contribute IoU and center offset; unmatched ground truths count as IoU 0
    with infinite offset and are tallied separately.
    """
    if len(pred_boxes) != len(gt_boxes):
        raise AlignmentError(
            f"{len(pred_boxes)} prediction lists vs {len(gt_boxes)} ground-truth lists"
        )
    if not any(len(g) for g in gt_boxes):
        raise AlignmentError("no ground-truth boxes to evaluate")
    ious, offsets = [], []
    n_unmatched_gt = 0
    n_unmatched_pred = 0
    for preds, gts in zip(pred_boxes, gt_boxes):
        matches = greedy_match(preds, gts)
        matched_g = {j for _, j, _ in matches}
        n_unmatched_gt += len(gts) - len(matched_g)
        n_unmatched_pred += len(preds) - len(matches)
        for i, j, score in matches:
            ious.append(score)
            offsets.append(center_offset(preds[i], gts[j]))
    ious_all = ious + [0.0] * n_unmatched_gt
    offsets_all = offsets + [float("inf")] * n_unmatched_gt
    return {
        "iou_mean": float(np.mean(ious_all)),
        "iou_median": median_lower(ious_all),
        "offset_mean_m": float(np.mean(offsets_all)),
        "offset_median_m": median_lower(offsets_all),
        "n_matched": len(ious),
        "n_unmatched_gt": n_unmatched_gt,
        "n_unmatched_pred": n_unmatched_pred,
    }


def baseline_grounder(
    depth: DepthFrame,
    mask: InstanceMask,
    instance_id: int,
    size_prior,
) -> Box3D:
    """Ground an instance from its visible surface plus a depth-extent prior.

    Back-projects the masked pixels, takes the axis-aligned bounds of the
    visible surface, then extends the viewing axis to at least the prior's
    depth extent, re-centered so the observed front face stays in place.
    Raises ``GroundingError`` below the scaled visibility threshold.
    """
    selected = mask.ids == instance_id
    threshold = visibility_threshold(depth.intrinsics.width, depth.intrinsics.height)
    n = int(np.count_nonzero(selected))
    if n < threshold:
        raise GroundingError(
            f"instance {instance_id} shows {n} px, below the threshold {threshold}"
        )
    cloud = backproject(depth)
    pts = cloud.points[selected & cloud.valid]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    extents = np.maximum(hi - lo, 1e-3)
    prior_depth = float(np.asarray(size_prior, dtype=np.float64)[2])
    depth_extent = max(float(extents[2]), prior_depth)
    front_z = float(hi[2])  # least-negative z: the surface nearest the camera
    center[2] = front_z - depth_extent / 2.0
    extents[2] = depth_extent
    return Box3D(category="speaker", center=center, extents=extents)


def match_speaker(doa: DoA, candidates) -> str:
    """Label of the candidate whose center bearing is closest to the DoA.

    Ties resolve by the fixed label order Left < Center < Right.
    """
    if not candidates:
        raise AlignmentError("no candidates to match against")
    scored = []
    for label, box in candidates:
        bearing = angles_from_dir(box.center)
        scored.append((angular_error(doa, bearing), LABEL_ORDER.index(label), label))
    scored.sort(key=lambda t: (t[0], t[1]))
    best_err = scored[0][0]
    tied = [s for s in scored if abs(s[0] - best_err) < 1e-12]
    tied.sort(key=lambda t: t[1])
    return tied[0][2]


@dataclass
class CrossEvalMatrix:
    """Median angular error per (method, train regime, test regime)."""

    entries: dict  # (method, train, test) -> degrees

    REGIMES = ("single", "overlap")
    METHODS = ("classical", "neural")

    def cell(self, method: str, train: str, test: str) -> float:
        return self.entries[(method, train, test)]

    def to_dict(self) -> dict:
        return {
            method: {
                f"train_{tr}": {f"test_{te}": self.entries[(method, tr, te)]
                                for te in self.REGIMES}
                for tr in self.REGIMES
            }
            for method in self.METHODS
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        corner = "Test \\ Train"
        lines = [
            "Cross-evaluation matrix (median angular error, degrees)",
            f"{corner:<24}{'Single Src.':>14}{'Overlap Src.':>14}",
        ]
        names = {"classical": "Classical IV", "neural": "Neural IV"}
        for method in self.METHODS:
            lines.append(names[method])
            for te in self.REGIMES:
                row = f"  {'Single Source' if te == 'single' else 'Overlap Source':<22}"
                for tr in self.REGIMES:
                    row += f"{self.entries[(method, tr, te)]:>14.2f}"
                lines.append(row)
        return "\n".join(lines)


def classical_predict(
    foa: FoaSignal, cfg: StftConfig, band: tuple[float, float] | None = None
) -> DoA:
    """Classical intensity-vector DoA, optionally band-masked."""
    iv = classical_iv(foa, cfg)
    mask = band_mask(cfg, *band) if band is not None else None
    return doa_from_iv(iv, mask)


def cross_eval(train_cfgs: dict, test_sets: dict, stft_cfg: StftConfig | None = None) -> CrossEvalMatrix:
    """Fill the 2x2 regime matrix for the classical and neural methods.

    ``train_cfgs`` carries the per-regime predictors:
        {"classical": {"single": {"band": None}, "overlap": {"band": (lo, hi)}},
         "neural": {"single": NivModel, "overlap": NivModel}}
    ``test_sets`` maps each regime to a list of (FoaSignal, DoA) pairs where
    the DoA is the target source's ground truth.
    """
    from .neural_iv import forward_doa

    stft_cfg = stft_cfg or StftConfig()
    for method in CrossEvalMatrix.METHODS:
        if method not in train_cfgs:
            raise ConfigurationError(f"missing train configs for {method!r}")
        for regime in CrossEvalMatrix.REGIMES:
            if regime not in train_cfgs[method]:
                raise ConfigurationError(f"missing {method!r} config for {regime!r}")
    for regime in CrossEvalMatrix.REGIMES:
        if regime not in test_sets or not test_sets[regime]:
            raise ConfigurationError(f"missing test set for {regime!r}")
    entries = {}
    for tr in CrossEvalMatrix.REGIMES:
        for te in CrossEvalMatrix.REGIMES:
            clips = test_sets[te]
            band = train_cfgs["classical"][tr].get("band")
            errors = []
            for foa, gt in clips:
                try:
                    pred = classical_predict(foa, stft_cfg, band)
                    errors.append(angular_error(pred, gt))
                except EstimationError:
                    errors.append(180.0)
            entries[("classical", tr, te)] = median_lower(errors)
            model = train_cfgs["neural"][tr]
            errors = [
                angular_error(forward_doa(model, foa), gt) for foa, gt in clips
            ]
            entries[("neural", tr, te)] = median_lower(errors)
    return CrossEvalMatrix(entries)


@dataclass
class AblationReport:
    """Side-by-side metric rows for named variants on one split."""

    rows: list  # (name, EvalReport)

    def to_dict(self) -> dict:
        return {name: report.to_dict() for name, report in self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        keys = sorted({k for _, r in self.rows for k in r.metrics})
        header = f"{'variant':<24}" + "".join(f"{k:>18}" for k in keys)
        lines = [header]
        for name, report in self.rows:
            row = f"{name:<24}"
            for k in keys:
                v = report.metrics.get(k)
                row += f"{v:>18.4f}" if isinstance(v, (int, float)) and not (
                    isinstance(v, float) and math.isinf(v)
                ) else f"{str(v):>18}"
            lines.append(row)
        return "\n".join(lines)


def ablation_report(variants) -> AblationReport:
    """Assemble variant reports; all rows must describe the same split/config."""
    if len(variants) < 2:
        raise ConfigurationError("an ablation needs at least two variants")
    tasks = {r.task for _, r in variants}
    hashes = {r.config_hash for _, r in variants}
    if len(tasks) > 1 or len(hashes) > 1:
        raise ConfigurationError(
            f"variants evaluated on different splits: tasks={tasks}, hashes={hashes}"
        )
    return AblationReport(rows=list(variants))


def random_doa_median(n: int, rng: np.random.Generator) -> float:
    """Monte-Carlo median angular error of uniformly random direction guesses."""
    def uniform_dirs(k):
        v = rng.normal(size=(k, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    a, b = uniform_dirs(n), uniform_dirs(n)
    dots = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    return median_lower(np.degrees(np.arccos(dots)))


def dataset_config_hash(samples) -> str:
    """Stable hash of the sample ids in an evaluation split."""
    blob = json.dumps(sorted(s.sample_id for s in samples)).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Matcher pipeline over generated Task D/E samples


def _candidates_from_scene(sample) -> list:
    """(label, camera-frame Box3D) candidates rebuilt from a sample's scene."""
    from .scene_render import CameraPose, Loudspeaker, VisualScene, gt_box_camera
    from .spatial_frame import CameraIntrinsics

    scene = sample.scene
    cam = scene["camera"]
    vs = VisualScene(
        room_dims=tuple(scene["room"]["dims"]),
        loudspeakers=[
            Loudspeaker(s["id"], tuple(s["center"]), tuple(s["extents"]))
            for s in scene["loudspeakers"]
        ],
        camera=CameraPose(tuple(cam["position"]), cam["yaw_deg"]),
        intrinsics=CameraIntrinsics(**cam["intrinsics"]),
    )
    labels = sample.ground_truth["labels_by_id"]
    return [
        (labels[str(s.instance_id)], gt_box_camera(vs, s.instance_id))
        for s in vs.loudspeakers
    ]


def evaluate_matcher(
    samples_with_audio,
    variant: str,
    stft_cfg: StftConfig | None = None,
    model=None,
    bands: dict | None = None,
) -> EvalReport:
    """Accuracy of a matcher variant over Task D/E samples.

    ``samples_with_audio`` pairs each QaSample with its rendered FoaSignal.
    Variants: ``classical`` (band-masked on overlap tasks), ``neural``
    (requires ``model``), and ``classical_nomask`` (full-band aggregation,
    the spatial-cue-free reference for overlap tasks).
    """
    from .neural_iv import forward_doa

    stft_cfg = stft_cfg or StftConfig()
    bands = bands or {}
    if variant == "neural" and model is None:
        raise ConfigurationError("the neural variant needs a model")
    correct = 0
    task = None
    for sample, foa in samples_with_audio:
        task = sample.task
        candidates = _candidates_from_scene(sample)
        if variant == "neural":
            pred = forward_doa(model, foa)
        else:
            band = None
            if variant == "classical" and sample.task == "E":
                kind = sample.ground_truth["target_kind"]
                band = tuple(sample.ground_truth["bands"][kind]) if "bands" in sample.ground_truth else bands.get(kind)
            try:
                pred = classical_predict(foa, stft_cfg, band)
            except EstimationError:
                pred = DoA(0.0, 0.0)
        if match_speaker(pred, candidates) == sample.answer:
            correct += 1
    n = len(samples_with_audio)
    if n == 0:
        raise AlignmentError("no samples to evaluate")
    return EvalReport(
        task=task or "D",
        n_samples=n,
        metrics={"accuracy": correct / n},
        config_hash="",
    )


def chance_rate(samples) -> float:
    """Expected accuracy of uniform guessing given each sample's candidate count."""
    inv = [1.0 / len(s.ground_truth["labels_by_id"]) for s in samples]
    return float(np.mean(inv))
