"""Instruction/answer sample synthesis for the five spatial tasks.

Task structure (counts in the default spec mirror the 32/30/60/14/29 ratio,
scaled 1:100):

* A: single-source DoA from 4-channel audio
* B: two overlapping sources with disjoint bands (harmonic tone 200-800 Hz
  vs band noise 2000-6000 Hz); the question names the target by kind
* C: metric 3D boxes of all visible loudspeakers, from depth + mask
* D: match a single active source to one of >= 2 visible loudspeakers,
  answered as Left/Center/Right by image-plane ordering
* E: like D with two overlapping sources, target named by kind

Every sample's answer string is regenerable byte-for-byte from its
ground_truth record, and all randomness flows from per-sample seeds recorded
in the scene record and the manifest.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    GenerationError,
    ParseError,
    RangeError,
    ValidationError,
)
from .foa_core import FoaSignal, write_foa_wav
from .room_sim import (
    RoomSpec,
    ScenePose,
    SourceSignal,
    render_scene,
    sample_scene,
    source_doa,
    synth_source,
)
from .scene_render import (
    CameraPose,
    InstanceMask,
    Loudspeaker,
    VisualScene,
    default_speaker_extents,
    render_depth,
    visibility_threshold,
    visible_pixels,
    write_mask,
)
from .spatial_frame import (
    Box3D,
    CameraIntrinsics,
    DepthFrame,
    DoA,
    angles_from_dir,
    angular_error,
    project,
    world_to_camera,
    write_depth,
    yaw_matrix,
)

TASKS = ("A", "B", "C", "D", "E")

#: Spectral stand-ins for the two target-identifying source kinds.
KIND_PHRASES = {"harmonic_tone": "harmonic tone", "band_noise": "band-limited noise"}

_LABELS = {2: ("Left", "Right"), 3: ("Left", "Center", "Right")}

QUESTION_TEMPLATES = {
    "A": (
        "Based on the audio cues, please output the precise azimuth and elevation.",
        "Where is the sound coming from? Answer with azimuth and elevation.",
        "Estimate the direction of arrival of the active source; output azimuth and elevation.",
        "Using the spatial audio, report the source azimuth and elevation in degrees.",
        "Listen to the recording and state the azimuth and elevation of the source.",
    ),
    "B": (
        "Where is the {kind} coming from? Output azimuth and elevation.",
        "Two sounds overlap. Report the azimuth and elevation of the {kind}.",
        "Focus on the {kind} and estimate its direction as azimuth and elevation.",
        "Give the direction of arrival of the {kind} in azimuth and elevation.",
        "Among the overlapping sources, where is the {kind}? Answer with azimuth and elevation.",
    ),
    "C": (
        "Identify the 3D box for each speaker in this scene.",
        "Output the 3D bounding boxes of all visible loudspeakers.",
        "Locate every loudspeaker and report its 3D bounding box.",
        "Give the metric 3D box for each visible speaker.",
        "List the 3D bounding boxes of the loudspeakers you can see.",
    ),
    "D": (
        "Determine which speaker corresponds to the audio source.",
        "Which visible loudspeaker is playing the sound?",
        "Match the active audio source to one of the loudspeakers.",
        "Identify the loudspeaker that the sound originates from.",
        "Based on the spatial audio, which speaker is the source?",
    ),
    "E": (
        "Can you tell which speaker the {kind} originates from?",
        "Two sounds overlap. Which loudspeaker is playing the {kind}?",
        "Match the {kind} to the correct loudspeaker.",
        "Which visible speaker does the {kind} come from?",
        "Identify the loudspeaker emitting the {kind}.",
    ),
}

_SPLIT_POOL_ID = {"train": 0, "val": 1, "test": 2}
_SPLIT_SEED_BASE = {"train": 0, "val": 10_000_000, "test": 20_000_000}

#: Task totals scaled 1:100 from the reference corpus proportions.
DEFAULT_TASK_TOTALS = {"A": 320, "B": 300, "C": 600, "D": 140, "E": 290}
_SPLIT_FRACTIONS = {"train": 0.7, "val": 0.1, "test": 0.2}

_SOURCE_COUNT_CHOICES = {
    "C": ((1, 2, 3), (17 / 60, 34 / 60, 9 / 60)),
    "D": ((2, 3), (10 / 14, 4 / 14)),
    "E": ((2, 3), (24 / 29, 5 / 29)),
}


# ---------------------------------------------------------------------------
# Answer grammars


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def format_doa_answer(doa: DoA) -> str:
    return (
        f"azimuth: {round_half_away(doa.azimuth_deg)}; "
        f"elevation: {round_half_away(doa.elevation_deg)}"
    )


_DOA_RE = re.compile(
    r"^\s*azimuth\s*:\s*(-?\d+)\s*;\s*elevation\s*:\s*(-?\d+)\s*$", re.IGNORECASE
)


def parse_doa_answer(text: str) -> DoA:
    """Parse 'azimuth: <int>; elevation: <int>' (case-insensitive, loose spaces)."""
    m = _DOA_RE.match(text)
    if not m:
        raise ParseError(f"not a DoA answer: {text!r}", span=text)
    az, el = int(m.group(1)), int(m.group(2))
    try:
        return DoA(float(az), float(el))
    except RangeError as exc:
        raise ParseError(f"DoA out of range in {text!r}: {exc}", span=text) from exc


def format_bbox(k: int, box: Box3D) -> str:
    """Render `bbox_<k> = Bbox(<category>, x, y, z, sx, sy, sz)` with 2 decimals."""
    nums = ", ".join(f"{v:.2f}" for v in (*box.center, *box.extents))
    return f"bbox_{k} = Bbox({box.category}, {nums})"


_BBOX_RE = re.compile(
    r"^\s*bbox_(\d+)\s*=\s*Bbox\(\s*([A-Za-z_][\w-]*)\s*"
    r"((?:,\s*-?\d+(?:\.\d+)?\s*)*)\)\s*$"
)


def parse_bbox(text: str) -> tuple[int, Box3D]:
    """Parse one bbox line; strict on arity (category plus 6 numbers)."""
    m = _BBOX_RE.match(text)
    if not m:
        raise ParseError(f"not a bbox line: {text!r}", span=text)
    k = int(m.group(1))
    numbers = [float(v) for v in m.group(3).replace(",", " ").split()]
    if len(numbers) != 6:
        raise ParseError(
            f"bbox needs 6 numeric fields, got {len(numbers)}: {text!r}", span=text
        )
    center, extents = numbers[:3], numbers[3:]
    if any(e <= 0 for e in extents):
        raise ParseError(f"non-positive extent in {text!r}", span=text)
    return k, Box3D(category=m.group(2), center=center, extents=extents)


def format_bbox_answer(boxes: list[tuple[int, Box3D]]) -> str:
    return "\n".join(format_bbox(k, box) for k, box in boxes)


def parse_bbox_answer(text: str) -> list[tuple[int, Box3D]]:
    """Parse one bbox per line; indices must be strictly increasing."""
    out = []
    last = -1
    for line in text.splitlines():
        if not line.strip():
            continue
        k, box = parse_bbox(line)
        if k <= last:
            raise ParseError(f"bbox indices must increase, got {k} after {last}", span=line)
        last = k
        out.append((k, box))
    if not out:
        raise ParseError("no bbox lines found", span=text)
    return out


# ---------------------------------------------------------------------------
# Generation configuration


def _default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=554.26, fy=554.26, cx=319.5, cy=239.5, width=640, height=480)


def default_room_pool(pool_id: int, n_rooms: int = 24, base_seed: int = 0):
    """Disjoint per-split room pools; ids encode the pool."""
    rng = np.random.default_rng((base_seed, 9001, pool_id))
    rooms = []
    for i in range(n_rooms):
        dims = (
            float(rng.uniform(4.0, 9.0)),
            float(rng.uniform(2.6, 3.5)),
            float(rng.uniform(4.0, 9.0)),
        )
        rooms.append((pool_id * 1000 + i, dims))
    return tuple(rooms)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for sample synthesis; defaults give anechoic desk-scale scenes."""

    sample_rate: int = 16000
    duration_s: float = 1.0
    absorption: float = 0.7
    max_order: int = 0
    room_pool: tuple = field(default_factory=lambda: default_room_pool(0))
    intrinsics: CameraIntrinsics = field(default_factory=_default_intrinsics)
    camera_height: tuple[float, float] = (0.8, 1.6)
    speaker_distance: tuple[float, float] = (1.2, 4.0)
    speaker_height: tuple[float, float] = (0.55, 1.4)
    min_separation_deg: float = 25.0
    min_separation_px: float = 20.0
    tone_band: tuple[float, float] = (200.0, 800.0)
    noise_band: tuple[float, float] = (2000.0, 6000.0)
    tone_harmonics: int = 3
    max_retries: int = 200

    def band_for(self, kind: str) -> tuple[float, float]:
        return self.tone_band if kind == "harmonic_tone" else self.noise_band

    def config_hash(self) -> str:
        blob = json.dumps(_jsonable(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _jsonable(obj):
    if isinstance(obj, (str, int, bool)) or obj is None:
        return obj
    if isinstance(obj, float):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(getattr(obj, k)) for k in obj.__dataclass_fields__}
    raise TypeError(f"cannot serialize {type(obj)}")


# ---------------------------------------------------------------------------
# Samples


@dataclass
class QaSample:
    sample_id: str
    task: str
    question: str
    answer: str
    media: dict
    ground_truth: dict
    scene: dict
    split: str

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "task": self.task,
            "question": self.question,
            "answer": self.answer,
            "media": self.media,
            "ground_truth": self.ground_truth,
            "scene": self.scene,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QaSample":
        return cls(**{k: d[k] for k in (
            "sample_id", "task", "question", "answer", "media",
            "ground_truth", "scene", "split",
        )})


@dataclass
class MediaBundle:
    """In-memory media produced alongside a sample."""

    foa: FoaSignal | None = None
    depth: DepthFrame | None = None
    mask: InstanceMask | None = None


def regenerate_answer(task: str, ground_truth: dict) -> str:
    """Rebuild the canonical answer string from a ground-truth record."""
    if task in ("A", "B"):
        d = ground_truth["doa"]
        return format_doa_answer(DoA(d["azimuth_deg"], d["elevation_deg"]))
    if task == "C":
        boxes = [
            (b["k"], Box3D(category=b["category"], center=b["center"], extents=b["extents"]))
            for b in ground_truth["boxes"]
        ]
        return format_bbox_answer(boxes)
    if task in ("D", "E"):
        return ground_truth["label"]
    raise ConfigurationError(f"unknown task {task!r}")


def _doa_dict(doa: DoA) -> dict:
    return {"azimuth_deg": float(doa.azimuth_deg), "elevation_deg": float(doa.elevation_deg)}


def _pick_room(rng, cfg: GenConfig):
    room_id, dims = cfg.room_pool[int(rng.integers(len(cfg.room_pool)))]
    room = RoomSpec(dims, absorption=cfg.absorption, max_order=cfg.max_order)
    return room_id, room

def _question(task: str, rng, kind: str | None = None) -> str:
    template = QUESTION_TEMPLATES[task][int(rng.integers(5))]
    return template.format(kind=KIND_PHRASES[kind]) if kind else template


def _synth(cfg: GenConfig, kind: str, rng) -> SourceSignal:
    seed = int(rng.integers(2**31))
    return synth_source(
        kind,
        cfg.band_for(kind),
        cfg.duration_s,
        np.random.default_rng(seed),
        sample_rate=cfg.sample_rate,
        n_harmonics=cfg.tone_harmonics if kind == "harmonic_tone" else 8,
        seed=seed,
    )


def _audio_scene_dict(room_id, room, pose, sources) -> dict:
    return {
        "room_id": int(room_id),
        "room": {
            "dims": _jsonable(room.dims),
            "absorption": _jsonable(room.absorption),
            "speed_of_sound": float(room.speed_of_sound),
            "max_order": int(room.max_order),
        },
        "receiver": {
            "position": _jsonable(pose.receiver_position),
            "yaw_deg": float(pose.receiver_yaw_deg),
        },
        "sources": [
            {
                "kind": sig.kind,
                "band": list(sig.band),
                "seed": sig.seed,
                "position": _jsonable(pos),
            }
            for pos, sig in zip(pose.source_positions, sources)
        ],
    }


def _make_audio_task(task: str, rng, cfg: GenConfig):
    room_id, room = _pick_room(rng, cfg)
    n_sources = 1 if task == "A" else 2
    pose = sample_scene(room, n_sources, rng)
    if task == "A":
        kinds = ["harmonic_tone" if rng.uniform() < 0.5 else "band_noise"]
        target = 0
    else:
        kinds = ["harmonic_tone", "band_noise"]
        target = int(rng.integers(2))
    sources = [_synth(cfg, kind, rng) for kind in kinds]
    foa = render_scene(room, pose, sources, cfg.sample_rate)
    doa = source_doa(pose, target)
    scene = _audio_scene_dict(room_id, room, pose, sources)
    scene["sample_rate"] = cfg.sample_rate
    scene["duration_s"] = float(cfg.duration_s)
    scene["geodesic_within_2x_euclidean"] = True  # convex shoebox
    gt = {"doa": _doa_dict(doa)}
    if task == "B":
        gt["target_kind"] = kinds[target]
        gt["source_doas"] = [
            {"kind": kinds[i], **_doa_dict(source_doa(pose, i))} for i in range(2)
        ]
    question = _question(task, rng, kinds[target] if task == "B" else None)
    return question, regenerate_answer(task, gt), gt, scene, MediaBundle(foa=foa)


def _speaker_camera_dir(az_off_deg: float) -> np.ndarray:
    t = math.radians(az_off_deg)
    return np.array([-math.sin(t), 0.0, -math.cos(t)])


def _place_visual_scene(rng, cfg: GenConfig, n_speakers: int):
    """Sample a camera and n separated, visible loudspeakers; returns scene data."""
    room_id, room = _pick_room(rng, cfg)
    dims = np.asarray(room.dims)
    intr = cfg.intrinsics
    az_max = math.degrees(math.atan((intr.width / 2.0) / intr.fx)) - 6.0
    for _ in range(cfg.max_retries):
        cam_y = float(rng.uniform(max(0.5, cfg.camera_height[0]),
                                  min(dims[1] - 0.5, cfg.camera_height[1])))
        cam_pos = np.array(
            [rng.uniform(0.5, dims[0] - 0.5), cam_y, rng.uniform(0.5, dims[2] - 0.5)]
        )
        yaw = float(rng.uniform(-180.0, 180.0))
        speakers: list[Loudspeaker] = []
        cam_dirs: list[np.ndarray] = []
        us: list[float] = []
        placed = True
        for i in range(n_speakers):
            for _ in range(60):
                extents = np.asarray(default_speaker_extents(rng))
                sp_y = float(rng.uniform(*cfg.speaker_height))
                dy = sp_y - cam_y
                dh_hi = math.sqrt(max(cfg.speaker_distance[1] ** 2 - dy**2, 0.0))
                dh_lo = max(
                    math.sqrt(max(cfg.speaker_distance[0] ** 2 - dy**2, 0.01)),
                    abs(dy) / 0.38,  # keeps the center's elevation inside the frame
                )
                if dh_lo >= dh_hi:
                    continue
                dh = float(rng.uniform(dh_lo, dh_hi))
                az_off = float(rng.uniform(-az_max, az_max))
                world_dir = yaw_matrix(yaw) @ _speaker_camera_dir(az_off)
                center = cam_pos + dh * world_dir
                center[1] = sp_y
                if not (np.all(center >= 0.5) and np.all(center <= dims - 0.5)):
                    continue
                lo, hi = center - extents / 2.0, center + extents / 2.0
                if np.any(lo < 0.0) or np.any(hi > dims):
                    continue
                cam_vec = world_to_camera(center - cam_pos, yaw)
                u, _v = project(cam_vec, intr)
                if not (15.0 <= u <= intr.width - 15.0):
                    continue
                doa_new = angles_from_dir(cam_vec)
                min_sep = min(
                    (angular_error(doa_new, angles_from_dir(d)) for d in cam_dirs),
                    default=np.inf,
                )
                min_du = min((abs(u - u0) for u0 in us), default=np.inf)
                if min_sep < cfg.min_separation_deg or min_du < cfg.min_separation_px:
                    continue
                speakers.append(
                    Loudspeaker(
                        instance_id=i + 1,
                        center=tuple(float(c) for c in center),
                        extents=tuple(float(e) for e in extents),
                    )
                )
                cam_dirs.append(cam_vec)
                us.append(u)
                break
            else:
                placed = False
                break
        if not placed:
            continue
        scene = VisualScene(
            room_dims=tuple(float(d) for d in dims),
            loudspeakers=speakers,
            camera=CameraPose(tuple(float(c) for c in cam_pos), yaw),
            intrinsics=intr,
        )
        depth, mask = render_depth(scene)
        threshold = visibility_threshold(intr.width, intr.height)
        if all(visible_pixels(mask, s.instance_id) >= threshold for s in speakers):
            labels = _labels_by_u(us, [s.instance_id for s in speakers])
            return room_id, room, scene, depth, mask, labels
    raise GenerationError(
        f"could not place {n_speakers} visible loudspeakers after "
        f"{cfg.max_retries} attempts"
    )


def _labels_by_u(us: list[float], ids: list[int]) -> dict[int, str]:
    """Left/Center/Right by ascending pixel u; empty for a single speaker."""
    if len(us) < 2:
        return {}
    order = sorted(range(len(us)), key=lambda i: us[i])
    names = _LABELS[len(us)]
    return {ids[i]: names[rank] for rank, i in enumerate(order)}


def _visual_scene_dict(room_id, room, scene: VisualScene) -> dict:
    intr = scene.intrinsics
    return {
        "room_id": int(room_id),
        "room": {
            "dims": _jsonable(room.dims),
            "absorption": _jsonable(room.absorption),
            "speed_of_sound": float(room.speed_of_sound),
            "max_order": int(room.max_order),
        },
        "camera": {
            "position": list(scene.camera.position),
            "yaw_deg": float(scene.camera.yaw_deg),
            "intrinsics": {
                "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                "width": intr.width, "height": intr.height,
            },
        },
        "loudspeakers": [
            {"id": s.instance_id, "center": list(s.center), "extents": list(s.extents)}
            for s in scene.loudspeakers
        ],
    }


def _n_speakers(task: str, rng) -> int:
    counts, probs = _SOURCE_COUNT_CHOICES[task]
    return int(rng.choice(counts, p=probs))


def _make_c(rng, cfg: GenConfig):
    from .scene_render import gt_box_camera

    room_id, room, scene, depth, mask, _labels = _place_visual_scene(
        rng, cfg, _n_speakers("C", rng)
    )
    boxes = []
    for k, spk in enumerate(scene.loudspeakers):
        box = gt_box_camera(scene, spk.instance_id)
        boxes.append(
            {
                "k": k,
                "id": spk.instance_id,
                "category": box.category,
                "center": _jsonable(box.center),
                "extents": _jsonable(box.extents),
            }
        )
    gt = {"boxes": boxes}
    scene_dict = _visual_scene_dict(room_id, room, scene)
    return (
        _question("C", rng),
        regenerate_answer("C", gt),
        gt,
        scene_dict,
        MediaBundle(depth=depth, mask=mask),
    )


def _make_matching_task(task: str, rng, cfg: GenConfig):
    room_id, room, scene, depth, mask, labels = _place_visual_scene(
        rng, cfg, _n_speakers(task, rng)
    )
    speakers = scene.loudspeakers
    cam = scene.camera
    if task == "D":
        active = [speakers[int(rng.integers(len(speakers)))]]
        kinds = ["harmonic_tone" if rng.uniform() < 0.5 else "band_noise"]
        target_idx = 0
    else:
        picks = rng.permutation(len(speakers))[:2]
        active = [speakers[int(i)] for i in picks]
        kinds = ["harmonic_tone", "band_noise"]
        if rng.uniform() < 0.5:
            kinds.reverse()
        target_idx = int(rng.integers(2))
    pose = ScenePose(
        source_positions=[np.asarray(s.center) for s in active],
        receiver_position=np.asarray(cam.position),
        receiver_yaw_deg=cam.yaw_deg,
    )
    sources = [_synth(cfg, kind, rng) for kind in kinds]
    foa = render_scene(room, pose, sources, cfg.sample_rate)
    target = active[target_idx]
    gt = {
        "label": labels[target.instance_id],
        "labels_by_id": {str(s.instance_id): labels[s.instance_id] for s in speakers},
        "target_id": target.instance_id,
        "doa": _doa_dict(source_doa(pose, target_idx)),
        "active": [
            {"id": s.instance_id, "kind": kinds[i]} for i, s in enumerate(active)
        ],
    }
    if task == "E":
        gt["target_kind"] = kinds[target_idx]
        gt["bands"] = {kind: list(cfg.band_for(kind)) for kind in kinds}
    scene_dict = _visual_scene_dict(room_id, room, scene)
    scene_dict["receiver"] = {
        "position": list(cam.position),
        "yaw_deg": float(cam.yaw_deg),
    }
    scene_dict["sources"] = [
        {
            "kind": sig.kind,
            "band": list(sig.band),
            "seed": sig.seed,
            "position": _jsonable(pos),
        }
        for pos, sig in zip(pose.source_positions, sources)
    ]
    scene_dict["sample_rate"] = cfg.sample_rate
    scene_dict["duration_s"] = float(cfg.duration_s)
    question = _question(task, rng, kinds[target_idx] if task == "E" else None)
    return (
        question,
        regenerate_answer(task, gt),
        gt,
        scene_dict,
        MediaBundle(foa=foa, depth=depth, mask=mask),
    )


def make_sample(
    task: str,
    rng: np.random.Generator,
    cfg: GenConfig,
    sample_id: str = "sample",
    split: str = "train",
    sample_seed: int | None = None,
) -> tuple[QaSample, MediaBundle]:
    """Generate one sample plus its in-memory media."""
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    if task in ("A", "B"):
        built = _make_audio_task(task, rng, cfg)
    elif task == "C":
        built = _make_c(rng, cfg)
    else:
        built = _make_matching_task(task, rng, cfg)
    question, answer, gt, scene, bundle = built
    scene["seed"] = sample_seed
    sample = QaSample(
        sample_id=sample_id,
        task=task,
        question=question,
        answer=answer,
        media={},
        ground_truth=gt,
        scene=scene,
        split=split,
    )
    return sample, bundle


def persist_sample(sample: QaSample, bundle: MediaBundle, split_dir: Path) -> None:
    """Write media files under the split directory and record relative paths."""
    split_dir = Path(split_dir)
    if bundle.foa is not None:
        rel = f"audio/{sample.sample_id}.wav"
        (split_dir / "audio").mkdir(parents=True, exist_ok=True)
        write_foa_wav(bundle.foa, split_dir / rel)
        sample.media["foa_wav"] = rel
    if bundle.depth is not None:
        rel = f"depth/{sample.sample_id}.bin"
        (split_dir / "depth").mkdir(parents=True, exist_ok=True)
        write_depth(bundle.depth, split_dir / rel)
        sample.media["depth"] = rel
    if bundle.mask is not None:
        rel = f"mask/{sample.sample_id}.bin"
        (split_dir / "mask").mkdir(parents=True, exist_ok=True)
        write_mask(bundle.mask, split_dir / rel)
        sample.media["mask"] = rel


# ---------------------------------------------------------------------------
# JSONL persistence

_REQUIRED_KEYS = (
    "sample_id", "task", "question", "answer", "media",
    "ground_truth", "scene", "split",
)


def write_jsonl(samples, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[QaSample]:
    """Read and schema-validate a samples file; errors cite the line number."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON: {exc}") from exc
            missing = [k for k in _REQUIRED_KEYS if k not in record]
            if missing:
                raise ValidationError(f"line {lineno}: missing keys {missing}")
            if record["task"] not in TASKS:
                raise ValidationError(f"line {lineno}: unknown task {record['task']!r}")
            samples.append(QaSample.from_dict(record))
    return samples


# ---------------------------------------------------------------------------
# Split generation


@dataclass(frozen=True)
class DatasetSpec:
    """Counts per split and task plus the generation seed."""

    counts: dict = field(default_factory=lambda: default_counts())
    seed: int = 0
    max_order: int = 0
    absorption: float = 0.7
    duration_s: float = 1.0

    def gen_config(self, split: str) -> GenConfig:
        return GenConfig(
            duration_s=self.duration_s,
            absorption=self.absorption,
            max_order=self.max_order,
            room_pool=default_room_pool(_SPLIT_POOL_ID[split], base_seed=self.seed),
        )


def default_counts(totals: dict | None = None) -> dict:
    """Split the per-task totals 70/10/20 across train/val/test."""
    totals = totals or DEFAULT_TASK_TOTALS
    counts = {split: {} for split in _SPLIT_FRACTIONS}
    for task, n in totals.items():
        train = int(n * _SPLIT_FRACTIONS["train"])
        val = int(n * _SPLIT_FRACTIONS["val"])
        counts["train"][task] = train
        counts["val"][task] = val
        counts["test"][task] = n - train - val
    return counts


def gen_split(spec: DatasetSpec, out_root, threads: int = 1) -> dict:
    """Generate every split with disjoint room and seed pools; returns the manifest.

    Samples are independent, so generation runs on a worker pool of
    ``threads``; output ordering and content do not depend on the pool size.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    pool_ids = {}
    seed_ranges = {}
    for split in spec.counts:
        if split not in _SPLIT_POOL_ID:
            raise ConfigurationError(f"unknown split {split!r}")
        pool_ids[split] = {rid for rid, _ in default_room_pool(
            _SPLIT_POOL_ID[split], base_seed=spec.seed)}
        total = sum(spec.counts[split].values())
        base = _SPLIT_SEED_BASE[split]
        seed_ranges[split] = (base, base + total)
    _check_disjoint(pool_ids, "room pool")
    splits = list(seed_ranges)
    for i, a in enumerate(splits):
        for b in splits[i + 1 :]:
            (alo, ahi), (blo, bhi) = seed_ranges[a], seed_ranges[b]
            if alo < bhi and blo < ahi:
                raise ConfigurationError(f"seed pool overlaps between {a} and {b}")
    manifest = {"seed": spec.seed, "splits": {}}
    for split, task_counts in spec.counts.items():
        cfg = spec.gen_config(split)
        split_dir = out_root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        jobs = []
        running = 0
        for task in TASKS:
            for _ in range(task_counts.get(task, 0)):
                sample_seed = _SPLIT_SEED_BASE[split] + running
                running += 1
                jobs.append((task, sample_seed))

        def build(job):
            task, sample_seed = job
            rng = np.random.default_rng((spec.seed, sample_seed))
            sid = f"{split}-{task}{sample_seed:08d}"
            sample, bundle = make_sample(
                task, rng, cfg, sample_id=sid, split=split, sample_seed=sample_seed
            )
            persist_sample(sample, bundle, split_dir)
            return sample

        if threads > 1 and len(jobs) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                samples = list(pool.map(build, jobs))
        else:
            samples = [build(job) for job in jobs]
        jsonl_path = split_dir / "samples.jsonl"
        write_jsonl(samples, jsonl_path)
        manifest["splits"][split] = {
            "counts": {t: task_counts.get(t, 0) for t in TASKS},
            "room_pool_ids": sorted(pool_ids[split]),
            "source_seed_base": _SPLIT_SEED_BASE[split],
            "config_hash": cfg.config_hash(),
            "samples_sha256": hashlib.sha256(jsonl_path.read_bytes()).hexdigest(),
        }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    manifest["manifest_sha256"] = hashlib.sha256(blob).hexdigest()
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _check_disjoint(pools: dict, what: str) -> None:
    splits = list(pools)
    for i, a in enumerate(splits):
        for b in splits[i + 1 :]:
            if pools[a] & pools[b]:
                raise ConfigurationError(f"{what} overlaps between {a} and {b}")


# ---------------------------------------------------------------------------
# Validation


def validate_sample(sample: QaSample, root=None, bundle: MediaBundle | None = None) -> None:
    """Check a sample's invariants; raises ``ValidationError`` on the first failure."""
    if sample.task not in TASKS:
        raise ValidationError(f"{sample.sample_id}: unknown task {sample.task!r}")
    expected = regenerate_answer(sample.task, sample.ground_truth)
    if expected != sample.answer:
        raise ValidationError(
            f"{sample.sample_id}: answer {sample.answer!r} is not regenerable "
            f"(expected {expected!r})"
        )
    if sample.task in ("B", "E"):
        bands = [tuple(s["band"]) for s in sample.scene.get("sources", [])]
        for i, a in enumerate(bands):
            for b in bands[i + 1 :]:
                if a[0] <= b[1] and b[0] <= a[1]:
                    raise ValidationError(
                        f"{sample.sample_id}: overlapping source bands {a} and {b}"
                    )
    if sample.task in ("D", "E"):
        _validate_matching_labels(sample)
    if sample.task == "C":
        _validate_visibility(sample, root, bundle)


def _validate_matching_labels(sample: QaSample) -> None:
    cam = sample.scene["camera"]
    intr = CameraIntrinsics(**cam["intrinsics"])
    us = {}
    for spk in sample.scene["loudspeakers"]:
        rel = np.asarray(spk["center"]) - np.asarray(cam["position"])
        u, _ = project(world_to_camera(rel, cam["yaw_deg"]), intr)
        us[spk["id"]] = u
    order = sorted(us, key=us.get)
    names = _LABELS[len(order)]
    recomputed = {str(sid): names[rank] for rank, sid in enumerate(order)}
    if recomputed != sample.ground_truth["labels_by_id"]:
        raise ValidationError(
            f"{sample.sample_id}: stored labels {sample.ground_truth['labels_by_id']} "
            f"!= recomputed {recomputed}"
        )
    target = str(sample.ground_truth["target_id"])
    if sample.ground_truth["label"] != recomputed[target]:
        raise ValidationError(f"{sample.sample_id}: label does not match target id")
    if sample.answer not in _LABELS[3]:
        raise ValidationError(f"{sample.sample_id}: answer {sample.answer!r} not a label")


def _validate_visibility(sample: QaSample, root, bundle: MediaBundle | None) -> None:
    from .scene_render import read_mask

    if bundle is not None and bundle.mask is not None:
        mask = bundle.mask
    elif root is not None and "mask" in sample.media:
        mask = read_mask(Path(root) / sample.split / sample.media["mask"])
    else:
        raise ValidationError(f"{sample.sample_id}: no mask available for validation")
    intr = sample.scene["camera"]["intrinsics"]
    threshold = visibility_threshold(intr["width"], intr["height"])
    for box in sample.ground_truth["boxes"]:
        n = visible_pixels(mask, box["id"])
        if n < threshold:
            raise ValidationError(
                f"{sample.sample_id}: instance {box['id']} shows {n} px < {threshold}"
            )


def validate_dataset(root, split: str) -> int:
    """Validate every sample of a split; returns the number checked."""
    root = Path(root)
    samples = read_jsonl(root / split / "samples.jsonl")
    for sample in samples:
        validate_sample(sample, root=root)
    return len(samples)
