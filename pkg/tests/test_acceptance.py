"""End-to-end acceptance suite.

Each test prints one PASS line with its measured numbers once its assertions
hold (run pytest with -s or check captured output). Generated artifacts
(loss curves, the cross-evaluation matrix) land in <repo>/artifacts/.

Criteria:
  AC-1 anechoic single-source DoA, classical IV median <= 1 deg, <= 2 min
  AC-2 reverberant ordering: anechoic median <= reverb median <= 15 deg
  AC-3 overlap band-masked DoA, per-target median <= 5 deg
  AC-4 gradient check vs central finite differences, rel 1e-3, <= 5 min
  AC-5 learnability: held-out median <= 10 deg and <= untrained/5, <= 30 min
  AC-6 cross-evaluation: trained-overlap neural <= band-masked classical + 2
  AC-7 grounding: IoU oracle within 0.01; grounder offset/IoU bounds
  AC-8 matcher accuracy D >= 95%, E >= 90%; no-mask near chance
  AC-9 exactness: round trips, integer delays, grammar, validator, seeds
"""

import time
from pathlib import Path

import numpy as np
import pytest

from foaground import dataset_gen as dg
from foaground import eval_harness as eh
from foaground import neural_iv as ni
from foaground import room_sim as rs
from foaground import scene_render as sr
from foaground.foa_core import StftConfig, band_mask, classical_iv, doa_from_iv
from foaground.spatial_frame import (
    Box3D,
    CameraIntrinsics,
    DepthFrame,
    DoA,
    angular_error,
    backproject,
    center_offset,
    iou3d,
    project,
)
from oracles import (
    finite_difference_grads,
    gradcheck_max_rel_error,
    mc_iou,
    random_box_pair,
)

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts"
ARTIFACTS.mkdir(exist_ok=True)

STFT = StftConfig()
TONE_BAND = (200.0, 800.0)


def report(line: str) -> None:
    print(f"\n{line}", flush=True)


def single_source_clips(n, seed, max_order, duration=0.15):
    """(FoaSignal, DoA) pairs from generated single-source task scenes."""
    cfg = dg.GenConfig(duration_s=duration, max_order=max_order)
    clips = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        sample, bundle = dg.make_sample("A", rng, cfg, sample_id=f"a{i}", sample_seed=i)
        gt = sample.ground_truth["doa"]
        clips.append((bundle.foa, DoA(gt["azimuth_deg"], gt["elevation_deg"])))
    return clips


def overlap_clips(n, seed, max_order, duration=0.15):
    """(FoaSignal, tone-source DoA) pairs from overlap task scenes."""
    cfg = dg.GenConfig(duration_s=duration, max_order=max_order)
    clips = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        sample, bundle = dg.make_sample("B", rng, cfg, sample_id=f"b{i}", sample_seed=i)
        tone = next(
            s for s in sample.ground_truth["source_doas"] if s["kind"] == "harmonic_tone"
        )
        clips.append((bundle.foa, DoA(tone["azimuth_deg"], tone["elevation_deg"])))
    return clips


def classical_errors(clips, band=None):
    mask = band_mask(STFT, *band) if band else None
    return [
        angular_error(doa_from_iv(classical_iv(foa, STFT), mask), gt)
        for foa, gt in clips
    ]


def neural_errors(model, clips):
    return [angular_error(ni.forward_doa(model, foa), gt) for foa, gt in clips]


@pytest.fixture(scope="module")
def anechoic_500():
    t0 = time.time()
    clips = single_source_clips(500, seed=101, max_order=0, duration=1.0)
    errors = classical_errors(clips)
    return {"median": eh.median_lower(errors), "elapsed": time.time() - t0}


class TestAC1:
    def test_anechoic_single_source(self, anechoic_500):
        median = anechoic_500["median"]
        elapsed = anechoic_500["elapsed"]
        assert median <= 1.0
        assert elapsed <= 120.0
        report(f"AC-1 PASS: anechoic classical IV median {median:.4f} deg over 500 "
               f"scenes in {elapsed:.0f}s (bounds: <=1 deg, <=120s)")


class TestAC2:
    def test_reverberant_ordering(self, anechoic_500):
        clips = single_source_clips(500, seed=102, max_order=3, duration=1.0)
        errors = classical_errors(clips)
        median = eh.median_lower(errors)
        assert median >= anechoic_500["median"]
        assert median <= 15.0
        report(f"AC-2 PASS: reverberant (order 3, absorption 0.7) median "
               f"{median:.2f} deg vs anechoic {anechoic_500['median']:.4f} deg "
               f"(bounds: >= anechoic, <=15 deg)")


class TestAC3:
    def test_overlap_band_masked(self):
        cfg = dg.GenConfig(duration_s=1.0, max_order=0)
        errors = []
        for i in range(500):
            rng = np.random.default_rng((103, i))
            sample, bundle = dg.make_sample("B", rng, cfg, sample_id=f"b{i}", sample_seed=i)
            iv = classical_iv(bundle.foa, STFT)
            bands = {s["kind"]: tuple(s["band"]) for s in sample.scene["sources"]}
            for src in sample.ground_truth["source_doas"]:
                est = doa_from_iv(iv, band_mask(STFT, *bands[src["kind"]]))
                errors.append(
                    angular_error(est, DoA(src["azimuth_deg"], src["elevation_deg"]))
                )
        median = eh.median_lower(errors)
        assert median <= 5.0
        report(f"AC-3 PASS: per-target band-masked median {median:.4f} deg over "
               f"500 overlap scenes ({len(errors)} targets; bound <=5 deg)")


class TestAC4:
    def test_gradient_check(self):
        t0 = time.time()
        from foaground.foa_core import FoaSignal

        config = ni.NivConfig(channel_width=8, mlp_hidden=16, embed_dim=8, seed=0)
        model = ni.NivModel.initialize(config)
        rng = np.random.default_rng(104)
        # one 0.25 s random clip at 16 kHz
        batch = [(FoaSignal(rng.normal(size=(4, 4000))), DoA(25.0, -10.0))]
        _, analytic = ni.loss_and_grads(model, batch)
        numeric = finite_difference_grads(model, batch, step=1e-3)
        worst = gradcheck_max_rel_error(analytic, numeric)
        elapsed = time.time() - t0
        n_params = sum(p.size for p in model.params.values())
        assert worst < 1e-3
        assert elapsed <= 300.0
        report(f"AC-4 PASS: {n_params} parameters checked, worst relative error "
               f"{worst:.2e} in {elapsed:.0f}s (bounds: <1e-3, <=300s)")


@pytest.fixture(scope="module")
def trained_anechoic():
    t0 = time.time()
    train_clips = single_source_clips(2000, seed=105, max_order=0)
    held = single_source_clips(200, seed=106, max_order=0)
    untrained = ni.NivModel.initialize(ni.NivConfig(seed=0))
    untrained_median = eh.median_lower(neural_errors(untrained, held))
    model = ni.NivModel.initialize(ni.NivConfig(seed=0))
    model, curve = ni.train(model, train_clips, ni.TrainConfig(steps=3000, seed=0))
    return {
        "model": model,
        "curve": curve,
        "held": held,
        "untrained_median": untrained_median,
        "elapsed": time.time() - t0,
    }


class TestAC5:
    def test_learnability(self, trained_anechoic):
        r = trained_anechoic
        median = eh.median_lower(neural_errors(r["model"], r["held"]))
        curve = np.asarray(r["curve"])
        with open(ARTIFACTS / "ac5_loss_curve.csv", "w") as fh:
            fh.write("step,loss\n")
            for i, loss in enumerate(curve, start=1):
                fh.write(f"{i},{loss:.6f}\n")
        ma = np.convolve(curve, np.ones(100) / 100, mode="valid")
        max_rise = float(np.max(np.diff(ma)))
        slack = 0.01 * float(ma[0])  # tolerate batch noise on the smoothed curve
        assert median <= 10.0
        assert median <= r["untrained_median"] / 5.0
        assert r["elapsed"] <= 1800.0
        assert max_rise <= slack
        report(f"AC-5 PASS: held-out median {median:.2f} deg (untrained "
               f"{r['untrained_median']:.1f}, bounds: <=10 and <=untrained/5); "
               f"3000 steps in {r['elapsed'] / 60:.1f} min (<=30); loss MA100 "
               f"max rise {max_rise:.4f} <= {slack:.4f}")


class TestAC6:
    def test_cross_evaluation(self):
        train_single = single_source_clips(2000, seed=107, max_order=3)
        train_overlap = overlap_clips(2000, seed=108, max_order=3)
        test_sets = {
            "single": single_source_clips(150, seed=109, max_order=3),
            "overlap": overlap_clips(150, seed=110, max_order=3),
        }
        model_single = ni.NivModel.initialize(ni.NivConfig(seed=1))
        model_single, _ = ni.train(
            model_single, train_single, ni.TrainConfig(steps=2500, seed=1)
        )
        # the overlap objective sits on a long plateau before feature learning
        # kicks in (~2-3k steps), so this model gets a larger budget
        model_overlap = ni.NivModel.initialize(ni.NivConfig(seed=2))
        model_overlap, _ = ni.train(
            model_overlap, train_overlap, ni.TrainConfig(steps=7000, seed=2)
        )
        matrix = eh.cross_eval(
            train_cfgs={
                "classical": {"single": {"band": None}, "overlap": {"band": TONE_BAND}},
                "neural": {"single": model_single, "overlap": model_overlap},
            },
            test_sets=test_sets,
            stft_cfg=STFT,
        )
        (ARTIFACTS / "ac6_cross_eval.json").write_text(matrix.to_json())
        (ARTIFACTS / "ac6_cross_eval.txt").write_text(matrix.to_text())
        report("AC-6 matrix (archived to artifacts/ac6_cross_eval.json):\n"
               + matrix.to_text())
        neural_matched = matrix.cell("neural", "overlap", "overlap")
        classical_matched = matrix.cell("classical", "overlap", "overlap")
        assert neural_matched <= classical_matched + 2.0
        report(f"AC-6 PASS: matched-overlap neural {neural_matched:.2f} deg vs "
               f"classical band-masked {classical_matched:.2f} deg "
               f"(bound: neural <= classical + 2)")


class TestAC7:
    def test_iou_oracle_agreement(self):
        rng = np.random.default_rng(111)
        worst = 0.0
        for _ in range(100):
            a, b = random_box_pair(rng)
            worst = max(worst, abs(iou3d(a, b) - mc_iou(a, b, n=1_000_000, rng=rng)))
        assert worst < 0.01
        report(f"AC-7a PASS: closed-form IoU vs 1e6-sample Monte Carlo, worst "
               f"|diff| {worst:.4f} over 100 pairs (bound <0.01)")

    def test_baseline_grounder(self):
        cfg = dg.GenConfig()
        ious, offsets = [], []
        i = 0
        while len(ious) < 200:
            rng = np.random.default_rng((112, i))
            i += 1
            _, _, scene, depth, mask, _ = dg._place_visual_scene(rng, cfg, 1)
            pred = eh.baseline_grounder(depth, mask, 1, size_prior=(0.35, 0.9, 0.35))
            gt = sr.gt_box_camera(scene, 1)
            ious.append(iou3d(pred, gt))
            offsets.append(center_offset(pred, gt))
        med_iou = eh.median_lower(ious)
        med_off = eh.median_lower(offsets)
        assert med_off <= 0.25
        assert med_iou >= 0.4
        report(f"AC-7b PASS: grounder median IoU {med_iou:.3f} (>=0.4), median "
               f"offset {med_off:.3f} m (<=0.25) over 200 unoccluded instances")


@pytest.fixture(scope="module")
def matcher_samples():
    cfg = dg.GenConfig()
    out = {}
    for task, base in (("D", 113), ("E", 114)):
        pairs = []
        for i in range(500):
            rng = np.random.default_rng((base, i))
            sample, bundle = dg.make_sample(
                task, rng, cfg, sample_id=f"{task}{i}", sample_seed=i
            )
            pairs.append((sample, bundle.foa))
        out[task] = pairs
    return out


class TestAC8:
    def test_matcher_accuracy(self, matcher_samples):
        acc_d = eh.evaluate_matcher(matcher_samples["D"], "classical").metrics["accuracy"]
        acc_e = eh.evaluate_matcher(matcher_samples["E"], "classical").metrics["accuracy"]
        assert acc_d >= 0.95
        assert acc_e >= 0.90
        report(f"AC-8 PASS: matcher accuracy D {acc_d:.3f} (>=0.95), "
               f"E band-masked {acc_e:.3f} (>=0.90) over 500 samples each")

    def test_no_mask_collapses_to_chance(self, matcher_samples):
        acc = eh.evaluate_matcher(matcher_samples["E"], "classical_nomask").metrics["accuracy"]
        chance = eh.chance_rate([s for s, _ in matcher_samples["E"]])
        assert abs(acc - chance) <= 0.10
        report(f"AC-8 PASS: no-band-mask task E accuracy {acc:.3f} within 0.10 "
               f"of the split's chance rate {chance:.3f}")


class TestAC9:
    INTR = CameraIntrinsics(fx=554.26, fy=554.26, cx=319.5, cy=239.5, width=640, height=480)

    def test_projection_round_trips(self):
        rng = np.random.default_rng(115)
        depth = rng.uniform(0.3, 6.0, size=(480, 640))
        cloud = backproject(DepthFrame(depth, self.INTR))
        for _ in range(2000):
            v, u = int(rng.integers(480)), int(rng.integers(640))
            pu, pv = project(cloud.points[v, u], self.INTR)
            assert abs(pu - u) <= 1e-6 and abs(pv - v) <= 1e-6
            # and back again through an exact-depth raster
            d2 = np.zeros((480, 640))
            d2[v, u] = depth[v, u]
            q = backproject(DepthFrame(d2, self.INTR)).points[v, u]
            assert float(np.max(np.abs(q - cloud.points[v, u]))) <= 1e-6
        report("AC-9a PASS: 2000 backproject/project round trips exact to 1e-6")

    def test_rir_integer_delays(self):
        rng = np.random.default_rng(116)
        room = rs.RoomSpec((8, 3, 6), max_order=0)
        for _ in range(200):
            pose = rs.sample_scene(room, 1, rng)
            rir = rs.render_foa_rir(
                room, pose.source_positions[0], pose.receiver_position,
                pose.receiver_yaw_deg,
            )
            d = float(np.linalg.norm(pose.source_positions[0] - pose.receiver_position))
            assert np.flatnonzero(rir.channels[0])[0] == round(d / 343.0 * 16000)
        report("AC-9b PASS: direct-path delays integer-exact on 200 scenes")

    def test_grammar_round_trips(self):
        rng = np.random.default_rng(117)
        for _ in range(10_000):
            doa = DoA(float(rng.uniform(-180, 180)), float(rng.uniform(-90, 90)))
            text = dg.format_doa_answer(doa)
            assert dg.format_doa_answer(dg.parse_doa_answer(text)) == text
        for _ in range(10_000):
            box = Box3D(
                "speaker",
                np.round(rng.uniform(-8, 8, 3), 2),
                np.round(rng.uniform(0.05, 4, 3), 2) + 0.01,
            )
            k = int(rng.integers(0, 3))
            text = dg.format_bbox(k, box)
            k2, back = dg.parse_bbox(text)
            assert dg.format_bbox(k2, back) == text
        report("AC-9c PASS: 10,000 DoA and 10,000 bbox strings round-trip byte-exact")

    def test_dataset_validator_and_manifest_determinism(self, tmp_path):
        counts = {
            "train": {"A": 10, "B": 8, "C": 8, "D": 6, "E": 6},
            "val": {"A": 4, "B": 2, "C": 2, "D": 2, "E": 2},
            "test": {"A": 6, "B": 4, "C": 4, "D": 4, "E": 4},
        }
        spec = dg.DatasetSpec(counts=counts, seed=118)
        m1 = dg.gen_split(spec, tmp_path / "d1")
        total = 0
        for split in counts:
            total += dg.validate_dataset(tmp_path / "d1", split)
        assert total == sum(sum(t.values()) for t in counts.values())
        m2 = dg.gen_split(spec, tmp_path / "d2")
        assert m1["manifest_sha256"] == m2["manifest_sha256"]
        wavs = sorted((tmp_path / "d1" / "train" / "audio").iterdir())
        twin = tmp_path / "d2" / "train" / "audio"
        for wav in wavs[:3]:
            assert wav.read_bytes() == (twin / wav.name).read_bytes()
        report(f"AC-9d PASS: validator accepted {total}/{total} samples; "
               f"same-seed manifests and media are bitwise identical")

    def test_checkpoint_determinism(self, tmp_path):
        clips = single_source_clips(12, seed=119, max_order=0)
        cfg = ni.NivConfig(channel_width=4, mlp_hidden=8, embed_dim=6, seed=9)
        paths = []
        for run in range(2):
            model = ni.NivModel.initialize(cfg)
            model, _ = ni.train(model, clips, ni.TrainConfig(steps=30, seed=9, crop_samples=2000))
            path = tmp_path / f"run{run}.niv"
            ni.save_model(model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        report("AC-9e PASS: fixed-seed training reproduces bitwise-identical checkpoints")
