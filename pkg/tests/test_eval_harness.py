import numpy as np
import pytest

from foaground.dataset_gen import GenConfig, make_sample
from foaground.errors import AlignmentError, ConfigurationError, GroundingError
from foaground.eval_harness import (
    EvalReport,
    ablation_report,
    baseline_grounder,
    chance_rate,
    cross_eval,
    eval_doa,
    eval_grounding,
    evaluate_matcher,
    greedy_match,
    match_speaker,
    median_lower,
    random_doa_median,
)
from foaground.foa_core import FoaSignal, encode_gains
from foaground.neural_iv import NivConfig, NivModel
from foaground.scene_render import CameraPose, Loudspeaker, VisualScene, render_depth
from foaground.spatial_frame import Box3D, CameraIntrinsics, DoA


class TestMedianAndDoa:
    def test_median_lower_interpolation(self):
        assert median_lower([1.0, 2.0, 100.0]) == 2.0
        assert median_lower([4.0, 1.0]) == 1.0
        assert median_lower([7.0]) == 7.0

    def test_eval_doa_example(self):
        preds = [DoA(1, 0), DoA(2, 0), DoA(100, 0)]
        gts = [DoA(0, 0)] * 3
        med, mean = eval_doa(preds, gts)
        assert med == pytest.approx(2.0)
        assert mean == pytest.approx(34.3333, abs=1e-3)

    def test_perfect_predictions(self):
        doas = [DoA(10, 5), DoA(-20, 30)]
        assert eval_doa(doas, doas) == (0.0, 0.0)

    def test_alignment_error(self):
        with pytest.raises(AlignmentError):
            eval_doa([DoA(0, 0)], [])
        with pytest.raises(AlignmentError):
            eval_doa([], [])

    def test_random_baseline_near_90(self):
        med = random_doa_median(200_000, np.random.default_rng(0))
        assert abs(med - 90.0) <= 2.0


class TestGrounding:
    def _box(self, cx, e=1.0):
        return Box3D("speaker", [cx, 0, -2], [e, e, e])

    def test_perfect(self):
        gts = [[self._box(0)], [self._box(3)]]
        out = eval_grounding(gts, gts)
        assert out["iou_mean"] == 1.0 and out["offset_mean_m"] == 0.0
        assert out["n_unmatched_gt"] == 0

    def test_all_disjoint(self):
        preds = [[self._box(0)]]
        gts = [[self._box(10)]]
        out = eval_grounding(preds, gts)
        assert out["iou_mean"] == 0.0 and out["iou_median"] == 0.0

    def test_unmatched_gt_counted(self):
        preds = [[self._box(0)]]
        gts = [[self._box(0), self._box(5)]]
        out = eval_grounding(preds, gts)
        assert out["n_unmatched_gt"] == 1
        assert out["iou_median"] in (0.0, 1.0)
        assert out["offset_mean_m"] == float("inf")

    def test_empty_gt(self):
        with pytest.raises(AlignmentError):
            eval_grounding([[self._box(0)]], [[]])

    def test_greedy_prefers_best(self):
        preds = [self._box(0.2), self._box(5.0)]
        gts = [self._box(0.0), self._box(5.1)]
        matches = greedy_match(preds, gts)
        assert {(i, j) for i, j, _ in matches} == {(0, 0), (1, 1)}

    def test_report_has_mean_and_median_columns(self):
        gts = [[self._box(0)], [self._box(2)]]
        out = eval_grounding(gts, gts)
        for key in ("iou_mean", "iou_median", "offset_mean_m", "offset_median_m"):
            assert key in out


class TestBaselineGrounder:
    INTR = CameraIntrinsics(fx=554.26, fy=554.26, cx=319.5, cy=239.5, width=640, height=480)

    def _scene(self, yaw=0.0):
        spk = Loudspeaker(1, (3.0, 1.0, 2.0), (0.4, 0.9, 0.35))
        return VisualScene(
            room_dims=(6, 3, 5),
            loudspeakers=[spk],
            camera=CameraPose((3.0, 1.2, 4.0), yaw),
            intrinsics=self.INTR,
        )

    def test_frontal_iou(self):
        from foaground.scene_render import gt_box_camera
        from foaground.spatial_frame import iou3d

        scene = self._scene()
        depth, mask = render_depth(scene)
        pred = baseline_grounder(depth, mask, 1, size_prior=(0.35, 0.9, 0.35))
        gt = gt_box_camera(scene, 1)
        assert iou3d(pred, gt) >= 0.5

    def test_front_face_within_pixel_footprint(self):
        scene = self._scene()
        depth, mask = render_depth(scene)
        pred = baseline_grounder(depth, mask, 1, size_prior=(0.35, 0.9, 0.35))
        true_front_z = -(4.0 - (2.0 + 0.35 / 2))  # camera z minus front-face plane
        assert abs(pred.max_corner[2] - true_front_z) < 0.02

    def test_prior_smaller_than_observed_keeps_surface(self):
        scene = self._scene(yaw=30.0)
        depth, mask = render_depth(scene)
        surf = baseline_grounder(depth, mask, 1, size_prior=(0.0, 0.0, 0.0))
        pred = baseline_grounder(depth, mask, 1, size_prior=(0.0, 0.0, 10.0))
        assert pred.extents[2] == pytest.approx(10.0)
        assert surf.extents[2] < 1.0
        np.testing.assert_allclose(surf.extents[:2], pred.extents[:2])

    def test_too_few_pixels(self):
        scene = self._scene()
        depth, mask = render_depth(scene)
        with pytest.raises(GroundingError):
            baseline_grounder(depth, mask, 7, size_prior=(0.35, 0.9, 0.35))


class TestMatchSpeaker:
    def _candidates(self):
        return [
            ("Left", Box3D("speaker", [-1.0, 0.0, -2.0], [0.3, 0.9, 0.3])),
            ("Right", Box3D("speaker", [1.0, 0.0, -2.0], [0.3, 0.9, 0.3])),
        ]

    def test_exact_direction(self):
        from foaground.spatial_frame import angles_from_dir

        cands = self._candidates()
        doa = angles_from_dir(np.array([-1.0, 0.0, -2.0]))
        assert match_speaker(doa, cands) == "Left"

    def test_tie_breaks_by_label_order(self):
        assert match_speaker(DoA(0, 0), self._candidates()) == "Left"

    def test_scale_invariance(self):
        cands = self._candidates()
        scaled = [
            (label, Box3D("speaker", box.center * 3.7, box.extents))
            for label, box in cands
        ]
        for az in (-40, -5, 3, 60):
            doa = DoA(az, 0)
            assert match_speaker(doa, cands) == match_speaker(doa, scaled)

    def test_empty_candidates(self):
        with pytest.raises(AlignmentError):
            match_speaker(DoA(0, 0), [])


class TestCrossEval:
    def _test_sets(self):
        rng = np.random.default_rng(1)
        sets = {}
        for regime in ("single", "overlap"):
            clips = []
            for _ in range(4):
                doa = DoA(float(rng.uniform(-180, 180)), float(rng.uniform(-60, 60)))
                gains = encode_gains(doa)
                clips.append((FoaSignal(gains[:, None] * rng.normal(size=600)), doa))
            sets[regime] = clips
        return sets

    def _models(self):
        cfg = NivConfig(channel_width=4, mlp_hidden=8, embed_dim=6, seed=0)
        return {"single": NivModel.initialize(cfg), "overlap": NivModel.initialize(cfg)}

    def test_shape_and_determinism(self):
        cfgs = {
            "classical": {"single": {"band": None}, "overlap": {"band": (200.0, 800.0)}},
            "neural": self._models(),
        }
        sets = self._test_sets()
        m1 = cross_eval(cfgs, sets)
        m2 = cross_eval(cfgs, sets)
        assert len(m1.entries) == 8
        assert m1.entries == m2.entries
        text = m1.to_text()
        assert "Classical IV" in text and "Neural IV" in text

    def test_missing_model(self):
        cfgs = {
            "classical": {"single": {"band": None}, "overlap": {"band": None}},
            "neural": {"single": self._models()["single"]},
        }
        with pytest.raises(ConfigurationError):
            cross_eval(cfgs, self._test_sets())

    def test_missing_test_set(self):
        cfgs = {
            "classical": {"single": {"band": None}, "overlap": {"band": None}},
            "neural": self._models(),
        }
        with pytest.raises(ConfigurationError):
            cross_eval(cfgs, {"single": self._test_sets()["single"], "overlap": []})


class TestAblation:
    def _report(self, acc):
        return EvalReport(task="E", n_samples=10, metrics={"accuracy": acc}, config_hash="h")

    def test_identical_variants(self):
        report = ablation_report([("a", self._report(0.9)), ("b", self._report(0.9))])
        d = report.to_dict()
        assert d["a"] == d["b"]
        assert "variant" in report.to_text()

    def test_split_mismatch(self):
        a = self._report(0.9)
        b = EvalReport(task="D", n_samples=10, metrics={"accuracy": 0.5}, config_hash="h")
        with pytest.raises(ConfigurationError):
            ablation_report([("a", a), ("b", b)])

    def test_serializes(self):
        import json

        report = ablation_report([("a", self._report(0.8)), ("b", self._report(0.4))])
        parsed = json.loads(report.to_json())
        assert parsed["a"]["metrics"]["accuracy"] == 0.8


class TestMatcherPipeline:
    def test_classical_matcher_on_generated_samples(self):
        cfg = GenConfig()
        pairs = []
        for seed in range(40, 52):
            rng = np.random.default_rng(seed)
            sample, bundle = make_sample("D", rng, cfg, sample_id=f"d{seed}", sample_seed=seed)
            pairs.append((sample, bundle.foa))
        report = evaluate_matcher(pairs, "classical")
        assert report.n_samples == len(pairs)
        assert report.metrics["accuracy"] >= 0.9

    def test_neural_requires_model(self):
        with pytest.raises(ConfigurationError):
            evaluate_matcher([], "neural")

    def test_chance_rate(self):
        cfg = GenConfig()
        samples = []
        for seed in (60, 61, 62):
            rng = np.random.default_rng(seed)
            sample, _ = make_sample("D", rng, cfg, sample_id=f"c{seed}", sample_seed=seed)
            samples.append(sample)
        rate = chance_rate(samples)
        assert 1.0 / 3.0 - 1e-9 <= rate <= 0.5 + 1e-9
