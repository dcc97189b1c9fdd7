"""Detector assembly, ablation flags, loss, decoding and NMS."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmamba import checkpoint
from spmamba import tensor as T
from spmamba.checks import CHECKS, _model
from spmamba.detect import assign_targets, compute_loss, decode, nms, pick_level
from spmamba.errors import ConfigError, DataError, DimensionError
from spmamba.gradcheck import grad_check
from spmamba.model import ABLATION_GROUPS, STRIDES, ModelConfig, RawPrediction, build_model
from spmamba.tensor import Tensor

from oracles import brute_force_nms

SMALL = dict(width=8, input_size=32, state_dim=2)


def _inventory(model):
    return [name for name, _ in model.named_parameters()]


def _softplus_inv(v):
    return np.log(np.expm1(v))


class TestConfig:
    def test_psa_width_must_split(self):
        with pytest.raises(ConfigError):
            ModelConfig(width=18, enable_psa=True)
        ModelConfig(width=18, enable_psa=False)

    def test_bad_level(self):
        with pytest.raises(ConfigError):
            ModelConfig(psa_level="P6")

    def test_input_size_multiple_of_32(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_size=100)

    def test_groups(self):
        assert ABLATION_GROUPS[1] == (False, False, False)
        assert ABLATION_GROUPS[7] == (True, True, True)
        assert len(set(ABLATION_GROUPS.values())) == 7


class TestAssembly:
    def test_grids_at_96(self):
        model = build_model(ModelConfig(width=8, state_dim=2), 0)
        pred = model(Tensor(np.random.default_rng(0).uniform(size=(1, 3, 96, 96))))
        assert pred.grid_shapes() == [(12, 12), (6, 6), (3, 3)]
        assert all(lv.shape[1] == 9 for lv in pred.levels)
        assert pred.strides == STRIDES

    def test_indivisible_input(self):
        model = build_model(ModelConfig(**SMALL), 0)
        with pytest.raises(DimensionError):
            model(Tensor(np.zeros((1, 3, 40, 40))))

    def test_flags_off_removes_modules(self):
        names = _inventory(build_model(ModelConfig.for_group(1, **SMALL), 0))
        assert not any(".ss2d." in n or n.startswith("psa.") or n.startswith("sppelan.") for n in names)
        full = _inventory(build_model(ModelConfig.for_group(7, **SMALL), 0))
        assert any(".ss2d." in n for n in full)
        assert any(n.startswith("psa.") for n in full)
        assert any(n.startswith("sppelan.") for n in full)

    @pytest.mark.parametrize("group", range(1, 8))
    def test_each_flag_owns_its_keys(self, group):
        mamba, psa, spp = ABLATION_GROUPS[group]
        names = _inventory(build_model(ModelConfig.for_group(group, **SMALL), 0))
        assert any(".ss2d." in n for n in names) == mamba
        assert any(n.startswith("psa.") for n in names) == psa
        assert any(n.startswith("sppelan.") for n in names) == spp

    def test_parameter_count_grows_with_every_module(self):
        counts = {g: build_model(ModelConfig.for_group(g, width=16), 0).num_parameters() for g in ABLATION_GROUPS}
        for a, b in itertools.permutations(ABLATION_GROUPS, 2):
            fa, fb = ABLATION_GROUPS[a], ABLATION_GROUPS[b]
            if fa != fb and all(x <= y for x, y in zip(fa, fb)):
                assert counts[a] < counts[b], (a, b)
        assert min(counts, key=counts.get) == 1
        assert max(counts, key=counts.get) == 7

    def test_same_seed_same_bytes(self):
        cfg = ModelConfig(**SMALL)
        a = checkpoint.dumps(build_model(cfg, 3).state_dict(), cfg.to_dict())
        b = checkpoint.dumps(build_model(cfg, 3).state_dict(), cfg.to_dict())
        c = checkpoint.dumps(build_model(cfg, 4).state_dict(), cfg.to_dict())
        assert a == b and a != c

    @pytest.mark.parametrize("group", [1, 7])
    def test_eval_forward_is_batch_invariant(self, group):
        model = build_model(ModelConfig.for_group(group, **SMALL), 1).eval()
        x = np.random.default_rng(2).uniform(size=(3, 3, 32, 32))
        joint = model(Tensor(x)).levels
        for i in range(3):
            alone = model(Tensor(x[i:i + 1])).levels
            for a, b in zip(joint, alone):
                np.testing.assert_allclose(a.data[i:i + 1], b.data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("level", ["P3", "P4", "P5"])
    def test_psa_levels(self, level):
        model = build_model(ModelConfig(psa_level=level, **SMALL), 0)
        assert f"psa_{level}" in model.feature_inventory()
        cap = {}
        model(Tensor(np.zeros((1, 3, 32, 32))), capture=cap)
        assert set(model.feature_inventory()) == set(cap)

    def test_state_dict_round_trip(self):
        cfg = ModelConfig(**SMALL)
        a, b = build_model(cfg, 0), build_model(cfg, 1)
        b.load_state_dict(a.state_dict())
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)))
        np.testing.assert_array_equal(a.eval()(x).levels[0].data, b.eval()(x).levels[0].data)


def _constant_prediction(image=32, nc=4, obj=-50.0, n=1):
    levels = [Tensor(np.concatenate([np.zeros((n, 4, image // s, image // s)),
                                     np.full((n, 1, image // s, image // s), obj),
                                     np.full((n, nc, image // s, image // s), -50.0)], axis=1))
              for s in STRIDES]
    return RawPrediction(levels, STRIDES, (image, image), nc)


def _perfect_prediction(targets, image=64, nc=4):
    """Raw outputs whose decoded boxes, objectness and classes reproduce the assignment exactly."""
    pred = _constant_prediction(image, nc, n=len(targets))
    assigned = assign_targets(targets, (image, image), pred.grid_shapes(), STRIDES)
    levels = []
    for lv, a, s in zip(pred.levels, assigned, STRIDES):
        d = lv.data.copy()
        h, w = d.shape[2:]
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * s, (np.arange(w) + 0.5) * s, indexing="ij")
        for b in range(d.shape[0]):
            pos = a.pos[b]
            bx = a.boxes[b]
            d[b, 0][pos] = _softplus_inv((cx - bx[..., 0])[pos] / s)
            d[b, 1][pos] = _softplus_inv((cy - bx[..., 1])[pos] / s)
            d[b, 2][pos] = _softplus_inv((bx[..., 2] - cx)[pos] / s)
            d[b, 3][pos] = _softplus_inv((bx[..., 3] - cy)[pos] / s)
            d[b, 4][pos] = 50.0
            for c in range(nc):
                d[b, 5 + c][pos & (a.cls[b] == c)] = 50.0
        levels.append(Tensor(d))
    return RawPrediction(levels, STRIDES, (image, image), nc)


class TestLoss:
    def test_empty_scene_confident_background(self):
        loss, parts = compute_loss(_constant_prediction(), [np.zeros((0, 5))])
        assert loss.item() < 1e-18
        assert parts["n_pos"] == 0

    def test_perfect_prediction(self):
        targets = [np.array([[0, 0.3, 0.3, 0.3, 0.25], [2, 0.7, 0.65, 0.5, 0.6]]), np.array([[3, 0.55, 0.55, 0.1, 0.12]])]
        loss, parts = compute_loss(_perfect_prediction(targets), targets)
        assert parts["n_pos"] > 0
        assert loss.item() < 1e-6

    def test_target_outside_unit_square(self):
        with pytest.raises(DataError):
            compute_loss(_constant_prediction(), [np.array([[0, 1.2, 0.5, 0.1, 0.1]])])
        with pytest.raises(DataError):
            compute_loss(_constant_prediction(), [np.array([[0, 0.95, 0.5, 0.2, 0.1]])])
        with pytest.raises(DataError):
            compute_loss(_constant_prediction(), [np.array([[4, 0.5, 0.5, 0.2, 0.1]])])

    def test_level_choice(self):
        assert pick_level(np.array([20.0, 64.0, 130.0]), STRIDES).tolist() == [0, 1, 2]

    def test_centre_cell_always_positive(self):
        t = [np.array([[1, 0.51, 0.49, 0.01, 0.01]])]  # far smaller than a cell
        assigned = assign_targets(t, (64, 64), [(8, 8), (4, 4), (2, 2)], STRIDES)
        assert sum(int(a.pos.sum()) for a in assigned) == 1
        assert assigned[0].pos[0, 3, 4]

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2 ** 20))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        pred = RawPrediction([Tensor(rng.normal(scale=5, size=(2, 9, 32 // s, 32 // s))) for s in STRIDES],
                             STRIDES, (32, 32), 4)
        targets = []
        for _ in range(2):
            k = rng.integers(0, 4)
            wh = rng.uniform(0.05, 0.5, (k, 2))
            c = rng.uniform(wh / 2, 1 - wh / 2)
            targets.append(np.column_stack([rng.integers(0, 4, k), c, wh]))
        loss, parts = compute_loss(pred, targets)
        assert loss.item() >= 0
        assert min(parts["loss_box"], parts["loss_obj"], parts["loss_cls"]) >= 0

    def test_loss_gradient_through_head(self):
        rng = np.random.default_rng(5)
        levels = [Tensor(rng.normal(size=(1, 9, 32 // s, 32 // s)), requires_grad=True) for s in STRIDES]
        targets = [np.array([[1, 0.4, 0.45, 0.3, 0.35], [0, 0.8, 0.2, 0.2, 0.2]])]
        rep = grad_check(lambda: compute_loss(RawPrediction(levels, STRIDES, (32, 32), 4), targets)[0], levels, tol=1e-6)
        assert rep.passed, str(rep)


class TestDecode:
    def test_confident_background_gives_nothing(self):
        assert decode(_constant_prediction(n=2)) == [[], []]

    def test_perfect_prediction_recovers_boxes(self):
        targets = [np.array([[0, 0.3, 0.3, 0.3, 0.25], [2, 0.7, 0.65, 0.5, 0.6]])]
        (dets,) = decode(_perfect_prediction(targets), 0.25, 0.45)
        got = sorted((d.class_id, *np.round(d.box.as_tuple(), 6)) for d in dets)
        assert got == [(0, 9.6, 11.2, 28.8, 27.2), (2, 28.8, 22.4, 60.8, 60.8)]

    def test_identical_boxes_suppressed(self):
        keep = nms(np.array([[0, 0, 10, 10], [0, 0, 10, 10]]), np.array([0.8, 0.9]), np.array([1, 1]))
        assert keep.tolist() == [1]

    def test_other_class_survives(self):
        keep = nms(np.array([[0, 0, 10, 10], [0, 0, 10, 10]]), np.array([0.8, 0.9]), np.array([0, 1]))
        assert keep.tolist() == [1, 0]

    @pytest.mark.parametrize("seed", range(5))
    def test_nms_matches_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 60, (50, 2))
        boxes = np.column_stack([xy, xy + rng.uniform(5, 30, (50, 2))])
        scores = rng.uniform(size=50)
        classes = rng.integers(0, 2, 50)
        for thr in (0.3, 0.45, 0.7):
            assert nms(boxes, scores, classes, thr).tolist() == brute_force_nms(boxes, scores, classes, thr)

    def test_thresholds_validated(self):
        with pytest.raises(ValueError):
            decode(_constant_prediction(), conf_thresh=1.5)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2 ** 20))
    def test_boxes_clamped_and_scores_in_range(self, seed):
        rng = np.random.default_rng(seed)
        pred = RawPrediction([Tensor(rng.normal(scale=3, size=(1, 9, 32 // s, 32 // s))) for s in STRIDES],
                             STRIDES, (32, 32), 4)
        for d in decode(pred, 0.001, 0.45)[0]:
            x1, y1, x2, y2 = d.box.as_tuple()
            assert 0 <= x1 < x2 <= 32 and 0 <= y1 < y2 <= 32
            assert 0 < d.score < 1


class TestFullModelGradient:
    def test_backprop_agrees_with_wide_step_differences(self):
        # Diagnostic companion to the h=1e-5 acceptance check: with a wider step the
        # finite-difference roundoff floor drops below the smallest gradients.
        f, inputs = _model(np.random.default_rng([0, list(CHECKS).index("model")]))
        with T.checked(False):
            rep = grad_check(f, inputs, h=1e-3, tol=1e-3, max_coords=60, seed=0)
        assert rep.passed, str(rep)
