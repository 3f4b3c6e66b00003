"""Reconstruction objectives, unit optimization, and agreement scoring."""

import copy

import numpy as np
import pytest

import segptq.autodiff as ad
from segptq.calibration import CalibPolicy, calibrate_model
from segptq.hooks import QuantEnv
from segptq.reconstruction import (
    QuantizedModel,
    ReconConfig,
    ReconTarget,
    _collect_fp_refs,
    collect_interaction_targets,
    evaluate_agreement,
    local_recon_loss,
    mask_iou,
    optimize_unit,
    par_loss,
    run_reconstruction,
)


@pytest.fixture(scope="module")
def items(calib_items):
    images, prompt_sets = calib_items
    return list(zip(images, prompt_sets))[:2]


@pytest.fixture(scope="module")
def lowbit_env(small_model, items):
    policy = CalibPolicy(act_bits=4, weight_bits=4, qk_metric="mse",
                         grid_steps=12)
    images = [img for img, _ in items]
    prompts = [p for _, p in items]
    return calibrate_model(small_model, images, prompts, policy).env


def _tiny_cfg(**kw):
    base = dict(iterations=3, final_block_iterations=3, iter_scale=1.0,
                eval_every=1, seed=0)
    base.update(kw)
    return ReconConfig(**base)


# ---------------------------------------------------------------------------
# objectives and mask agreement
# ---------------------------------------------------------------------------

class TestLosses:
    def test_par_loss_zero_on_match(self, rng):
        h = rng.normal(size=(8, 4))
        t = ReconTarget(boundary=0, item=0, hybrid=h.copy(),
                        prompt_tokens=np.zeros((1, 4)))
        assert par_loss(ad.Tensor(h), t).item() == 0.0

    def test_par_loss_is_squared_l2(self, rng):
        h = rng.normal(size=(8, 4))
        t = ReconTarget(boundary=0, item=0, hybrid=np.zeros_like(h),
                        prompt_tokens=np.zeros((1, 4)))
        assert par_loss(ad.Tensor(h), t).item() == pytest.approx((h ** 2).sum())

    def test_par_loss_shape_mismatch_raises(self):
        t = ReconTarget(boundary=0, item=0, hybrid=np.zeros((8, 4)),
                        prompt_tokens=np.zeros((1, 4)))
        with pytest.raises(ValueError):
            par_loss(ad.Tensor(np.zeros((4, 8))), t)

    def test_local_loss_matches_manual_sum(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert local_recon_loss(ad.Tensor(a), b).item() == pytest.approx(
            ((a - b) ** 2).sum())

    def test_mask_iou_cases(self):
        empty = np.zeros((4, 4), dtype=bool)
        full = np.ones((4, 4), dtype=bool)
        half = full.copy()
        half[:2] = False
        assert mask_iou(empty, empty) == 1.0
        assert mask_iou(full, full) == 1.0
        assert mask_iou(full, empty) == 0.0
        assert mask_iou(full, half) == 0.5


# ---------------------------------------------------------------------------
# teacher targets
# ---------------------------------------------------------------------------

class TestTargets:
    def test_one_target_per_item_and_boundary(self, small_model, items):
        targets = collect_interaction_targets(small_model, items, [2, 5])
        keys = {(t.boundary, t.item) for t in targets}
        assert len(targets) == 4
        assert keys == {(2, 0), (2, 1), (5, 0), (5, 1)}
        cfg = small_model.cfg
        for t in targets:
            assert t.hybrid.shape == (cfg.num_tokens, cfg.neck_dim)

    def test_targets_are_deterministic(self, small_model, items):
        a = collect_interaction_targets(small_model, items, [5])
        b = collect_interaction_targets(small_model, items, [5])
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.hybrid, tb.hybrid)

    def test_earlier_boundary_skips_later_layers(self, small_model, items):
        t2, t5 = (collect_interaction_targets(small_model, items[:1], [b])[0]
                  for b in (2, 5))
        assert not np.array_equal(t2.hybrid, t5.hybrid)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class TestReconConfig:
    @pytest.mark.parametrize("kwargs", [
        {"iterations": 0},
        {"final_block_iterations": -1},
        {"drop_prob": 1.5},
        {"objective": "global"},
        {"granularity": "per-head"},
    ])
    def test_invalid_config_raises(self, kwargs):
        with pytest.raises(ValueError):
            ReconConfig(**kwargs)

    def test_final_block_gets_long_budget(self):
        cfg = ReconConfig(iterations=2000, final_block_iterations=10000,
                          iter_scale=0.1)
        assert cfg.unit_iterations("stage0") == 200
        assert cfg.unit_iterations("dec_final") == 1000

    def test_budget_never_drops_below_one(self):
        cfg = ReconConfig(iterations=2, iter_scale=0.1)
        assert cfg.unit_iterations("stage0") == 1


# ---------------------------------------------------------------------------
# unit optimization
# ---------------------------------------------------------------------------

class TestOptimizeUnit:
    def test_neck_unit_never_worsens(self, small_model, items, lowbit_env):
        env = copy.deepcopy(lowbit_env)
        refs = _collect_fp_refs(small_model, items)
        rec = optimize_unit(small_model, "neck", items, env, _tiny_cfg(),
                            "local", set(), refs, {})
        assert rec["unit"] == "neck"
        assert rec["final_loss"] <= rec["initial_loss"]
        assert rec["iterations"] == 3
        assert 0.0 <= rec["polarization"] <= 1.0

    def test_unit_params_frozen_after_learning(self, small_model, items,
                                               lowbit_env):
        env = copy.deepcopy(lowbit_env)
        refs = _collect_fp_refs(small_model, items)
        optimize_unit(small_model, "neck", items, env, _tiny_cfg(), "local",
                      set(), refs, {})
        acts, weights = small_model.unit_hooks("neck")
        for h in acts:
            assert not env.act_params[h].learnable
        for h in weights:
            assert h in env.rounding  # adaptive rounding stays for deployment
        assert env.active is None
        assert env.drop_prob == 0.0
        assert not env.soft_weights

    def test_empty_unit_raises(self, small_model, items):
        refs = _collect_fp_refs(small_model, items)
        with pytest.raises(ValueError, match="no learnable"):
            optimize_unit(small_model, "neck", items, QuantEnv(), _tiny_cfg(),
                          "local", set(), refs, {})


# ---------------------------------------------------------------------------
# whole-model pass
# ---------------------------------------------------------------------------

class TestRunReconstruction:
    @pytest.mark.parametrize("objective", ["local", "par"])
    def test_front_to_back_unit_records(self, small_model, items, lowbit_env,
                                        objective):
        env = copy.deepcopy(lowbit_env)
        cfg = _tiny_cfg(objective=objective)
        records = run_reconstruction(small_model, items, env, cfg)
        assert [r["unit"] for r in records] == small_model.unit_ids("per-stage")
        for r in records:
            assert r["final_loss"] <= r["initial_loss"]
            want = objective if r["unit"].startswith("stage") else "local"
            assert r["objective"] == want
        for qp in env.act_params.values():
            assert not qp.learnable

    def test_per_layer_units(self, small_model, items, lowbit_env):
        env = copy.deepcopy(lowbit_env)
        cfg = _tiny_cfg(granularity="per-layer", objective="par")
        records = run_reconstruction(small_model, items, env, cfg)
        assert [r["unit"] for r in records] == small_model.unit_ids("per-layer")

    def test_repeat_runs_are_identical(self, small_model, items, lowbit_env):
        cfg = _tiny_cfg(objective="par", drop_prob=0.5)
        a = run_reconstruction(small_model, items, copy.deepcopy(lowbit_env),
                               cfg)
        b = run_reconstruction(small_model, items, copy.deepcopy(lowbit_env),
                               cfg)
        assert a == b


# ---------------------------------------------------------------------------
# agreement evaluation
# ---------------------------------------------------------------------------

class TestEvaluateAgreement:
    def test_identity_env_agrees_perfectly(self, small_model, items):
        report = evaluate_agreement(small_model,
                                    QuantizedModel(small_model, QuantEnv()),
                                    items)
        assert report["mask_iou"] == 1.0
        assert report["per_item_iou"] == [1.0, 1.0]
        assert report["hybrid_mse_per_stage"] == [0.0, 0.0]

    def test_sixteen_bit_minmax_is_transparent(self, small_model, items):
        images = [img for img, _ in items]
        prompts = [p for _, p in items]
        policy = CalibPolicy(act_bits=16, weight_bits=16, qk_metric="minmax",
                             act_metric="minmax", weight_metric="minmax")
        env = calibrate_model(small_model, images, prompts, policy).env
        report = evaluate_agreement(small_model,
                                    QuantizedModel(small_model, env), items)
        assert report["mask_iou"] == 1.0

    def test_lowbit_env_reports_finite_scores(self, small_model, items,
                                              lowbit_env):
        report = evaluate_agreement(small_model,
                                    QuantizedModel(small_model, lowbit_env),
                                    items)
        assert 0.0 <= report["mask_iou"] <= 1.0
        assert len(report["per_item_iou"]) == len(items)
        assert all(v >= 0.0 for v in report["hybrid_mse_per_stage"])
        assert report["eval_seconds"] > 0.0
