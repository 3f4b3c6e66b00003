"""Segmenter model: config validation, stage partition, shapes, hooks, I/O."""

import numpy as np
import pytest

from segptq.model import Model, ModelConfig, PromptSpec, build_model
from segptq.model.config import StagePlan, stage_partition
from segptq.model.layers import window_partition, window_unpartition
from segptq.model.weights_io import (
    _encode_tensors,
    load_weights,
    save_weights,
)

import segptq.autodiff as ad


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class TestConfig:
    def test_default_derived_shapes(self):
        cfg = ModelConfig()
        assert cfg.grid_side == 8
        assert cfg.num_tokens == 64
        assert cfg.head_dim == 16
        assert cfg.window_side == 2
        assert cfg.mlp_hidden == 256

    def test_layer_kinds_pattern(self):
        kinds = ModelConfig().layer_kinds()
        assert kinds == ["window", "window", "global",
                         "window", "window", "global"]

    def test_dict_round_trip(self):
        cfg = ModelConfig(encoder_layers=4, global_layer_indices=(1, 3))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kwargs", [
        {"image_size": 63},
        {"embed_dim": 65},
        {"neck_dim": 33},
        {"window_size": 3},
        {"global_layer_indices": ()},
        {"global_layer_indices": (2, 9)},
        {"global_layer_indices": (2, 4)},  # last layer must be global
    ])
    def test_invalid_config_raises(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestStagePartition:
    def test_twelve_layer_partition(self):
        kinds = ["window"] * 12
        for i in (2, 5, 8, 11):
            kinds[i] = "global"
        plan = stage_partition(kinds)
        assert plan.stages == [(0, 2), (3, 5), (6, 8), (9, 11)]

    def test_default_model_partition(self):
        plan = stage_partition(ModelConfig().layer_kinds())
        assert plan.stages == [(0, 2), (3, 5)]

    def test_adjacent_globals_make_singleton_stages(self):
        plan = stage_partition(["global", "global"])
        assert plan.stages == [(0, 0), (1, 1)]

    def test_layer_to_stage_lookup(self):
        plan = stage_partition(["window", "global", "window", "global"])
        assert [plan.stage_of_layer(i) for i in range(4)] == [0, 0, 1, 1]
        assert plan.layers_of_stage(1) == [2, 3]
        with pytest.raises(ValueError):
            plan.stage_of_layer(4)

    def test_open_partition_rejected(self):
        with pytest.raises(ValueError):
            stage_partition(["global", "window"])
        with pytest.raises(ValueError):
            stage_partition([])
        with pytest.raises(ValueError):
            stage_partition(["local", "global"])

    def test_plan_must_tile_layers(self):
        with pytest.raises(ValueError):
            StagePlan([(0, 2), (4, 5)])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

class TestForward:
    def test_predict_output_shapes(self, small_model, calib_items):
        images, prompt_sets = calib_items
        cfg = small_model.cfg
        out = small_model.predict(images[0], prompt_sets[0])
        assert out["mask_logits"].shape == (cfg.image_size, cfg.image_size)
        assert out["hybrid_tokens"].shape == (cfg.num_tokens, cfg.neck_dim)
        assert out["embedding"].shape == (cfg.num_tokens, cfg.neck_dim)
        assert len(out["stage_outputs"]) == small_model.stage_plan().num_stages
        for s in out["stage_outputs"]:
            assert s.shape == (cfg.num_tokens, cfg.embed_dim)

    def test_window_partition_round_trip(self, rng):
        x = ad.Tensor(rng.normal(size=(64, 16)))
        w = window_partition(x, grid_side=8, window_side=2)
        assert w.shape == (16, 4, 16)  # 16 tiles of 4 tokens
        back = window_unpartition(w, grid_side=8, window_side=2)
        np.testing.assert_array_equal(back.data, x.data)

    def test_window_partition_groups_spatial_neighbors(self):
        idx = ad.Tensor(np.arange(64, dtype=np.float64).reshape(64, 1))
        w = window_partition(idx, grid_side=8, window_side=2)
        # first tile = the 2x2 corner of the 8-wide token grid
        assert w.data[0, :, 0].tolist() == [0.0, 1.0, 8.0, 9.0]

    def test_build_is_deterministic(self, small_model):
        again = build_model(ModelConfig(seed=7))
        assert set(again.params) == set(small_model.params)
        for name, value in small_model.params.items():
            np.testing.assert_array_equal(value, again.params[name])

    def test_seed_changes_parameters(self, small_model):
        other = build_model(ModelConfig(seed=8))
        diffs = [not np.array_equal(other.params[n], small_model.params[n])
                 for n in small_model.params]
        assert any(diffs)

    def test_predict_is_deterministic(self, small_model, calib_items):
        images, prompt_sets = calib_items
        a = small_model.predict(images[0], prompt_sets[0])["mask_logits"].data
        b = small_model.predict(images[0], prompt_sets[0])["mask_logits"].data
        np.testing.assert_array_equal(a, b)

    def test_layerwise_encode_matches_staged_encode(self, small_model,
                                                    calib_items):
        images, _ = calib_items
        outs = small_model.encode_image_layers(images[0])
        stage_outputs, _ = small_model.encode_image(images[0])
        assert len(outs) == small_model.cfg.encoder_layers
        np.testing.assert_array_equal(outs[-1].data, stage_outputs[-1].data)
        plan = small_model.stage_plan()
        for k, (_, end) in enumerate(plan.stages):
            np.testing.assert_array_equal(outs[end].data,
                                          stage_outputs[k].data)

    def test_forward_from_stage_bounds(self, small_model, calib_items):
        images, _ = calib_items
        stage_outputs, emb = small_model.encode_image(images[0])
        skipped = small_model.forward_from_stage(stage_outputs[-1],
                                                 len(stage_outputs) - 1)
        np.testing.assert_array_equal(skipped.data, emb.data)
        with pytest.raises(ValueError):
            small_model.forward_from_stage(stage_outputs[0], 99)

    def test_wrong_image_size_raises(self, small_model):
        with pytest.raises(ValueError):
            small_model.patch_embed(np.zeros((1, 32, 32)))


class TestPrompts:
    def test_point_yields_one_token(self, small_model):
        t = small_model.encode_prompts([PromptSpec("point", (10, 20))])
        assert t.shape == (1, small_model.cfg.neck_dim)

    def test_box_yields_two_tokens(self, small_model):
        t = small_model.encode_prompts([PromptSpec("box", (4, 4, 40, 40))])
        assert t.shape == (2, small_model.cfg.neck_dim)

    def test_background_point_differs_from_foreground(self, small_model):
        fg = small_model.encode_prompts([PromptSpec("point", (10, 20), label=1)])
        bg = small_model.encode_prompts([PromptSpec("point", (10, 20), label=0)])
        assert not np.array_equal(fg.data, bg.data)

    def test_empty_prompt_list_raises(self, small_model):
        with pytest.raises(ValueError):
            small_model.encode_prompts([])

    @pytest.mark.parametrize("spec", [
        PromptSpec("circle", (1, 2)),
        PromptSpec("point", (1, 2, 3)),
        PromptSpec("point", (1, 999)),
        PromptSpec("point", (1, 2), label=7),
        PromptSpec("box", (1, 2)),
    ])
    def test_invalid_prompt_raises(self, small_model, spec):
        with pytest.raises(ValueError):
            small_model.encode_prompts([spec])

    def test_prompt_dict_round_trip(self):
        spec = PromptSpec("box", (1, 2, 30, 40))
        assert PromptSpec.from_dict(spec.to_dict()) == spec


# ---------------------------------------------------------------------------
# hook enumeration
# ---------------------------------------------------------------------------

class TestHooks:
    def test_hook_names_unique(self, small_model):
        acts = small_model.act_hooks()
        weights = small_model.weight_hooks()
        assert len(acts) == len(set(acts))
        assert len(weights) == len(set(weights))
        assert not set(acts) & set(weights)

    def test_every_linear_has_io_and_weight_hooks(self, small_model):
        acts, weights = set(small_model.act_hooks()), set(small_model.weight_hooks())
        for path in small_model.quantizable_linears():
            assert path + "#in" in acts
            assert path + "#out" in acts
            assert path + "#w" in weights

    def test_first_and_last_layers_stay_unquantized(self, small_model):
        linears = small_model.quantizable_linears()
        assert not any(p.startswith(("patch_embed", "mask_head")) for p in linears)

    @pytest.mark.parametrize("granularity", ["per-stage", "per-layer"])
    def test_units_partition_all_hooks(self, small_model, granularity):
        seen_acts: list = []
        seen_weights: list = []
        for uid in small_model.unit_ids(granularity):
            acts, weights = small_model.unit_hooks(uid)
            seen_acts += acts
            seen_weights += weights
        assert sorted(seen_acts) == sorted(small_model.act_hooks())
        assert sorted(seen_weights) == sorted(small_model.weight_hooks())
        assert len(seen_acts) == len(set(seen_acts))  # no double ownership

    def test_unit_order_is_front_to_back(self, small_model):
        ids = small_model.unit_ids("per-stage")
        assert ids[0] == "stage0"
        assert ids[-1] == "dec_final"
        assert "neck" in ids

    def test_unknown_unit_raises(self, small_model):
        with pytest.raises(ValueError):
            small_model.unit_ids("per-token")
        with pytest.raises(ValueError):
            small_model.unit_hooks("stage99x")


# ---------------------------------------------------------------------------
# weight file round trips
# ---------------------------------------------------------------------------

class TestWeightsIO:
    def test_round_trip_is_bit_exact(self, small_model, tmp_path):
        path = str(tmp_path / "m.saqw")
        save_weights(small_model, path)
        loaded = load_weights(path)
        assert loaded.cfg == small_model.cfg
        assert set(loaded.params) == set(small_model.params)
        for name, value in small_model.params.items():
            np.testing.assert_array_equal(value, loaded.params[name])

    def test_loaded_model_predicts_identically(self, small_model, calib_items,
                                               tmp_path):
        images, prompt_sets = calib_items
        path = str(tmp_path / "m.saqw")
        save_weights(small_model, path)
        loaded = load_weights(path)
        a = small_model.predict(images[0], prompt_sets[0])["mask_logits"].data
        b = loaded.predict(images[0], prompt_sets[0])["mask_logits"].data
        np.testing.assert_array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.saqw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_weights(str(path))

    def test_truncated_file_rejected(self, small_model, tmp_path):
        path = tmp_path / "cut.saqw"
        save_weights(small_model, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(ValueError, match="truncated"):
            load_weights(str(path))

    def test_file_without_config_rejected(self, tmp_path):
        path = tmp_path / "nometa.saqw"
        path.write_bytes(_encode_tensors({"w": np.zeros(3)}))
        with pytest.raises(ValueError, match="configuration"):
            load_weights(str(path))
