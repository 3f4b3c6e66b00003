"""Miniature promptable segmenter.

Architecture skeleton: patch-embedding ViT encoder alternating windowed and
global self-attention, a linear+LN neck, a sinusoidal/learned prompt
encoder, and a two-way cross-attention mask decoder with one mask token.
The patch embedding and the mask head never see a QuantEnv: the first and
last layers stay full precision by construction.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .config import ModelConfig, StagePlan, stage_partition
from .layers import (
    attention_fwd,
    bilinear_upsample_matrix,
    decoder_block_fwd,
    encoder_layer_fwd,
    layer_norm_fwd,
    linear_fwd,
    mlp_fwd,
)

# prompt token type indices
TYPE_FG_POINT = 0
TYPE_BG_POINT = 1
TYPE_BOX_A = 2
TYPE_BOX_B = 3


@dataclass
class PromptSpec:
    """A point or box prompt in image pixel coordinates."""

    kind: str  # "point" | "box"
    coords: tuple  # point: (x, y); box: (x1, y1, x2, y2)
    label: int = 1  # points only: 1 foreground, 0 background

    def validate(self, image_size: int):
        if self.kind not in ("point", "box"):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        n = 2 if self.kind == "point" else 4
        if len(self.coords) != n:
            raise ValueError(f"{self.kind} prompt needs {n} coordinates")
        for c in self.coords:
            if not 0 <= c <= image_size:
                raise ValueError(f"prompt coordinate {c} outside image bounds")
        if self.kind == "point" and self.label not in (0, 1):
            raise ValueError("point label must be 0 or 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "coords": list(self.coords), "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        return cls(kind=d["kind"], coords=tuple(d["coords"]), label=int(d.get("label", 1)))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # independent named substream per parameter: init does not depend on
    # creation order
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Model:
    """Parameter container plus functional forward passes."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.upsample = bilinear_upsample_matrix(cfg.grid_side, cfg.image_size)

    # ----- structure enumeration -----

    def stage_plan(self) -> StagePlan:
        return stage_partition(self.cfg.layer_kinds())

    def encoder_attention_paths(self) -> list:
        return [f"encoder.{i}.attn" for i in range(self.cfg.encoder_layers)]

    def decoder_attention_paths(self) -> list:
        paths = []
        for i in range(self.cfg.decoder_blocks):
            paths += [f"decoder.block{i}.self_attn", f"decoder.block{i}.t2i",
                      f"decoder.block{i}.i2t"]
        paths.append("decoder.final_t2i")
        return paths

    def attention_paths(self) -> list:
        return self.encoder_attention_paths() + self.decoder_attention_paths()

    def quantizable_linears(self) -> list:
        """Linear module paths subject to quantization (first/last excluded)."""
        paths = []
        for i in range(self.cfg.encoder_layers):
            for leaf in ("attn.q", "attn.k", "attn.v", "attn.proj",
                         "mlp.fc1", "mlp.fc2"):
                paths.append(f"encoder.{i}.{leaf}")
        paths.append("neck.proj")
        for i in range(self.cfg.decoder_blocks):
            for mod in ("self_attn", "t2i", "i2t"):
                for leaf in ("q", "k", "v", "proj"):
                    paths.append(f"decoder.block{i}.{mod}.{leaf}")
            paths.append(f"decoder.block{i}.mlp.fc1")
            paths.append(f"decoder.block{i}.mlp.fc2")
        for leaf in ("q", "k", "v", "proj"):
            paths.append(f"decoder.final_t2i.{leaf}")
        return paths

    def act_hooks(self) -> list:
        """All activation hook names, in deterministic order."""
        hooks = []
        for p in self.quantizable_linears():
            hooks += [p + "#in", p + "#out"]
        for p in self.attention_paths():
            hooks.append(p + "#attn_weights")
        for i in range(self.cfg.encoder_layers):
            hooks += [f"encoder.{i}#res1_skip", f"encoder.{i}#res2_skip"]
        for i in range(self.cfg.decoder_blocks):
            hooks += [f"decoder.block{i}#res{j}_skip" for j in (1, 2, 3, 4)]
        hooks.append("decoder.final#res_skip")
        return hooks

    def weight_hooks(self) -> list:
        return [p + "#w" for p in self.quantizable_linears()]

    def unit_ids(self, granularity: str) -> list:
        """Reconstruction units front to back.

        per-stage: encoder stages are joint units; per-layer: every encoder
        layer is its own unit. The neck and each decoder block are always
        separate units; the final cross-attention block is its own unit.
        """
        if granularity == "per-stage":
            enc = [f"stage{k}" for k in range(self.stage_plan().num_stages)]
        elif granularity == "per-layer":
            enc = [f"enc_layer{i}" for i in range(self.cfg.encoder_layers)]
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
        dec = [f"dec_block{i}" for i in range(self.cfg.decoder_blocks)]
        return enc + ["neck"] + dec + ["dec_final"]

    def unit_hooks(self, unit_id: str) -> tuple:
        """(activation hook names, weight hook names) owned by one unit."""
        if unit_id.startswith("stage"):
            layers = self.stage_plan().layers_of_stage(int(unit_id[5:]))
            prefixes = [f"encoder.{i}" for i in layers]
        elif unit_id.startswith("enc_layer"):
            prefixes = [f"encoder.{int(unit_id[9:])}"]
        elif unit_id == "neck":
            prefixes = ["neck"]
        elif unit_id.startswith("dec_block"):
            prefixes = [f"decoder.block{int(unit_id[9:])}"]
        elif unit_id == "dec_final":
            prefixes = ["decoder.final"]
        else:
            raise ValueError(f"unknown unit {unit_id!r}")

        def owned(name):
            path = name.rsplit("#", 1)[0]
            return any(path == p or path.startswith(p + ".") or path.startswith(p + "_")
                       for p in prefixes)

        acts = [h for h in self.act_hooks() if owned(h)]
        weights = [h for h in self.weight_hooks() if owned(h)]
        return acts, weights

    # ----- forward passes -----

    def patch_embed(self, image: np.ndarray) -> ad.Tensor:
        """[C, H, W] image -> [N, D] tokens with learned position added.

        Always full precision (first layer is never quantized).
        """
        cfg = self.cfg
        c, h, w = image.shape
        if (h, w) != (cfg.image_size, cfg.image_size):
            raise ValueError(f"image must be {cfg.image_size}x{cfg.image_size}")
        p, g = cfg.patch_size, cfg.grid_side
        patches = (
            image.reshape(c, g, p, g, p)
            .transpose(1, 3, 0, 2, 4)
            .reshape(g * g, c * p * p)
        )
        tokens = linear_fwd(self.params, "patch_embed", ad.Tensor(patches), env=None)
        return tokens + self.params["pos_embed"]

    def encode_image(self, image: np.ndarray, env=None, trace=None):
        """Returns (stage_outputs, final_embedding).

        One token tensor is captured at the end of every stage; the final
        embedding is the last stage output passed through the neck.
        """
        x = self.patch_embed(image)
        kinds = self.cfg.layer_kinds()
        plan = self.stage_plan()
        stage_ends = {end for _, end in plan.stages}
        stage_outputs = []
        for i, kind in enumerate(kinds):
            x = encoder_layer_fwd(self.params, f"encoder.{i}", x, kind,
                                  self.cfg, env, trace)
            if i in stage_ends:
                stage_outputs.append(x)
        return stage_outputs, self.apply_neck(stage_outputs[-1], env)

    def encode_layer_range(self, x, layers, env=None, trace=None):
        """Run a contiguous span of encoder layers on existing tokens."""
        kinds = self.cfg.layer_kinds()
        for i in layers:
            x = encoder_layer_fwd(self.params, f"encoder.{i}", x, kinds[i],
                                  self.cfg, env, trace)
        return x

    def encode_image_layers(self, image, env=None, trace=None) -> list:
        """Like encode_image but returns every layer's token output."""
        x = self.patch_embed(image)
        outs = []
        for i, kind in enumerate(self.cfg.layer_kinds()):
            x = encoder_layer_fwd(self.params, f"encoder.{i}", x, kind,
                                  self.cfg, env, trace)
            outs.append(x)
        return outs

    def apply_neck(self, tokens, env=None):
        h = linear_fwd(self.params, "neck.proj", tokens, env)
        return layer_norm_fwd(self.params, "neck.ln", h)

    def forward_from_stage(self, stage_tokens, k: int, env=None):
        """Layer-skip path: stage-k tokens straight through the neck."""
        if not 0 <= k < self.stage_plan().num_stages:
            raise ValueError(f"stage index {k} out of range")
        return self.apply_neck(stage_tokens, env)

    def encode_prompts(self, prompts) -> ad.Tensor:
        """Prompt tokens: sinusoidal position encoding + learned type embed."""
        cfg = self.cfg
        rows = []
        type_embed = self.params["prompt.type_embed"]
        for p in prompts:
            p.validate(cfg.image_size)
            if p.kind == "point":
                t = TYPE_FG_POINT if p.label == 1 else TYPE_BG_POINT
                rows.append(self._pos_encode(p.coords[0], p.coords[1]) + type_embed[t])
            else:
                x1, y1, x2, y2 = p.coords
                rows.append(self._pos_encode(x1, y1) + type_embed[TYPE_BOX_A])
                rows.append(self._pos_encode(x2, y2) + type_embed[TYPE_BOX_B])
        if not rows:
            raise ValueError("need at least one prompt")
        return ad.Tensor(np.stack(rows))

    def _pos_encode(self, x: float, y: float) -> np.ndarray:
        c = self.cfg.neck_dim
        bands = c // 4
        freqs = 2.0 * np.pi * np.geomspace(1.0, 16.0, bands)
        xn, yn = x / self.cfg.image_size, y / self.cfg.image_size
        return np.concatenate([
            np.sin(freqs * xn), np.cos(freqs * xn),
            np.sin(freqs * yn), np.cos(freqs * yn),
        ])

    def decode_final(self, tokens, image, env=None, trace=None):
        """Closing token-to-image cross-attention over the hybrid tokens."""
        a = attention_fwd(self.params, "decoder.final_t2i", tokens, image,
                          self.cfg.decoder_heads, env, trace)
        skip = env.act("decoder.final#res_skip", tokens) if env is not None else tokens
        return layer_norm_fwd(self.params, "decoder.final_ln", skip + a)

    def decode_masks_steps(self, image_embedding, prompt_tokens, env=None,
                           trace=None) -> dict:
        """Two-way decoding with every block boundary exposed.

        Returns block_io (per block, the (tokens, image) outputs), the
        hybrid image tokens after all blocks, and the final token stream.
        The mask head is not run here; decode_masks adds it.
        """
        cfg = self.cfg
        if image_embedding.shape[-1] != cfg.neck_dim:
            raise ValueError("image embedding width does not match neck_dim")
        if prompt_tokens.shape[-1] != cfg.neck_dim:
            raise ValueError("prompt token width does not match neck_dim")
        m = image_embedding + self.params["dec_pos_embed"]
        m = ad.reshape(m, (1,) + m.shape)
        t = ad.concat([ad.Tensor(self.params["mask_token"]),
                       prompt_tokens], axis=0)
        t = ad.reshape(t, (1,) + t.shape)
        block_io = []
        for i in range(cfg.decoder_blocks):
            t, m = decoder_block_fwd(self.params, f"decoder.block{i}", t, m,
                                     cfg, env, trace)
            block_io.append((t, m))
        hybrid = ad.reshape(m, m.shape[1:])
        t = self.decode_final(t, m, env, trace)
        return {"block_io": block_io, "hybrid": hybrid, "final_tokens": t}

    def decode_masks(self, image_embedding, prompt_tokens, env=None, trace=None):
        """Two-way decoding; returns (mask_logits [H, W], hybrid image tokens).

        Hybrid image tokens are the image-side stream after all two-way
        blocks (the post-interaction reconstruction target). The mask head
        is always full precision (last layer is never quantized).
        """
        cfg = self.cfg
        steps = self.decode_masks_steps(image_embedding, prompt_tokens, env,
                                        trace)
        t, hybrid = steps["final_tokens"], steps["hybrid"]
        mask_vec = mlp_fwd(self.params, "mask_head.mlp", t[0, 0:1], None, "relu")
        feats = linear_fwd(self.params, "mask_head.feat", hybrid, None)
        token_logits = ad.matmul(feats, ad.swapaxes(mask_vec, 0, 1))
        pixel_logits = ad.matmul(ad.Tensor(self.upsample), token_logits)
        mask_logits = ad.reshape(pixel_logits, (cfg.image_size, cfg.image_size))
        return mask_logits, hybrid

    def predict(self, image, prompts, env=None, trace=None) -> dict:
        """Full pipeline on one image; returns all intermediate products."""
        stage_outputs, emb = self.encode_image(image, env, trace)
        t_p = self.encode_prompts(prompts)
        mask_logits, hybrid = self.decode_masks(emb, t_p, env, trace)
        return {
            "stage_outputs": stage_outputs,
            "embedding": emb,
            "prompt_tokens": t_p,
            "mask_logits": mask_logits,
            "hybrid_tokens": hybrid,
        }


def _init_params(cfg: ModelConfig) -> dict:
    d, nd = cfg.embed_dim, cfg.neck_dim
    params = {}

    def lin(path, fan_out, fan_in, gain=1.0):
        rng = _param_rng(cfg.seed, path)
        params[path + ".w"] = rng.normal(0.0, gain / np.sqrt(fan_in),
                                         size=(fan_out, fan_in))
        params[path + ".b"] = np.zeros(fan_out)

    def norm(path, width):
        params[path + ".gamma"] = np.ones(width)
        params[path + ".beta"] = np.zeros(width)

    def embed(name, shape, std=0.5):
        params[name] = _param_rng(cfg.seed, name).normal(0.0, std, size=shape)

    lin("patch_embed", d, cfg.patch_size * cfg.patch_size)
    embed("pos_embed", (cfg.num_tokens, d))
    for i in range(cfg.encoder_layers):
        base = f"encoder.{i}"
        norm(base + ".ln1", d)
        for leaf, gain in (("q", cfg.qk_init_gain), ("k", cfg.qk_init_gain),
                           ("v", 1.0), ("proj", 1.0)):
            lin(f"{base}.attn.{leaf}", d, d, gain)
        norm(base + ".ln2", d)
        lin(base + ".mlp.fc1", cfg.mlp_hidden, d)
        lin(base + ".mlp.fc2", d, cfg.mlp_hidden)
    lin("neck.proj", nd, d)
    norm("neck.ln", nd)

    embed("dec_pos_embed", (cfg.num_tokens, nd))
    embed("mask_token", (1, nd))
    embed("prompt.type_embed", (4, nd))
    for i in range(cfg.decoder_blocks):
        base = f"decoder.block{i}"
        for mod in ("self_attn", "t2i", "i2t"):
            for leaf, gain in (("q", cfg.qk_init_gain), ("k", cfg.qk_init_gain),
                               ("v", 1.0), ("proj", 1.0)):
                lin(f"{base}.{mod}.{leaf}", nd, nd, gain)
        for j in (1, 2, 3, 4):
            norm(f"{base}.ln{j}", nd)
        lin(base + ".mlp.fc1", 2 * nd, nd)
        lin(base + ".mlp.fc2", nd, 2 * nd)
    for leaf, gain in (("q", cfg.qk_init_gain), ("k", cfg.qk_init_gain),
                       ("v", 1.0), ("proj", 1.0)):
        lin(f"decoder.final_t2i.{leaf}", nd, nd, gain)
    norm("decoder.final_ln", nd)

    lin("mask_head.feat", cfg.mask_head_dim, nd)
    lin("mask_head.mlp.fc1", nd, nd)
    lin("mask_head.mlp.fc2", cfg.mask_head_dim, nd)
    return params


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic seeded initialization: scaled normals, zero biases."""
    return Model(cfg, _init_params(cfg))
