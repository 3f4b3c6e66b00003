"""Gradient learning of quantization parameters against the FP teacher.

Two objectives share one optimizer loop. The prompt-interaction objective
("par") pushes a unit's tokens through the neck and the full-precision
decoder and matches the post-interaction hybrid image tokens of the FP
model; the local objective matches the unit's own output. Encoder units
follow the configured objective; the neck and decoder units always
reconstruct locally.

Units run front to back; each takes its input from the already-learned
quantized prefix. Activation clipping bounds and adaptive-rounding
variables are learned jointly (Adam, separate learning rates), with QDrop
on the unit's activations and best-seen parameter retention evaluated in
deployment mode (hard rounding, no drop).
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hooks import QuantEnv
from .model.layers import decoder_block_fwd
from .model.segmenter import Model
from .optim import Adam
from .quantizer import RoundingVars, anneal_beta, rounding_regularizer


@dataclass
class ReconConfig:
    granularity: str = "per-stage"  # encoder units: per-stage | per-layer
    objective: str = "par"  # encoder units: par | local
    iterations: int = 2000
    final_block_iterations: int = 10000  # the closing cross-attention block
    iter_scale: float = 0.1  # desk-scale multiplier; 1.0 = full budget
    lr_bounds: float = 4e-5
    lr_alpha: float = 1e-3
    drop_prob: float = 0.5
    rounding_lambda: float = 0.01
    reg_warmup: float = 0.2  # fraction of iterations before the regularizer
    eval_every: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0 or self.final_block_iterations <= 0:
            raise ValueError("iteration counts must be positive")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        if self.objective not in ("par", "local"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.granularity not in ("per-stage", "per-layer"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    def unit_iterations(self, unit_id: str) -> int:
        base = (self.final_block_iterations if unit_id == "dec_final"
                else self.iterations)
        return max(1, int(round(base * self.iter_scale)))


@dataclass
class ReconTarget:
    """FP hybrid image tokens for one (calibration item, boundary layer)."""

    boundary: int  # encoder layer index whose output was skipped to the neck
    item: int
    hybrid: np.ndarray
    prompt_tokens: np.ndarray


def _l2(a, b) -> ad.Tensor:
    """Squared L2 over all entries (batch of one: mean over batch is itself)."""
    d = a - b
    return ad.sum_(d * d)


def par_loss(q_hybrid, target: ReconTarget) -> ad.Tensor:
    """Squared L2 between student and FP hybrid image tokens."""
    if q_hybrid.shape != target.hybrid.shape:
        raise ValueError("hybrid token shapes disagree")
    return _l2(q_hybrid, ad.Tensor(target.hybrid))


def local_recon_loss(q_out, fp_out) -> ad.Tensor:
    """Squared L2 on a unit's own output (baseline objective)."""
    return _l2(q_out, fp_out if isinstance(fp_out, ad.Tensor) else ad.Tensor(fp_out))


def collect_interaction_targets(fp_model: Model, items, boundaries) -> list:
    """FP hybrid tokens per (item, boundary) via the layer-skip path.

    items are (image, prompts) pairs. The teacher path never sees a
    QuantEnv. boundaries are encoder layer indices (stage ends, or every
    layer for per-layer learning).
    """
    targets = []
    with ad.no_grad():
        for idx, (image, prompts) in enumerate(items):
            layer_outs = fp_model.encode_image_layers(image, env=None)
            t_p = fp_model.encode_prompts(prompts)
            for b in boundaries:
                emb = fp_model.apply_neck(layer_outs[b], env=None)
                steps = fp_model.decode_masks_steps(emb, t_p, env=None)
                targets.append(ReconTarget(
                    boundary=b, item=idx,
                    hybrid=steps["hybrid"].data.copy(),
                    prompt_tokens=t_p.data.copy()))
    return targets


@dataclass
class _FpRefs:
    """Full-precision intermediates used as local targets (one per item)."""

    layer_tokens: list  # per layer [N, D]
    neck_out: np.ndarray
    block_io: list  # per decoder block (tokens, image)
    final_tokens: np.ndarray
    prompt_tokens: np.ndarray


def _collect_fp_refs(fp_model: Model, items) -> list:
    refs = []
    with ad.no_grad():
        for image, prompts in items:
            louts = fp_model.encode_image_layers(image, env=None)
            t_p = fp_model.encode_prompts(prompts)
            emb = fp_model.apply_neck(louts[-1], env=None)
            steps = fp_model.decode_masks_steps(emb, t_p, env=None)
            refs.append(_FpRefs(
                layer_tokens=[x.data.copy() for x in louts],
                neck_out=emb.data.copy(),
                block_io=[(t.data.copy(), m.data.copy())
                          for t, m in steps["block_io"]],
                final_tokens=steps["final_tokens"].data.copy(),
                prompt_tokens=t_p.data.copy()))
    return refs


def _unit_layers(model: Model, unit_id: str) -> list:
    if unit_id.startswith("stage"):
        return model.stage_plan().layers_of_stage(int(unit_id[5:]))
    if unit_id.startswith("enc_layer"):
        return [int(unit_id[9:])]
    return []


def _unit_inputs(model: Model, unit_id: str, items, env: QuantEnv,
                 prefix_hooks: set, refs) -> list:
    """Student inputs to a unit from the already-quantized prefix."""
    env.active = prefix_hooks
    env.drop_prob = 0.0
    env.soft_weights = False
    inputs = []
    with ad.no_grad():
        for image, prompts in items:
            if unit_id.startswith(("stage", "enc_layer")):
                first = _unit_layers(model, unit_id)[0]
                x = model.patch_embed(image)
                x = model.encode_layer_range(x, range(0, first), env)
                inputs.append(x.data.copy())
            elif unit_id == "neck":
                louts = model.encode_image_layers(image, env)
                inputs.append(louts[-1].data.copy())
            else:
                louts = model.encode_image_layers(image, env)
                emb = model.apply_neck(louts[-1], env)
                t_p = model.encode_prompts(prompts)
                block = (int(unit_id[9:]) if unit_id.startswith("dec_block")
                         else model.cfg.decoder_blocks)
                if block == 0:
                    m = emb.data + model.params["dec_pos_embed"]
                    t = np.concatenate([model.params["mask_token"], t_p.data])
                    inputs.append((t[None], m[None]))
                else:
                    steps = model.decode_masks_steps(emb, t_p, env)
                    t, m = steps["block_io"][block - 1]
                    inputs.append((t.data.copy(), m.data.copy()))
    env.active = None
    return inputs


def _student_forward(model: Model, unit_id: str, x_in, prompt_tokens,
                     env: QuantEnv, objective: str):
    """One student pass; returns (loss-ready output, kind tag)."""
    if unit_id.startswith(("stage", "enc_layer")):
        layers = _unit_layers(model, unit_id)
        out = model.encode_layer_range(ad.Tensor(x_in), layers, env)
        if objective == "par":
            emb = model.apply_neck(out, env)
            steps = model.decode_masks_steps(emb, ad.Tensor(prompt_tokens), env)
            return steps["hybrid"], "par"
        return out, "tokens"
    if unit_id == "neck":
        return model.apply_neck(ad.Tensor(x_in), env), "tokens"
    t, m = x_in
    t, m = ad.Tensor(t), ad.Tensor(m)
    if unit_id.startswith("dec_block"):
        block = int(unit_id[9:])
        t_out, m_out = decoder_block_fwd(model.params,
                                         f"decoder.block{block}", t, m,
                                         model.cfg, env)
        return (t_out, m_out), "pair"
    return model.decode_final(t, m, env), "tokens"


def optimize_unit(model: Model, unit_id: str, items, env: QuantEnv,
                  cfg: ReconConfig, objective: str, prefix_hooks: set,
                  refs, targets_by_key: dict) -> dict:
    """Learn the quant parameters of one unit; returns its loss record.

    objective applies to encoder units; neck and decoder units always use
    the local objective. Best-seen parameters win (evaluated with hard
    rounding and no drop), so the reported final loss never exceeds the
    initial loss.
    """
    act_hooks, weight_hooks = model.unit_hooks(unit_id)
    act_hooks = [h for h in act_hooks if h in env.act_params]
    weight_hooks = [h for h in weight_hooks if h in env.weight_params]
    if not act_hooks and not weight_hooks:
        raise ValueError(f"unit {unit_id!r} has no learnable parameters")
    unit_objective = objective if unit_id.startswith(("stage", "enc_layer")) \
        else "local"

    bound_params = []
    for h in act_hooks:
        lp = env.act_params[h].make_learnable()
        env.act_params[h] = lp
        bound_params += lp.bound_tensors()
    alphas = []
    rvs = []
    for h in weight_hooks:
        w = model.params[h[:-2] + ".w"]
        rv = RoundingVars.init_from(w, env.weight_params[h])
        env.rounding[h] = rv
        rvs.append(rv)
        alphas.append(rv.alpha)

    opt_bounds = Adam(bound_params, lr=cfg.lr_bounds)
    opt_alpha = Adam(alphas, lr=cfg.lr_alpha) if alphas else None
    unit_hook_set = set(act_hooks) | set(weight_hooks)
    drop_rng = np.random.default_rng(
        [cfg.seed, zlib.crc32(unit_id.encode()), 0xD209])
    iters = cfg.unit_iterations(unit_id)
    inputs = _unit_inputs(model, unit_id, items, env, prefix_hooks, refs)

    def local_ref(ref: _FpRefs):
        if unit_id.startswith(("stage", "enc_layer")):
            return ref.layer_tokens[_unit_layers(model, unit_id)[-1]]
        if unit_id == "neck":
            return ref.neck_out
        if unit_id.startswith("dec_block"):
            return ref.block_io[int(unit_id[9:])]
        return ref.final_tokens

    def loss_for(i_item, learning: bool):
        out, kind = _student_forward(model, unit_id, inputs[i_item],
                                     refs[i_item].prompt_tokens, env,
                                     unit_objective)
        if kind == "par":
            key = (unit_id, i_item)
            return par_loss(out, targets_by_key[key])
        if kind == "pair":
            ft, fm = local_ref(refs[i_item])
            return local_recon_loss(out[0], ft) + local_recon_loss(out[1], fm)
        return local_recon_loss(out, local_ref(refs[i_item]))

    def deployed_loss() -> float:
        env.active = prefix_hooks | unit_hook_set
        env.drop_prob = 0.0
        env.soft_weights = False
        total = 0.0
        with ad.no_grad():
            for i in range(len(items)):
                total += loss_for(i, learning=False).item()
        return total / len(items)

    def snapshot():
        return ([p.data.copy() for p in bound_params],
                [a.data.copy() for a in alphas])

    def restore(snap):
        for p, d in zip(bound_params, snap[0]):
            p.data[...] = d
        for a, d in zip(alphas, snap[1]):
            a.data[...] = d

    initial = deployed_loss()
    best, best_snap = initial, snapshot()
    warmup = int(cfg.reg_warmup * iters)

    for step in range(iters):
        env.active = prefix_hooks | unit_hook_set
        env.drop_prob = cfg.drop_prob
        env.drop_rng = drop_rng
        env.soft_weights = True
        ad.clear_tape()
        loss = loss_for(step % len(items), learning=True)
        if rvs and step >= warmup:
            beta = anneal_beta(step - warmup, iters - warmup)
            reg = rounding_regularizer(rvs[0], beta)
            for rv in rvs[1:]:
                reg = reg + rounding_regularizer(rv, beta)
            loss = loss + reg * cfg.rounding_lambda
        ad.backward(loss)
        opt_bounds.step()
        if opt_alpha is not None:
            opt_alpha.step()
        opt_bounds.zero_grad()
        if opt_alpha is not None:
            opt_alpha.zero_grad()
        ad.clear_tape()
        if (step + 1) % cfg.eval_every == 0 or step == iters - 1:
            cur = deployed_loss()
            if cur < best:
                best, best_snap = cur, snapshot()

    restore(best_snap)
    for h in act_hooks:
        env.act_params[h] = env.act_params[h].freeze()
    env.active = None
    env.drop_prob = 0.0
    env.soft_weights = False
    polarization = (float(np.mean([rv.polarization() for rv in rvs]))
                    if rvs else 1.0)
    return {"unit": unit_id, "objective": unit_objective,
            "iterations": iters, "initial_loss": float(initial),
            "final_loss": float(best), "polarization": polarization}


def run_reconstruction(model: Model, items, env: QuantEnv,
                       cfg: ReconConfig) -> list:
    """Sequential front-to-back pass over all units; returns unit records.

    env arrives with calibrated (frozen) params as initialization and
    leaves in deployment mode with learned bounds and hard adaptive
    rounding.
    """
    refs = _collect_fp_refs(model, items)
    targets_by_key = {}
    if cfg.objective == "par":
        if cfg.granularity == "per-stage":
            plan = model.stage_plan()
            bounds_of = {f"stage{k}": e for k, (s, e) in enumerate(plan.stages)}
        else:
            bounds_of = {f"enc_layer{i}": i
                         for i in range(model.cfg.encoder_layers)}
        boundaries = sorted(set(bounds_of.values()))
        targets = collect_interaction_targets(model, items, boundaries)
        by_bi = {(t.boundary, t.item): t for t in targets}
        for uid, b in bounds_of.items():
            for i in range(len(items)):
                targets_by_key[(uid, i)] = by_bi[(b, i)]

    records = []
    prefix_hooks: set = set()
    for unit_id in model.unit_ids(cfg.granularity):
        rec = optimize_unit(model, unit_id, items, env, cfg, cfg.objective,
                            prefix_hooks, refs, targets_by_key)
        records.append(rec)
        a, w = model.unit_hooks(unit_id)
        prefix_hooks |= set(a) | set(w)
    return records


@dataclass
class QuantizedModel:
    """A model plus its frozen quantization environment."""

    model: Model
    env: QuantEnv

    def predict(self, image, prompts, trace=None) -> dict:
        return self.model.predict(image, prompts, env=self.env, trace=trace)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; two empty masks count as identical."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def evaluate_agreement(fp_model: Model, q_model: QuantizedModel,
                       eval_items) -> dict:
    """Mask agreement and per-stage hybrid-token error versus the FP model.

    Both models decode from every stage boundary (the layer-skip path), so
    the per-stage hybrid MSE localizes where quantization error enters.
    """
    plan = fp_model.stage_plan()
    ious = []
    stage_sq = np.zeros(plan.num_stages)
    stage_n = 0
    t0 = time.time()
    with ad.no_grad():
        for image, prompts in eval_items:
            fp_out = fp_model.predict(image, prompts)
            q_out = q_model.predict(image, prompts)
            ious.append(mask_iou(fp_out["mask_logits"].data > 0,
                                 q_out["mask_logits"].data > 0))
            t_p_fp = fp_out["prompt_tokens"]
            t_p_q = q_out["prompt_tokens"]
            for k in range(plan.num_stages):
                fp_emb = fp_model.forward_from_stage(fp_out["stage_outputs"][k], k)
                fp_h = fp_model.decode_masks_steps(fp_emb, t_p_fp)["hybrid"]
                q_emb = q_model.model.forward_from_stage(
                    q_out["stage_outputs"][k], k, env=q_model.env)
                q_h = q_model.model.decode_masks_steps(
                    q_emb, t_p_q, env=q_model.env)["hybrid"]
                d = q_h.data - fp_h.data
                stage_sq[k] += float(np.mean(d * d))
            stage_n += 1
    return {
        "mask_iou": float(np.mean(ious)),
        "per_item_iou": [float(v) for v in ious],
        "hybrid_mse_per_stage": [float(v / stage_n) for v in stage_sq],
        "eval_seconds": time.time() - t0,
    }
