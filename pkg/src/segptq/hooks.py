"""Quantization hook points and attention tracing.

Hook names are "{module_path}#{kind}". Every quantizable linear layer owns
three hooks: "{path}#in", "{path}#out" (activations) and "{path}#w"
(weight). Attention modules add "{path}#attn_weights" for the post-softmax
matrix, and transformer layers add "#res*_skip" hooks for the skip-branch
input of each residual add.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .quantizer import QuantParams, RoundingVars, fake_quant, fake_quant_weight, qdrop_fake_quant


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def is_qk_hook(name: str) -> bool:
    """True for the activation hooks of Query and Key linear layers."""
    if "#" not in name:
        return False
    path, kind = name.rsplit("#", 1)
    if kind not in ("in", "out"):
        return False
    leaf = path.rsplit(".", 1)[-1]
    return leaf in ("q", "k")


def module_of_hook(name: str) -> str:
    """Attention module path owning a QK hook ("enc.0.attn.q#in" -> "enc.0.attn")."""
    path = name.rsplit("#", 1)[0]
    return path.rsplit(".", 1)[0]


@dataclass
class AttentionTrace:
    """Per-head attention scores and weights captured in one forward pass.

    Arrays are [groups, heads, N_q, N_k]; groups is the window count for
    windowed attention and 1 otherwise.
    """

    module_id: str
    scores: np.ndarray
    weights: np.ndarray


class TraceBuffer:
    """Per-call collection of attention traces (never shared across calls)."""

    def __init__(self):
        self.traces: list[AttentionTrace] = []

    def add(self, trace: AttentionTrace):
        self.traces.append(trace)

    def get(self, module_id: str) -> AttentionTrace:
        for t in self.traces:
            if t.module_id == module_id:
                return t
        raise KeyError(f"no trace recorded for {module_id!r}")

    def __len__(self):
        return len(self.traces)


class QuantEnv:
    """Carrier of quantization state consulted by the model at hook points.

    Roles:
      - observation: with observing=True, raw activations are captured per
        hook (used to feed calibration searches); quantization may be off.
      - inference: frozen act/weight params applied at every configured hook.
      - learning: ``active`` restricts which hooks fire (unit locality),
        soft_weights enables the differentiable rounding path, drop_prob
        applies QDrop to activations.
    """

    def __init__(self):
        self.act_params: dict[str, QuantParams] = {}
        self.weight_params: dict[str, QuantParams] = {}
        self.rounding: dict[str, RoundingVars] = {}
        self.enabled = True
        self.active: set[str] | None = None
        self.drop_prob = 0.0
        self.drop_rng = None
        self.soft_weights = False
        self.observing = False
        self.observed: dict[str, list[np.ndarray]] = {}

    # -- hook entry points (called by the model) --

    def act(self, name: str, x):
        if self.observing:
            self.observed.setdefault(name, []).append(np.array(_data(x)))
        if not self.enabled:
            return x
        qp = self.act_params.get(name)
        if qp is None or not self._active(name):
            return x
        if self.drop_prob > 0.0:
            if self.drop_rng is None:
                raise ValueError("drop_prob set but no drop_rng provided")
            return qdrop_fake_quant(x, qp, self.drop_prob, self.drop_rng)
        return fake_quant(x, qp)

    def weight(self, name: str, w: np.ndarray):
        if not self.enabled:
            return w
        qp = self.weight_params.get(name)
        if qp is None or not self._active(name):
            return w
        rv = self.rounding.get(name)
        if rv is None:
            return fake_quant_weight(w, qp, None)
        return fake_quant_weight(w, qp, rv, hard=not self.soft_weights)

    def _active(self, name: str) -> bool:
        return self.active is None or name in self.active

    # -- bookkeeping --

    def clear_observations(self):
        self.observed = {}

    def configured_hooks(self) -> list[str]:
        return sorted(self.act_params) + sorted(self.weight_params)

    def audit_quant_free(self):
        """Assert no quantization can fire (teacher-purity check)."""
        if self.enabled and (self.act_params or self.weight_params):
            raise AssertionError(
                "QuantEnv holds active quant params on a path required to be "
                "full precision"
            )
