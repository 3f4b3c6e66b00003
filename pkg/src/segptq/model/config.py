"""Model configuration and encoder stage partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    """Shape and layout of the miniature promptable segmenter.

    window_size counts tokens per attention window; it must be a perfect
    square (windows are square tiles of the token grid).
    """

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 6
    global_layer_indices: tuple = (2, 5)
    window_size: int = 4
    mlp_ratio: int = 4
    neck_dim: int = 32
    decoder_blocks: int = 2
    decoder_heads: int = 4
    mask_head_dim: int = 8
    # init std multiplier for Q/K projections; controls how peaked the
    # untrained attention is (1.0 gives structured but non-degenerate focus)
    qk_init_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.neck_dim % self.decoder_heads != 0:
            raise ValueError("neck_dim must be divisible by decoder_heads")
        side = math.isqrt(self.window_size)
        if side * side != self.window_size:
            raise ValueError("window_size must be a perfect square token count")
        if self.grid_side % side != 0:
            raise ValueError("token grid side must be divisible by window side")
        idx = tuple(sorted(set(self.global_layer_indices)))
        if not idx:
            raise ValueError("need at least one global attention layer")
        if any(i < 0 or i >= self.encoder_layers for i in idx):
            raise ValueError("global layer index out of range")
        if (self.encoder_layers - 1) not in idx:
            raise ValueError("last encoder layer must use global attention")
        object.__setattr__(self, "global_layer_indices", idx)

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def window_side(self) -> int:
        return math.isqrt(self.window_size)

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def layer_kinds(self) -> list:
        g = set(self.global_layer_indices)
        return ["global" if i in g else "window" for i in range(self.encoder_layers)]

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "encoder_layers": self.encoder_layers,
            "global_layer_indices": list(self.global_layer_indices),
            "window_size": self.window_size,
            "mlp_ratio": self.mlp_ratio,
            "neck_dim": self.neck_dim,
            "decoder_blocks": self.decoder_blocks,
            "decoder_heads": self.decoder_heads,
            "mask_head_dim": self.mask_head_dim,
            "qk_init_gain": self.qk_init_gain,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "global_layer_indices" in d:
            d["global_layer_indices"] = tuple(int(i) for i in d["global_layer_indices"])
        return cls(**d)


@dataclass
class StagePlan:
    """Disjoint ordered cover of encoder layers; every stage ends global."""

    stages: list  # list of (start, end) inclusive layer ranges

    def __post_init__(self):
        expect = 0
        for start, end in self.stages:
            if start != expect or end < start:
                raise ValueError(f"stages must tile the layers, got {self.stages}")
            expect = end + 1

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_of_layer(self, layer: int) -> int:
        for k, (start, end) in enumerate(self.stages):
            if start <= layer <= end:
                return k
        raise ValueError(f"layer {layer} not covered by plan")

    def layers_of_stage(self, k: int) -> list:
        start, end = self.stages[k]
        return list(range(start, end + 1))


def stage_partition(layer_kinds) -> StagePlan:
    """Greedy split after every global-attention layer.

    Each stage is a maximal run of window layers terminated by the next
    global layer.
    """
    kinds = list(layer_kinds)
    if not kinds:
        raise ValueError("empty layer list")
    if kinds[-1] != "global":
        raise ValueError("last layer must be global; partition would not close")
    for k in kinds:
        if k not in ("window", "global"):
            raise ValueError(f"unknown layer kind {k!r}")
    stages = []
    start = 0
    for i, kind in enumerate(kinds):
        if kind == "global":
            stages.append((start, i))
            start = i + 1
    return StagePlan(stages)
