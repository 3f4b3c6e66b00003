"""Functional transformer building blocks operating on a flat param dict.

All forwards accept an optional QuantEnv (hook application) and TraceBuffer
(attention capture) and return autodiff Tensors, so one code path serves
full-precision inference, calibration observation and gradient-based
quant-parameter learning.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..hooks import AttentionTrace


def _act(env, name, x):
    return env.act(name, x) if env is not None else x


def linear_fwd(params, path, x, env):
    """y = x @ W^T + b with in/out/weight hooks. W stored [out, in]."""
    w = params[path + ".w"]
    b = params[path + ".b"]
    x = _act(env, path + "#in", x)
    w_eff = env.weight(path + "#w", w) if env is not None else w
    if isinstance(w_eff, ad.Tensor):
        wt = ad.swapaxes(w_eff, 0, 1)
    else:
        wt = np.ascontiguousarray(w_eff.T)
    y = ad.matmul(x if isinstance(x, ad.Tensor) else ad.Tensor(x), wt) + b
    return _act(env, path + "#out", y)


def layer_norm_fwd(params, path, x):
    return ad.layer_norm(x, ad.Tensor(params[path + ".gamma"]),
                         ad.Tensor(params[path + ".beta"]))


def split_heads(x, num_heads):
    """[G, N, C] -> [G, H, N, C/H]."""
    g, n, c = x.shape
    x = ad.reshape(x, (g, n, num_heads, c // num_heads))
    return ad.swapaxes(x, 1, 2)


def merge_heads(x):
    """[G, H, N, d] -> [G, N, H*d]."""
    g, h, n, d = x.shape
    x = ad.swapaxes(x, 1, 2)
    return ad.reshape(x, (g, n, h * d))


def attention_fwd(params, path, xq, xkv, num_heads, env=None, trace=None):
    """Multi-head attention with per-hook fake-quant and score/weight tracing.

    xq: [G, Nq, C] query-side input, xkv: [G, Nk, C] key/value-side input.
    Hook points: q/k/v/proj linear in/out/weight plus the post-softmax
    attention weights.
    """
    q = linear_fwd(params, path + ".q", xq, env)
    k = linear_fwd(params, path + ".k", xkv, env)
    v = linear_fwd(params, path + ".v", xkv, env)
    c = q.shape[-1]
    dh = c // num_heads
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = ad.softmax_lastdim(scores)
    if trace is not None:
        trace.add(AttentionTrace(path, scores.data.copy(), weights.data.copy()))
    weights_q = _act(env, path + "#attn_weights", weights)
    ctx = ad.matmul(weights_q, vh)
    out = merge_heads(ctx)
    return linear_fwd(params, path + ".proj", out, env)


def window_partition(x, grid_side, window_side):
    """[N, D] raster tokens -> [num_windows, window_size, D] square tiles."""
    n, d = x.shape
    nw = grid_side // window_side
    x = ad.reshape(x, (nw, window_side, nw, window_side, d))
    x = ad.swapaxes(x, 1, 2)
    return ad.reshape(x, (nw * nw, window_side * window_side, d))


def window_unpartition(x, grid_side, window_side):
    """Inverse of window_partition; exact permutation inverse."""
    _, _, d = x.shape
    nw = grid_side // window_side
    x = ad.reshape(x, (nw, nw, window_side, window_side, d))
    x = ad.swapaxes(x, 1, 2)
    return ad.reshape(x, (grid_side * grid_side, d))


def mlp_fwd(params, path, x, env, activation):
    h = linear_fwd(params, path + ".fc1", x, env)
    h = ad.gelu(h) if activation == "gelu" else ad.relu(h)
    return linear_fwd(params, path + ".fc2", h, env)


def encoder_layer_fwd(params, path, x, kind, cfg, env=None, trace=None):
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x)).

    kind selects windowed or global self-attention over the token grid.
    """
    h = layer_norm_fwd(params, path + ".ln1", x)
    if kind == "window":
        w = window_partition(h, cfg.grid_side, cfg.window_side)
        a = attention_fwd(params, path + ".attn", w, w, cfg.num_heads, env, trace)
        a = window_unpartition(a, cfg.grid_side, cfg.window_side)
    else:
        g = ad.reshape(h, (1,) + h.shape)
        a = attention_fwd(params, path + ".attn", g, g, cfg.num_heads, env, trace)
        a = ad.reshape(a, a.shape[1:])
    x = _act(env, path + "#res1_skip", x) + a
    h = layer_norm_fwd(params, path + ".ln2", x)
    m = mlp_fwd(params, path + ".mlp", h, env, "gelu")
    return _act(env, path + "#res2_skip", x) + m


def decoder_block_fwd(params, path, tokens, image, cfg, env=None, trace=None):
    """Post-norm two-way block; returns (tokens, image) with image updated
    by the closing image-to-token cross-attention."""
    h = cfg.decoder_heads
    a = attention_fwd(params, path + ".self_attn", tokens, tokens, h, env, trace)
    tokens = layer_norm_fwd(
        params, path + ".ln1", _act(env, path + "#res1_skip", tokens) + a)
    a = attention_fwd(params, path + ".t2i", tokens, image, h, env, trace)
    tokens = layer_norm_fwd(
        params, path + ".ln2", _act(env, path + "#res2_skip", tokens) + a)
    m = mlp_fwd(params, path + ".mlp", tokens, env, "relu")
    tokens = layer_norm_fwd(
        params, path + ".ln3", _act(env, path + "#res3_skip", tokens) + m)
    a = attention_fwd(params, path + ".i2t", image, tokens, h, env, trace)
    image = layer_norm_fwd(
        params, path + ".ln4", _act(env, path + "#res4_skip", image) + a)
    return tokens, image


def bilinear_upsample_matrix(grid_side: int, image_size: int) -> np.ndarray:
    """Constant [image_size^2, grid_side^2] bilinear interpolation operator.

    Pixel centers map to grid coordinates with half-pixel alignment; edge
    samples clamp. Applied as a plain matmul so upsampling stays inside the
    tensor algebra.
    """
    scale = grid_side / image_size
    coords = (np.arange(image_size) + 0.5) * scale - 0.5
    lo = np.floor(coords).astype(int)
    frac = coords - lo
    lo0 = np.clip(lo, 0, grid_side - 1)
    lo1 = np.clip(lo + 1, 0, grid_side - 1)
    u = np.zeros((image_size * image_size, grid_side * grid_side))
    for r in range(image_size):
        for c in range(image_size):
            row = r * image_size + c
            for gr, wr in ((lo0[r], 1.0 - frac[r]), (lo1[r], frac[r])):
                for gc, wc in ((lo0[c], 1.0 - frac[c]), (lo1[c], frac[c])):
                    u[row, gr * grid_side + gc] += wr * wc
    return u
