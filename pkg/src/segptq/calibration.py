"""Clipping-boundary calibration.

Two searches share one candidate machinery: a value-distance search (MSE
over all calibration samples) for general tensors, and a focus-overlap
search for the query/key activations of attention modules. The focus
search scores a candidate by how well the quantized module preserves the
binarized high-attention set of the full-precision module, evaluated on the
first calibration sample only; MSE uses every sample.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from .hooks import QuantEnv, TraceBuffer, is_qk_hook, module_of_hook
from .quantizer import (
    QuantParams,
    channel_params_from_bounds,
    params_from_bounds,
    per_channel_bounds,
)

# cap on scratch memory for batched candidate evaluation
_CHUNK_BYTES = 32 * 1024 * 1024
# value-metric searches score at most this many elements per tensor
_MSE_SEARCH_CAP = 1 << 16


# ---------------------------------------------------------------------------
# focus metrics
# ---------------------------------------------------------------------------

@dataclass
class FocusMask:
    """Binarized salient-attention indicator.

    mask: boolean array [..., N_q, N_k]; one slice per (batch-ish dims,
    head). theta is kept for compatibility checks between masks.
    """

    mask: np.ndarray
    theta: float


def focus_mask(a_w, theta: float, scope: str = "global") -> FocusMask:
    """Entries exceeding theta times the maximum attention weight.

    scope "global" takes the max over each [N_q x N_k] slice as written;
    scope "row" thresholds each query row by its own max (ablation variant).
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    a = np.asarray(a_w, dtype=np.float64)
    if scope == "global":
        axes = tuple(range(max(a.ndim - 2, 0), a.ndim))
        m = a.max(axis=axes, keepdims=True)
    elif scope == "row":
        m = a.max(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown max scope {scope!r}")
    return FocusMask(mask=a > theta * m, theta=theta)


def _slice_iou(m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """IoU per [N_q x N_k] slice; inputs rank >= 1, slices on last <=2 axes."""
    axes = tuple(range(max(m1.ndim - 2, 0), m1.ndim))
    inter = np.logical_and(m1, m2).sum(axis=axes, dtype=np.float64)
    union = np.logical_or(m1, m2).sum(axis=axes, dtype=np.float64)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def iou_af(m_fp: FocusMask, m_q: FocusMask) -> float:
    """Mean intersection-over-union of two focus masks, in [0, 1].

    Slices are the last two axes; any leading axes (batch, groups, heads)
    are averaged.
    """
    if m_fp.mask.shape != m_q.mask.shape:
        raise ValueError("focus masks must have identical shapes")
    if m_fp.theta != m_q.theta:
        raise ValueError("focus masks were built with different thetas")
    return float(np.mean(_slice_iou(m_fp.mask, m_q.mask)))


def dist_pcc(a_w_fp, a_w_q, theta: float, scope: str = "global") -> float:
    """1 - iou_af of the two focus masks."""
    return 1.0 - iou_af(focus_mask(a_w_fp, theta, scope),
                        focus_mask(a_w_q, theta, scope))


# ---------------------------------------------------------------------------
# candidate grids
# ---------------------------------------------------------------------------

class ClipSearchGrid:
    """Multiplicative shrink factors applied to observed (min, max).

    factors[0] is exactly 1.0, so the no-clipping pair is always present.
    pair(i, j) shrinks the low side by factors[i] and the high side by
    factors[j]; the symmetric sweep uses pair(i, i).
    """

    def __init__(self, x_min: float, x_max: float, steps: int = 100,
                 floor: float = 0.005):
        if steps < 1:
            raise ValueError("grid needs at least one step")
        # anchor one-sided ranges at zero so the zero-point stays a valid
        # code and the full range remains representable
        x_min, x_max = min(x_min, 0.0), max(x_max, 0.0)
        if not x_max > x_min:
            # degenerate observation: widen so downstream params stay valid
            pad = max(1e-8, abs(x_max) * 1e-6)
            x_min, x_max = x_min - pad, x_max + pad
        self.x_min = float(x_min)
        self.x_max = float(x_max)
        self.factors = np.geomspace(1.0, floor, steps)
        self.factors[0] = 1.0

    def __len__(self):
        return len(self.factors)

    def pair(self, i: int, j: int) -> tuple:
        lo = self.x_min * self.factors[i]
        up = self.x_max * self.factors[j]
        if not up > lo:
            pad = max(1e-8, abs(up) * 1e-6)
            lo, up = lo - pad, up + pad
        return lo, up

    def symmetric_pairs(self) -> list:
        return [self.pair(i, i) for i in range(len(self.factors))]

    def candidate_pairs(self) -> list:
        """(index pair, bounds) combos: the symmetric sweep plus each side
        swept alone with the other held at no-clip. The one-sided sweeps
        matter when a heavy tail inflates only one bound; a shared factor
        could never tighten it without strangling the healthy side."""
        n = len(self.factors)
        combos = [((i, i), self.pair(i, i)) for i in range(n)]
        combos += [((0, j), self.pair(0, j)) for j in range(1, n)]
        combos += [((i, 0), self.pair(i, 0)) for i in range(1, n)]
        return combos

    def refine_pairs(self, i_lo: int, j_up: int, radius: int) -> list:
        """(index pair, bounds) combos around a winner, each side free."""
        n = len(self.factors)
        lo_idx = range(max(0, i_lo - radius), min(n, i_lo + radius + 1))
        up_idx = range(max(0, j_up - radius), min(n, j_up + radius + 1))
        return [((i, j), self.pair(i, j)) for i in lo_idx for j in up_idx]


def _argmin_tiebreak_tight(objective: np.ndarray, ranges: np.ndarray) -> int:
    """Index of the smallest objective; ties go to the tighter clip range."""
    best = objective.min()
    tied = np.flatnonzero(objective <= best)
    return int(tied[np.argmin(ranges[tied])])


# ---------------------------------------------------------------------------
# plain-numpy fake quant (fast path for candidate evaluation)
# ---------------------------------------------------------------------------

def fq_np(x, lo, up, bits: int) -> np.ndarray:
    """Vectorized quantize-dequantize; bounds may broadcast against x."""
    lo = np.asarray(lo, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    n = (1 << bits) - 1
    s = (up - lo) / n
    z = np.clip(np.rint(-lo / s), 0, n)
    code = np.clip(np.rint(x / s) + z, 0, n)
    return s * (code - z)


# ---------------------------------------------------------------------------
# MSE search
# ---------------------------------------------------------------------------

def minmax_bounds(samples) -> tuple:
    """Observed range over all samples, zero-anchored (no-clipping rule)."""
    lo = min(0.0, min(float(np.min(s)) for s in samples))
    up = max(0.0, max(float(np.max(s)) for s in samples))
    if not up > lo:
        pad = max(1e-8, abs(up) * 1e-6)
        lo, up = lo - pad, up + pad
    return lo, up


def _mse_objective(flat: np.ndarray, los: np.ndarray, ups: np.ndarray,
                   bits: int) -> np.ndarray:
    """Mean squared fake-quant error for C candidate bound pairs."""
    c = len(los)
    out = np.empty(c)
    chunk = max(1, _CHUNK_BYTES // (flat.nbytes + 1))
    for start in range(0, c, chunk):
        stop = min(c, start + chunk)
        y = fq_np(flat[None, :], los[start:stop, None], ups[start:stop, None],
                  bits)
        d = y - flat[None, :]
        out[start:stop] = np.mean(d * d, axis=1)
    return out


def search_clip_mse(samples, grid: ClipSearchGrid, bits: int,
                    full_pairs: bool = False) -> tuple:
    """argmin over the grid of fake-quant MSE aggregated over all samples.

    Returns ((x_low, x_up), info) where info records the objective value and
    the number of candidates evaluated. A symmetric sweep (full_pairs adds
    the one-sided sweeps) is refined by an asymmetric pass around the
    winner. Buffers beyond a size cap are scored on an evenly strided
    subsample; the stride is odd, so for the usual power-of-two channel
    layouts every channel keeps contributing.
    """
    if len(grid) == 0:
        raise ValueError("empty candidate grid")
    flat = np.concatenate([np.asarray(s, dtype=np.float64).ravel()
                           for s in samples])
    if flat.size > _MSE_SEARCH_CAP:
        flat = flat[::(flat.size // _MSE_SEARCH_CAP + 1) | 1]
    if full_pairs:
        sweep = grid.candidate_pairs()
    else:
        sweep = [((i, i), grid.pair(i, i)) for i in range(len(grid))]
    los = np.array([b[0] for _, b in sweep])
    ups = np.array([b[1] for _, b in sweep])
    obj = _mse_objective(flat, los, ups, bits)
    win = _argmin_tiebreak_tight(obj, ups - los)
    evaluated = len(sweep)

    combos = grid.refine_pairs(*sweep[win][0], radius=3)
    rlos = np.array([b[0] for _, b in combos])
    rups = np.array([b[1] for _, b in combos])
    robj = _mse_objective(flat, rlos, rups, bits)
    rwin = _argmin_tiebreak_tight(robj, rups - rlos)
    evaluated += len(combos)

    if robj[rwin] < obj[win] or (
            robj[rwin] == obj[win]
            and (rups[rwin] - rlos[rwin]) < (ups[win] - los[win])):
        bounds, best = (rlos[rwin], rups[rwin]), robj[rwin]
    else:
        bounds, best = (los[win], ups[win]), obj[win]
    return bounds, {"objective_value": float(best),
                    "candidates_evaluated": evaluated}


def search_clip_mse_per_channel(w, axis: int, bits: int, steps: int = 100,
                                floor: float = 0.005,
                                refine_radius: int = 3) -> tuple:
    """Independent symmetric-shrink MSE search per output channel.

    Returns (list of (x_low, x_up) per channel, info). Vectorized over
    channels and candidates; the asymmetric refinement also runs per
    channel.
    """
    w = np.asarray(w, dtype=np.float64)
    flat = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    nch, m = flat.shape
    lo0 = np.minimum(flat.min(axis=1), 0.0)
    up0 = np.maximum(flat.max(axis=1), 0.0)
    pad = np.maximum(1e-8, np.abs(up0) * 1e-6)
    degenerate = (up0 - lo0) < 1e-12
    lo0 = np.where(degenerate, lo0 - pad, lo0)
    up0 = np.where(degenerate, up0 + pad, up0)
    factors = np.geomspace(1.0, floor, steps)
    factors[0] = 1.0

    def objective(los, ups):
        # los/ups: [K, nch] -> error [K, nch]
        c = los.shape[0]
        out = np.empty((c, nch))
        chunk = max(1, _CHUNK_BYTES // (flat.nbytes + 1))
        for start in range(0, c, chunk):
            stop = min(c, start + chunk)
            y = fq_np(flat[None, :, :], los[start:stop, :, None],
                      ups[start:stop, :, None], bits)
            d = y - flat[None, :, :]
            out[start:stop] = np.mean(d * d, axis=2)
        return out

    los = factors[:, None] * lo0[None, :]
    ups = factors[:, None] * up0[None, :]
    bad = (ups - los) <= 0
    ups = np.where(bad, los + 1e-8, ups)
    obj = objective(los, ups)
    rng_mat = ups - los
    best = obj.min(axis=0)
    tied = obj <= best[None, :]
    rng_masked = np.where(tied, rng_mat, np.inf)
    win = np.argmin(rng_masked, axis=0)
    evaluated = steps * nch

    n = steps
    offs = np.arange(-refine_radius, refine_radius + 1)
    li = np.clip(win[None, :] + offs[:, None], 0, n - 1)  # [R, nch]
    ui = np.clip(win[None, :] + offs[:, None], 0, n - 1)
    r = len(offs)
    # cartesian product of per-side offsets: [r*r, nch]
    li_full = np.repeat(li, r, axis=0)
    ui_full = np.tile(ui, (r, 1))
    rlos = factors[li_full] * lo0[None, :]
    rups = factors[ui_full] * up0[None, :]
    bad = (rups - rlos) <= 0
    rups = np.where(bad, rlos + 1e-8, rups)
    robj = objective(rlos, rups)
    rbest = robj.min(axis=0)
    rtied = robj <= rbest[None, :]
    rrng = np.where(rtied, rups - rlos, np.inf)
    rwin = np.argmin(rrng, axis=0)
    evaluated += r * r * nch

    ch = np.arange(nch)
    use_refine = (rbest < best) | ((rbest == best) &
                                   (rrng[rwin, ch] < rng_masked[win, ch]))
    fl = np.where(use_refine, rlos[rwin, ch], los[win, ch])
    fu = np.where(use_refine, rups[rwin, ch], ups[win, ch])
    bounds = list(zip(fl.tolist(), fu.tolist()))
    info = {"objective_value": float(np.minimum(best, rbest).mean()),
            "candidates_evaluated": evaluated}
    return bounds, info


# ---------------------------------------------------------------------------
# focus-overlap (PCC) search for QK activations
# ---------------------------------------------------------------------------

QK_KINDS = ("q#in", "q#out", "k#in", "k#out")


@dataclass
class AttnCalibContext:
    """Everything needed to replay one attention module's weight matrix.

    Captured from the full-precision forward of the first calibration
    sample: the query-side and key-side inputs, the projection weights, and
    the reference attention weights.
    """

    module_id: str
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    num_heads: int
    xq: np.ndarray  # [G, N_q, C]
    xkv: np.ndarray  # [G, N_k, C]
    a_w_fp: np.ndarray  # [G, H, N_q, N_k]

    def qk_hook(self, kind: str) -> str:
        return f"{self.module_id}.{kind}"

    def attention_weights(self, assign: dict, bits: int) -> np.ndarray:
        """A_w with fake-quant applied per the assignment.

        assign maps each of the four QK kinds to None (full precision),
        scalar bounds (lo, up), or candidate-batched bound arrays shaped
        [C, 1, 1, 1]; at most one entry may carry a candidate axis.
        """

        def apply(x, kind):
            b = assign.get(kind)
            if b is None:
                return x
            return fq_np(x, b[0], b[1], bits)

        q = apply(self.xq, "q#in") @ self.wq.T + self.bq
        q = apply(q, "q#out")
        k = apply(self.xkv, "k#in") @ self.wk.T + self.bk
        k = apply(k, "k#out")
        h = self.num_heads
        dh = q.shape[-1] // h

        def heads(x):
            # [..., G, N, C] -> [..., G, H, N, dh]
            shp = x.shape[:-1] + (h, dh)
            return np.moveaxis(x.reshape(shp), -2, -3)

        qh, kh = heads(q), heads(k)
        scores = (qh @ np.swapaxes(kh, -1, -2)) / np.sqrt(dh)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=-1, keepdims=True)


def evaluate_qk_candidates(ctx: AttnCalibContext, kind: str, los: np.ndarray,
                           ups: np.ndarray, state: dict, theta: float,
                           bits: int, scope: str = "global") -> np.ndarray:
    """Focus distance of each candidate bound pair for one QK tensor.

    state holds the fixed assignment of the other three tensors (None means
    full precision). Returns dist array [C].
    """
    assign = dict(state)
    assign[kind] = (los.reshape(-1, 1, 1, 1), ups.reshape(-1, 1, 1, 1))
    a_w = ctx.attention_weights(assign, bits)
    fp_mask = focus_mask(ctx.a_w_fp, theta, scope).mask
    q_mask = focus_mask(a_w, theta, scope).mask
    iou = _slice_iou(np.broadcast_to(fp_mask, q_mask.shape), q_mask)
    # average every axis except the candidate axis
    return 1.0 - iou.reshape(iou.shape[0], -1).mean(axis=1)


def search_clip_pcc(ctx: AttnCalibContext, grids: dict, theta: float,
                    bits: int, scope: str = "global", sweeps: int = 2,
                    refine_radius: int = 3) -> tuple:
    """Coordinate-descent focus-overlap search over the four QK tensors.

    grids maps each kind in QK_KINDS to its ClipSearchGrid. Tensors are
    optimized one at a time; tensors not yet visited stay at full precision
    during the first sweep and at their current winners afterwards. After
    the sweeps each tensor gets an asymmetric refinement around its winner.
    Returns ({kind: (x_low, x_up)}, {kind: info}).
    """
    for kind in QK_KINDS:
        if kind not in grids or len(grids[kind]) == 0:
            raise ValueError(f"missing or empty grid for {kind}")
    state = {kind: None for kind in QK_KINDS}
    win_idx = {}
    info = {kind: {"candidates_evaluated": 0} for kind in QK_KINDS}

    for _ in range(sweeps):
        for kind in QK_KINDS:
            grid = grids[kind]
            combos = grid.candidate_pairs()
            los = np.array([b[0] for _, b in combos])
            ups = np.array([b[1] for _, b in combos])
            others = {k: v for k, v in state.items() if k != kind}
            others[kind] = None
            dists = evaluate_qk_candidates(ctx, kind, los, ups, others,
                                           theta, bits, scope)
            w = _argmin_tiebreak_tight(dists, ups - los)
            state[kind] = (los[w], ups[w])
            win_idx[kind] = combos[w][0]
            info[kind]["candidates_evaluated"] += len(combos)
            info[kind]["objective_value"] = float(dists[w])

    for kind in QK_KINDS:
        grid = grids[kind]
        combos = grid.refine_pairs(*win_idx[kind], radius=refine_radius)
        los = np.array([b[0] for _, b in combos])
        ups = np.array([b[1] for _, b in combos])
        others = {k: v for k, v in state.items() if k != kind}
        others[kind] = None
        dists = evaluate_qk_candidates(ctx, kind, los, ups, others, theta,
                                       bits, scope)
        w = _argmin_tiebreak_tight(dists, ups - los)
        prev = info[kind]["objective_value"]
        cur_rng = state[kind][1] - state[kind][0]
        if dists[w] < prev or (dists[w] == prev
                               and (ups[w] - los[w]) < cur_rng):
            state[kind] = (los[w], ups[w])
            win_idx[kind] = combos[w][0]
            info[kind]["objective_value"] = float(dists[w])
        info[kind]["candidates_evaluated"] += len(combos)
    return state, info


# ---------------------------------------------------------------------------
# policy and whole-model calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibPolicy:
    """Which metric calibrates which tensor, and with what budget.

    overrides are fnmatch patterns on hook names, checked first; the qk /
    act / weight defaults cover everything else. The focus metric always
    uses only the first calibration sample; MSE and minmax use all samples.
    """

    act_bits: int = 8
    weight_bits: int = 8
    qk_metric: str = "pcc"
    act_metric: str = "mse"
    weight_metric: str = "mse"
    theta: float = 0.5
    mask_scope: str = "global"
    grid_steps: int = 100
    grid_floor: float = 0.005
    refine_radius: int = 3
    pcc_sweeps: int = 2
    overrides: dict = field(default_factory=dict)

    _METRICS = ("pcc", "mse", "minmax")

    def __post_init__(self):
        for m in (self.qk_metric, self.act_metric, self.weight_metric):
            if m not in self._METRICS:
                raise ValueError(f"unknown metric {m!r}")
        if self.weight_metric == "pcc":
            raise ValueError("weights cannot use the focus metric")

    def metric_for(self, hook: str) -> str:
        for pattern, metric in self.overrides.items():
            if fnmatch.fnmatch(hook, pattern):
                if metric not in self._METRICS:
                    raise ValueError(
                        f"no valid metric for {hook!r}: override gives {metric!r}")
                return metric
        if hook.endswith("#w"):
            return self.weight_metric
        if is_qk_hook(hook):
            return self.qk_metric
        return self.act_metric


@dataclass
class Observations:
    """Raw full-precision activations captured over the calibration set."""

    acts: dict  # hook -> list of arrays, one per sample
    attn_ctx: dict  # attention module path -> AttnCalibContext (first sample)
    num_samples: int


def collect_observations(model, images, prompt_sets) -> Observations:
    """One full-precision pass per calibration item, recording every hook."""
    if len(images) != len(prompt_sets):
        raise ValueError("images and prompt sets must pair up")
    if not images:
        raise ValueError("empty calibration set")
    env = QuantEnv()
    env.observing = True
    env.enabled = False
    first_trace = None
    for i, (img, prompts) in enumerate(zip(images, prompt_sets)):
        trace = TraceBuffer() if i == 0 else None
        model.predict(img, prompts, env=env, trace=trace)
        if i == 0:
            first_trace = trace
    ctxs = {}
    for mod in model.attention_paths():
        ctxs[mod] = AttnCalibContext(
            module_id=mod,
            wq=model.params[mod + ".q.w"],
            bq=model.params[mod + ".q.b"],
            wk=model.params[mod + ".k.w"],
            bk=model.params[mod + ".k.b"],
            num_heads=(model.cfg.num_heads if mod.startswith("encoder")
                       else model.cfg.decoder_heads),
            xq=env.observed[mod + ".q#in"][0],
            xkv=env.observed[mod + ".k#in"][0],
            a_w_fp=first_trace.get(mod).weights,
        )
    return Observations(acts=env.observed, attn_ctx=ctxs,
                        num_samples=len(images))


@dataclass
class CalibResult:
    env: QuantEnv
    report: list  # per-tensor records
    observations: Observations


def calibrate_model(model, images, prompt_sets, policy: CalibPolicy,
                    observations: Observations | None = None) -> CalibResult:
    """Freeze QuantParams for every hooked tensor of the model.

    Weights get per-channel asymmetric bounds (output-channel axis);
    activations get per-tensor bounds chosen by the policy metric.
    Passing precollected observations skips the forward passes (used by
    theta sweeps, which only redo the focus searches).
    """
    obs = observations or collect_observations(model, images, prompt_sets)
    env = QuantEnv()
    report = []

    for path in model.quantizable_linears():
        hook = path + "#w"
        w = model.params[path + ".w"]
        metric = policy.metric_for(hook)
        if metric == "minmax":
            bounds = per_channel_bounds(w, 0)
            info = {"objective_value": 0.0, "candidates_evaluated": 0}
        else:
            bounds, info = search_clip_mse_per_channel(
                w, 0, policy.weight_bits, policy.grid_steps,
                policy.grid_floor, policy.refine_radius)
        qp = channel_params_from_bounds(bounds, policy.weight_bits, 0, w.ndim)
        env.weight_params[hook] = qp
        report.append({"name": hook, "metric": metric,
                       "bits": policy.weight_bits,
                       "x_low": float(min(b[0] for b in bounds)),
                       "x_up": float(max(b[1] for b in bounds)),
                       **info})

    pcc_hooks = {}
    for hook in model.act_hooks():
        metric = policy.metric_for(hook)
        if metric == "pcc":
            if not is_qk_hook(hook):
                raise ValueError(
                    f"focus metric only applies to QK activations, got {hook!r}")
            pcc_hooks.setdefault(module_of_hook(hook), []).append(hook)
            continue
        samples = obs.acts[hook]
        if metric == "minmax":
            lo, up = minmax_bounds(samples)
            info = {"objective_value": 0.0, "candidates_evaluated": 0}
        elif is_qk_hook(hook):
            # first-sample grid with one-sided sweeps: the exact candidate
            # set the focus metric searches, so metric comparisons on QK
            # tensors differ only in the selection objective
            first = samples[0]
            grid = ClipSearchGrid(float(first.min()), float(first.max()),
                                  policy.grid_steps, policy.grid_floor)
            (lo, up), info = search_clip_mse(samples, grid, policy.act_bits,
                                             full_pairs=True)
        else:
            lo0, up0 = minmax_bounds(samples)
            grid = ClipSearchGrid(lo0, up0, policy.grid_steps,
                                  policy.grid_floor)
            (lo, up), info = search_clip_mse(samples, grid, policy.act_bits)
        env.act_params[hook] = params_from_bounds(lo, up, policy.act_bits)
        report.append({"name": hook, "metric": metric,
                       "bits": policy.act_bits, "x_low": float(lo),
                       "x_up": float(up), **info})

    for mod, hooks in sorted(pcc_hooks.items()):
        ctx = obs.attn_ctx[mod]
        grids = {}
        for kind in QK_KINDS:
            hook = ctx.qk_hook(kind)
            # the focus search is first-sample scoped, its grid likewise
            first = obs.acts[hook][0]
            grids[kind] = ClipSearchGrid(float(first.min()),
                                         float(first.max()),
                                         policy.grid_steps, policy.grid_floor)
        state, info = search_clip_pcc(ctx, grids, policy.theta,
                                      policy.act_bits, policy.mask_scope,
                                      policy.pcc_sweeps, policy.refine_radius)
        for kind in QK_KINDS:
            hook = ctx.qk_hook(kind)
            lo, up = state[kind]
            env.act_params[hook] = params_from_bounds(lo, up, policy.act_bits)
            report.append({"name": hook, "metric": "pcc",
                           "bits": policy.act_bits, "x_low": float(lo),
                           "x_up": float(up), **info[kind]})

    report.sort(key=lambda r: r["name"])
    return CalibResult(env=env, report=report, observations=obs)
