"""Simulated uniform affine quantization.

Everything here is fake-quant: values stay float64 and integer codes are
floats holding exact integers. Scale and zero-point are always derived from
the clipping bounds (x_low, x_up), so the bound/scale relation holds exactly
no matter how the bounds were produced (grid search or gradient learning).
"""

from __future__ import annotations

import warnings

import numpy as np

from .autodiff import Tensor, apply_op, clamp, sigmoid

# smallest admissible x_up - x_low while bounds are being learned; freeze()
# materializes the guarded value so frozen params always satisfy it
_RANGE_FLOOR = 1e-8


def _round_half_even(x):
    return np.rint(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class QuantParams:
    """Bit-width, clipping bounds and derived scale/zero-point for one tensor.

    Bounds are scalars (per-tensor) or broadcast-ready arrays with size 1 on
    every axis except the channel axis (per-channel). They may be autodiff
    Tensors while learnable; freeze() snapshots them to plain arrays.
    """

    def __init__(self, bits, x_low, x_up, granularity="per-tensor",
                 channel_axis=None, learnable=False):
        if not (2 <= bits <= 16):
            raise ValueError(f"bits must be in [2, 16], got {bits}")
        if granularity not in ("per-tensor", "per-channel"):
            raise ValueError(f"unknown granularity {granularity!r}")
        if granularity == "per-channel" and channel_axis is None:
            raise ValueError("per-channel params need a channel_axis")
        self.bits = int(bits)
        self.x_low = x_low
        self.x_up = x_up
        self.granularity = granularity
        self.channel_axis = channel_axis
        self.learnable = learnable
        self._warned_z_clamp = False
        self._validate_frozen()

    def _validate_frozen(self):
        if self.learnable:
            return
        lo, up = _data(self.x_low), _data(self.x_up)
        if np.any(up - lo <= 0):
            raise ValueError("degenerate clipping range: x_up must exceed x_low")

    @property
    def n_levels(self) -> int:
        return (1 << self.bits) - 1

    def effective_bounds(self):
        """Bound values with the range floor applied (learning can cross them)."""
        lo = _data(self.x_low)
        up = np.maximum(_data(self.x_up), lo + _RANGE_FLOOR)
        return lo, up

    @property
    def scale(self) -> np.ndarray:
        lo, up = self.effective_bounds()
        return (up - lo) / self.n_levels

    @property
    def zero_point(self) -> np.ndarray:
        lo, _ = self.effective_bounds()
        z = _round_half_even(-lo / self.scale)
        clamped = np.clip(z, 0, self.n_levels)
        if not self._warned_z_clamp and np.any(clamped != z):
            self._warned_z_clamp = True
            warnings.warn(
                "zero-point fell outside the code range and was clamped; "
                "bounds do not straddle a representable zero",
                RuntimeWarning,
            )
        return clamped

    def make_learnable(self) -> "QuantParams":
        """Return a copy whose bounds are gradient-tracked tensors."""
        lo, up = self.effective_bounds()
        return QuantParams(
            self.bits,
            Tensor(lo.copy(), requires_grad=True),
            Tensor(up.copy(), requires_grad=True),
            granularity=self.granularity,
            channel_axis=self.channel_axis,
            learnable=True,
        )

    def freeze(self) -> "QuantParams":
        """Snapshot current bound values into a plain immutable params object."""
        lo, up = self.effective_bounds()
        return QuantParams(
            self.bits, lo.copy(), up.copy(),
            granularity=self.granularity,
            channel_axis=self.channel_axis,
            learnable=False,
        )

    def bound_tensors(self):
        """The learnable bound tensors (for optimizer registration)."""
        if not self.learnable:
            raise ValueError("params are frozen; call make_learnable first")
        return [self.x_low, self.x_up]

    def to_dict(self) -> dict:
        lo, up = self.effective_bounds()
        s, z = self.scale, self.zero_point

        def scalar_or_list(a):
            a = np.asarray(a)
            return float(a.reshape(())) if a.size == 1 else a.ravel().tolist()

        return {
            "bits": self.bits,
            "x_low": scalar_or_list(lo),
            "x_up": scalar_or_list(up),
            "scale": scalar_or_list(s),
            "zero_point": scalar_or_list(z),
            "granularity": self.granularity,
        }

    def __repr__(self):
        return (f"QuantParams(bits={self.bits}, granularity={self.granularity}, "
                f"learnable={self.learnable})")


def params_from_bounds(x_low, x_up, bits) -> QuantParams:
    """Per-tensor params from scalar clipping bounds."""
    lo = float(x_low)
    up = float(x_up)
    if not up > lo:
        raise ValueError(f"degenerate range: x_low={lo}, x_up={up}")
    return QuantParams(bits, np.float64(lo), np.float64(up))


def per_channel_bounds(w, axis):
    """Observed (min, max) per channel along ``axis``, as search initialization.

    Ranges are anchored at zero so the zero-point is always a valid code;
    constant channels are widened by a tiny epsilon so the derived scale
    stays positive.
    """
    w = _data(w)
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis)
    lo = np.minimum(w.min(axis=reduce_axes), 0.0)
    up = np.maximum(w.max(axis=reduce_axes), 0.0)
    eps = np.maximum(1e-8, np.abs(up) * 1e-6)
    degenerate = (up - lo) < 1e-12
    lo = np.where(degenerate, lo - eps, lo)
    up = np.where(degenerate, up + eps, up)
    return list(zip(lo.tolist(), up.tolist()))


def channel_params_from_bounds(bounds, bits, axis, ndim) -> QuantParams:
    """Per-channel params from a list of (x_low, x_up), broadcast-ready."""
    lo = np.array([b[0] for b in bounds], dtype=np.float64)
    up = np.array([b[1] for b in bounds], dtype=np.float64)
    if np.any(up - lo <= 0):
        raise ValueError("degenerate range in per-channel bounds")
    shape = [1] * ndim
    shape[axis] = len(bounds)
    return QuantParams(
        bits, lo.reshape(shape), up.reshape(shape),
        granularity="per-channel", channel_axis=axis,
    )


# ---------------------------------------------------------------------------
# core quantize / dequantize (plain numpy, used by fake_quant and tests)
# ---------------------------------------------------------------------------

def quantize(x, qp: QuantParams) -> np.ndarray:
    """Integer codes clip(round(x/s) + z, 0, 2^b - 1), as an int64 array."""
    xd = _data(x)
    s, z = qp.scale, qp.zero_point
    code = np.clip(_round_half_even(xd / s) + z, 0, qp.n_levels)
    return code.astype(np.int64)


def dequantize(xq, qp: QuantParams) -> np.ndarray:
    """Reconstruction s * (x_q - z)."""
    return qp.scale * (np.asarray(xq, dtype=np.float64) - qp.zero_point)


def fake_quant(x, qp: QuantParams) -> Tensor:
    """Quantize-dequantize with straight-through gradients.

    d(out)/dx is 1 where x lies within the representable range
    [dequant(0), dequant(2^b-1)] and 0 outside. The clipping bounds receive
    the saturated-branch gradient: d(out)/d(x_low) collects the output
    gradient over elements saturating low, d(out)/d(x_up) over elements
    saturating high.
    """
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    lo_t = qp.x_low if isinstance(qp.x_low, Tensor) else Tensor(_data(qp.x_low))
    up_t = qp.x_up if isinstance(qp.x_up, Tensor) else Tensor(_data(qp.x_up))

    s, z = qp.scale, qp.zero_point
    n = qp.n_levels
    xd = x_t.data
    code = np.clip(_round_half_even(xd / s) + z, 0, n)
    y = s * (code - z)

    lo_eff = s * (0 - z)
    hi_eff = s * (n - z)
    below = xd < lo_eff
    above = xd > hi_eff
    inside = ~(below | above)
    lo_shape, up_shape = lo_t.shape, up_t.shape

    def grad_fn(g):
        gx = g * inside
        g_lo = _reduce_to(g * below, lo_shape)
        g_up = _reduce_to(g * above, up_shape)
        return gx, g_lo, g_up

    return apply_op(y, (x_t, lo_t, up_t), grad_fn)


def qdrop_fake_quant(x, qp: QuantParams, p: float, rng) -> Tensor:
    """Randomly bypass quantization elementwise with probability p.

    p=0 is exactly fake_quant, p=1 is exactly identity. Only used while
    learning quantization parameters.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    if p == 0.0:
        return fake_quant(x_t, qp)
    keep_fp = (rng.random(x_t.shape) < p).astype(np.float64)
    if p == 1.0:
        keep_fp = np.ones(x_t.shape)
    fq = fake_quant(x_t, qp)
    return x_t * keep_fp + fq * (1.0 - keep_fp)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to a bound's broadcast shape (scalar or per-channel)."""
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ndim in enumerate(shape):
        if ndim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# adaptive rounding
# ---------------------------------------------------------------------------

class RoundingVars:
    """Continuous rounding variables for one weight tensor.

    The rectified sigmoid h(alpha) = clamp(1.2*sigmoid(alpha) - 0.1, 0, 1)
    selects between floor (0) and ceil (1) per element. Initialized so that
    h(alpha) reproduces the real-valued remainder w/s - floor(w/s), which
    makes the soft-quantized weight exact at the start of learning for every
    element strictly inside the representable range (saturating elements
    still clamp).
    """

    def __init__(self, alpha: Tensor):
        self.alpha = alpha

    @classmethod
    def init_from(cls, w, qp: QuantParams) -> "RoundingVars":
        wd = _data(w)
        s = qp.scale
        rest = wd / s - np.floor(wd / s)
        # invert h: sigmoid(alpha) = (rest + 0.1) / 1.2, kept off the rails
        target = np.clip((rest + 0.1) / 1.2, 1e-4, 1.0 - 1e-4)
        alpha = np.log(target / (1.0 - target))
        return cls(Tensor(alpha, requires_grad=True))

    def soft_offset(self) -> Tensor:
        """Differentiable offset h(alpha) in [0, 1]."""
        return clamp(sigmoid(self.alpha) * 1.2 - 0.1, 0.0, 1.0)

    def hard_offset(self) -> np.ndarray:
        """Binary offset used after learning: ceil where h crossed 1/2."""
        h = np.clip(1.2 / (1.0 + np.exp(-self.alpha.data)) - 0.1, 0.0, 1.0)
        return (h >= 0.5).astype(np.float64)

    def polarization(self) -> float:
        """Fraction of offsets within 0.01 of an endpoint (0 or 1)."""
        h = np.clip(1.2 / (1.0 + np.exp(-self.alpha.data)) - 0.1, 0.0, 1.0)
        return float(np.mean((h <= 0.01) | (h >= 0.99)))


def fake_quant_weight(w, qp: QuantParams, rv: RoundingVars | None,
                      hard: bool = False):
    """Weight fake-quant with adaptive rounding.

    Soft mode (hard=False) returns an autodiff Tensor differentiable in
    alpha: dequant(clip(floor(w/s) + h(alpha) + z, 0, 2^b-1)). Hard mode
    snaps h to {0, 1} and returns a plain array. With rv=None this is
    round-to-nearest fake-quant of the weight.
    """
    wd = _data(w)
    s, z = qp.scale, qp.zero_point
    n = qp.n_levels
    if rv is None:
        code = np.clip(_round_half_even(wd / s) + z, 0, n)
        return s * (code - z)
    if rv.alpha.shape != wd.shape:
        raise ValueError(
            f"alpha shape {rv.alpha.shape} does not match weight {wd.shape}"
        )
    base = np.floor(wd / s) + z
    if hard:
        code = np.clip(base + rv.hard_offset(), 0, n)
        return s * (code - z)
    code = clamp(rv.soft_offset() + base, 0.0, float(n))
    return (code - z) * s


def rounding_regularizer(rv: RoundingVars, beta: float) -> Tensor:
    """Polarization penalty sum(1 - |2h - 1|^beta); beta anneals high to low."""
    from .autodiff import absval, pow_scalar, sum_

    h = rv.soft_offset()
    return sum_(1.0 - pow_scalar(absval(h * 2.0 - 1.0), beta))


def anneal_beta(step: int, total: int, beta_hi: float = 20.0,
                beta_lo: float = 2.0) -> float:
    """Linear anneal of the regularizer exponent over the learning schedule."""
    if total <= 1:
        return beta_lo
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return beta_hi + (beta_lo - beta_hi) * frac
