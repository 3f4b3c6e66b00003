"""Experiment driver: synthetic data, outlier injection, pipelines, reports.

Every run is parameterized by one integer seed. All randomness flows from it
through named substreams (model init, calibration data, prompts, evaluation
data, adaptive-rounding drop), so varying one component never perturbs the
others and reports are reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import re
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .calibration import (
    QK_KINDS,
    CalibPolicy,
    CalibResult,
    Observations,
    calibrate_model,
    collect_observations,
    dist_pcc,
)
from .hooks import QuantEnv
from .model import Model, ModelConfig, build_model
from .model.segmenter import PromptSpec
from .reconstruction import (
    QuantizedModel,
    ReconConfig,
    evaluate_agreement,
    run_reconstruction,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for malformed or contradictory experiment configuration."""


class InjectionError(RuntimeError):
    """Outlier injection failed its post-hoc magnitude verification."""


def named_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


# ---------------------------------------------------------------------------
# synthetic calibration data
# ---------------------------------------------------------------------------

def gen_synthetic_images(n: int = 32, seed: int = 0, image_size: int = 64,
                         stream: str = "data") -> list:
    """Seeded procedural grayscale images, each [1, H, W], standardized.

    A tilted linear gradient plus one to three Gaussian blobs of varying
    width and polarity: enough spatial structure that attention focuses
    non-uniformly, which the focus-overlap metric needs to discriminate.
    """
    if n < 1:
        raise ValueError("need at least one image")
    rng = named_rng(seed, stream)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images = []
    for _ in range(n):
        img = (rng.normal(0.0, 0.25) * xx + rng.normal(0.0, 0.25) * yy)
        img /= image_size
        for _ in range(int(rng.integers(1, 4))):
            cx, cy = rng.uniform(image_size * 0.15, image_size * 0.85, size=2)
            width = rng.uniform(image_size * 0.05, image_size * 0.16)
            amp = rng.uniform(0.6, 1.6) * (1 if rng.random() < 0.8 else -1)
            img = img + amp * np.exp(
                -((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width * width))
        img = (img - img.mean()) / (img.std() + 1e-12)
        images.append(img[None])
    return images


def gen_prompts(images, seed: int = 0, stream: str = "prompts") -> list:
    """Per image: a foreground point on the brightest blob plus a box around it."""
    rng = named_rng(seed, stream)
    prompt_sets = []
    for img in images:
        size = img.shape[-1]
        r, c = np.unravel_index(int(np.argmax(img[0])), img[0].shape)
        x, y = c + 0.5, r + 0.5
        half = float(rng.uniform(size * 0.1, size * 0.2))
        box = (max(0.0, x - half), max(0.0, y - half),
               min(float(size), x + half), min(float(size), y + half))
        prompt_sets.append([PromptSpec("point", (x, y), 1),
                            PromptSpec("box", box)])
    return prompt_sets


# ---------------------------------------------------------------------------
# outlier injection
# ---------------------------------------------------------------------------

def _default_outlier_targets() -> list:
    # token-to-image cross attention, where prompts meet image content
    return ["decoder.block0.t2i.q#out", "decoder.block0.t2i.k#out",
            "decoder.block1.t2i.q#out", "decoder.block1.t2i.k#out",
            "decoder.final_t2i.q#out", "decoder.final_t2i.k#out"]


@dataclass
class OutlierSpec:
    """Where and how hard to inject heavy-tailed QK activations.

    targets name q#out / k#out activation hooks. The mechanism is an
    additive rank-1 spike in the named projection weight: one output
    channel's row is aligned with the principal component of that
    projection's observed input, so the induced channel rides the data.
    The partner projection's matching row (and bias entry) is zeroed
    first, which makes the spiked channel's contribution to every
    attention score exactly zero: the outliers are bias-like and
    semantically inert, as large as demanded yet carrying no focus
    information.
    """

    targets: list = field(default_factory=_default_outlier_targets)
    bulk_scale: float = 1.0
    magnitude: float = 180.0
    fraction: float = 0.002

    def __post_init__(self):
        if not 0.0 < self.fraction <= 0.05:
            raise ConfigError("outlier fraction must lie in (0, 0.05]")
        if self.magnitude <= 10.0:
            raise ConfigError("outlier magnitude must exceed 10")
        if self.bulk_scale <= 0.0:
            raise ConfigError("bulk_scale must be positive")
        if not self.targets:
            raise ConfigError("need at least one injection target")
        for t in self.targets:
            if not (t.endswith(".q#out") or t.endswith(".k#out")):
                raise ConfigError(
                    f"injection target must be a q#out or k#out hook, got {t!r}")


@dataclass
class InjectionResult:
    """Per-target injection bookkeeping plus the verification measurements."""

    model: Model
    records: dict  # hook -> {sigma_bulk, gamma, channels, ratio}
    threshold: float  # minimum acceptable max|x| / sigma_bulk


def _robust_sigma(samples) -> float:
    flat = np.concatenate([np.ravel(s) for s in samples])
    q75, q25 = np.percentile(flat, [75.0, 25.0])
    # normal-consistent IQR scale; robust to the spike channels themselves
    return max(float(q75 - q25) / 1.349, 1e-12)


def _observe_hooks(model: Model, images, prompt_sets, hooks) -> dict:
    env = QuantEnv()
    env.observing = True
    env.enabled = False
    for img, prompts in zip(images, prompt_sets):
        model.predict(img, prompts, env=env)
    return {h: env.observed[h] for h in hooks}


def inject_outliers(model: Model, spec: OutlierSpec, images,
                    prompt_sets) -> InjectionResult:
    """Plant inert massive activations in the targeted QK projections.

    Mutates model weights in place. Verification is part of the contract:
    after injection the calibration set is re-run and each target must show
    max|activation| >= 0.8 * magnitude * bulk_scale in units of its
    pre-injection bulk scale (IQR / 1.349), else InjectionError.
    """
    paths = set(model.attention_paths())
    parsed = []
    for hook in spec.targets:
        base = hook.split("#")[0]
        mod, proj = base.rsplit(".", 1)
        if mod not in paths:
            raise ConfigError(f"injection target {hook!r} names no attention module")
        parsed.append((hook, mod, proj))

    pre = _observe_hooks(model, images, prompt_sets,
                         [h for h, _, _ in parsed]
                         + [f"{m}.{p}#in" for _, m, p in parsed])

    next_channel = {}  # module -> next free spike channel, allocated downward
    records = {}
    for hook, mod, proj in parsed:
        wq, bq = model.params[f"{mod}.q.w"], model.params[f"{mod}.q.b"]
        wk, bk = model.params[f"{mod}.k.w"], model.params[f"{mod}.k.b"]
        w_spiked = wq if proj == "q" else wk
        channels_out = w_spiked.shape[0]  # weights are stored [out, in]
        n_spike = max(1, int(round(spec.fraction * channels_out)))

        sigma = _robust_sigma(pre[hook])
        x_in = np.concatenate(
            [s.reshape(-1, s.shape[-1]) for s in pre[f"{mod}.{proj}#in"]])
        # dominant input direction (uncentered): the spike rides the data,
        # giving a consistently one-sided, bias-like heavy tail
        _, _, vt = np.linalg.svd(x_in, full_matrices=False)
        v = vt[0]
        proj_vals = x_in @ v
        if abs(proj_vals.min()) > abs(proj_vals.max()):
            v, proj_vals = -v, -proj_vals
        target_max = spec.magnitude * spec.bulk_scale * sigma
        gamma = target_max / float(np.abs(proj_vals).max())

        start = next_channel.get(mod, channels_out - 1)
        chans = list(range(start, start - n_spike, -1))
        next_channel[mod] = start - n_spike
        if next_channel[mod] < channels_out // 2:
            raise ConfigError("too many spike channels for this module width")
        for i, c in enumerate(chans):
            # zero both sides first: with the partner row and bias gone,
            # channel c contributes exactly zero to every attention score
            wq[c, :] = 0.0
            bq[c] = 0.0
            wk[c, :] = 0.0
            bk[c] = 0.0
            w_spiked[c, :] = (-1.0 if i % 2 else 1.0) * gamma * v
        records[hook] = {"sigma_bulk": sigma, "gamma": float(gamma),
                         "channels": chans}

    post = _observe_hooks(model, images, prompt_sets, [h for h, _, _ in parsed])
    threshold = 0.8 * spec.magnitude * spec.bulk_scale
    for hook, _, _ in parsed:
        measured = max(float(np.abs(s).max()) for s in post[hook])
        ratio = measured / records[hook]["sigma_bulk"]
        records[hook]["ratio"] = ratio
        if ratio < threshold:
            raise InjectionError(
                f"injection at {hook} reached only {ratio:.1f}x bulk scale "
                f"(needed {threshold:.1f}x)")
    return InjectionResult(model=model, records=records, threshold=threshold)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_BITS_RE = re.compile(r"^W(\d{1,2})A(\d{1,2})$")


def parse_bits(spec: str) -> tuple:
    """'WxAy' -> (weight_bits, act_bits)."""
    m = _BITS_RE.match(spec)
    if not m:
        raise ConfigError(f"bits must look like 'W6A6', got {spec!r}")
    w, a = int(m.group(1)), int(m.group(2))
    for b in (w, a):
        if not 2 <= b <= 16:
            raise ConfigError(f"bit-width {b} outside [2, 16] in {spec!r}")
    return w, a


_METHODS = ("minmax", "mse", "pcc")
_RECON_MODES = ("none", "local", "par")


def _default_theta_grid() -> list:
    return [round(0.3 + 0.1 * i, 1) for i in range(7)]


@dataclass
class ExperimentConfig:
    """Everything a run needs; one seed list drives all substreams."""

    model: ModelConfig = field(default_factory=ModelConfig)
    outliers: OutlierSpec | None = field(default_factory=OutlierSpec)
    seeds: list = field(default_factory=lambda: [0])
    bits: list = field(default_factory=lambda: ["W8A8", "W6A6", "W4A4"])
    methods: list = field(default_factory=lambda: ["minmax", "mse", "pcc"])
    recon: str = "none"
    granularity: str = "per-stage"
    theta: float = 0.5
    theta_grid: list = field(default_factory=_default_theta_grid)
    num_images: int = 32
    eval_images: int = 8
    iter_scale: float = 0.1
    drop_prob: float = 0.5
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if not self.bits:
            raise ConfigError("need at least one bit setting")
        for b in self.bits:
            parse_bits(b)
        if not self.methods:
            raise ConfigError("need at least one calibration method")
        for m in self.methods:
            if m not in _METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.recon not in _RECON_MODES:
            raise ConfigError(f"unknown reconstruction mode {self.recon!r}")
        if self.granularity not in ("per-stage", "per-layer"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if not self.theta_grid:
            raise ConfigError("theta grid must be non-empty")
        for t in self.theta_grid:
            if not 0.0 < t < 1.0:
                raise ConfigError("theta grid values must lie in (0, 1)")
        if self.num_images < 1 or self.eval_images < 1:
            raise ConfigError("image counts must be positive")
        if self.iter_scale <= 0.0:
            raise ConfigError("iteration scale must be positive")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("drop probability must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be positive")


def _strict_kwargs(cls, d: dict, where: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    """Strict construction: any unknown key, at any level, is an error."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    d = dict(_strict_kwargs(ExperimentConfig, d, "config"))
    if "model" in d:
        if not isinstance(d["model"], dict):
            raise ConfigError("'model' must be an object")
        try:
            d["model"] = ModelConfig(
                **_strict_kwargs(ModelConfig, d["model"], "model"))
        except ValueError as e:
            raise ConfigError(f"bad model config: {e}") from e
    if "outliers" in d and d["outliers"] is not None:
        if not isinstance(d["outliers"], dict):
            raise ConfigError("'outliers' must be an object or null")
        d["outliers"] = OutlierSpec(
            **_strict_kwargs(OutlierSpec, d["outliers"], "outliers"))
    try:
        return ExperimentConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """JSON-ready form of a config; load_config(write) round-trips it."""
    return _jsonable(asdict(cfg))


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def policy_for(method: str, weight_bits: int, act_bits: int,
               theta: float) -> CalibPolicy:
    """Calibration policy for a named method.

    The methods differ only in how QK activations are ranged: everything
    else stays on the strongest value metric available so comparisons
    isolate the QK clipping decision.
    """
    if method == "minmax":
        return CalibPolicy(act_bits=act_bits, weight_bits=weight_bits,
                           qk_metric="minmax", act_metric="minmax",
                           weight_metric="minmax", theta=theta)
    if method == "mse":
        return CalibPolicy(act_bits=act_bits, weight_bits=weight_bits,
                           qk_metric="mse", act_metric="mse",
                           weight_metric="mse", theta=theta)
    if method == "pcc":
        return CalibPolicy(act_bits=act_bits, weight_bits=weight_bits,
                           qk_metric="pcc", act_metric="mse",
                           weight_metric="mse", theta=theta)
    raise ConfigError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# single-seed pipeline
# ---------------------------------------------------------------------------

@dataclass
class RunContext:
    """One seed's model, data and full-precision observations, built once."""

    seed: int
    model: Model
    images: list
    prompt_sets: list
    items: list
    eval_items: list
    observations: Observations
    injection: InjectionResult | None


def prepare_run(cfg: ExperimentConfig, seed: int) -> RunContext:
    model = build_model(replace(cfg.model, seed=seed))
    images = gen_synthetic_images(cfg.num_images, seed,
                                  image_size=cfg.model.image_size)
    prompt_sets = gen_prompts(images, seed)
    injection = None
    if cfg.outliers is not None:
        # inject before observing: calibration must face the heavy tails
        injection = inject_outliers(model, cfg.outliers, images, prompt_sets)
    eval_images = gen_synthetic_images(cfg.eval_images, seed,
                                       image_size=cfg.model.image_size,
                                       stream="eval-data")
    eval_prompts = gen_prompts(eval_images, seed, stream="eval-prompts")
    observations = collect_observations(model, images, prompt_sets)
    return RunContext(seed=seed, model=model, images=images,
                      prompt_sets=prompt_sets,
                      items=list(zip(images, prompt_sets)),
                      eval_items=list(zip(eval_images, eval_prompts)),
                      observations=observations, injection=injection)


def qk_module_dists(observations: Observations, env: QuantEnv, act_bits: int,
                    theta: float) -> dict:
    """Focus distance per attention module under an env's activation bounds.

    Replays each module's first-sample attention with fake-quantized QK
    activations (weights stay full precision), so the number isolates what
    the chosen clipping ranges do to the module's perception.
    """
    out = {}
    for mod in sorted(observations.attn_ctx):
        ctx = observations.attn_ctx[mod]
        assign = {}
        for kind in QK_KINDS:
            qp = env.act_params[ctx.qk_hook(kind)]
            lo, up = qp.effective_bounds()
            assign[kind] = (float(lo), float(up))
        a_w_q = ctx.attention_weights(assign, act_bits)
        out[mod] = dist_pcc(ctx.a_w_fp, a_w_q, theta)
    return out


def _clip_range_summary(env: QuantEnv) -> dict:
    ranges = {}
    for hook, qp in env.act_params.items():
        lo, up = qp.effective_bounds()
        ranges[hook] = [float(lo), float(up)]
    for hook, qp in env.weight_params.items():
        lo, up = qp.effective_bounds()
        # per-channel arrays summarized by their extremes
        ranges[hook] = [float(np.min(lo)), float(np.max(up))]
    return ranges


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def execute_run(ctx: RunContext, cfg: ExperimentConfig, method: str,
                bits: str, theta: float | None = None,
                recon: str | None = None,
                granularity: str | None = None) -> dict:
    """Calibrate, optionally reconstruct, evaluate; one report record."""
    t0 = time.time()
    weight_bits, act_bits = parse_bits(bits)
    theta_used = cfg.theta if theta is None else theta
    recon_mode = cfg.recon if recon is None else recon
    gran = cfg.granularity if granularity is None else granularity

    policy = policy_for(method, weight_bits, act_bits, theta_used)
    result = calibrate_model(ctx.model, ctx.images, ctx.prompt_sets, policy,
                             observations=ctx.observations)
    unit_records = []
    if recon_mode != "none":
        rcfg = ReconConfig(granularity=gran,
                           objective="par" if recon_mode == "par" else "local",
                           iter_scale=cfg.iter_scale,
                           drop_prob=cfg.drop_prob, seed=ctx.seed)
        unit_records = run_reconstruction(ctx.model, ctx.items, result.env,
                                          rcfg)
    agree = evaluate_agreement(ctx.model, QuantizedModel(ctx.model, result.env),
                               ctx.eval_items)
    dists = qk_module_dists(ctx.observations, result.env, act_bits, theta_used)
    record = {
        "seed": ctx.seed,
        "method": method,
        "bits": bits,
        "theta": theta_used if method == "pcc" else None,
        "recon": recon_mode,
        "granularity": gran if recon_mode != "none" else None,
        "mask_iou": agree["mask_iou"],
        "per_item_iou": agree["per_item_iou"],
        "hybrid_mse_per_stage": agree["hybrid_mse_per_stage"],
        "dist_pcc": dists,
        "dist_pcc_mean": float(np.mean(list(dists.values()))),
        "clip_ranges": _clip_range_summary(result.env),
        "outlier_ratio": ({h: r["ratio"] for h, r in ctx.injection.records.items()}
                          if ctx.injection else None),
        "recon_units": unit_records,
        "runtime_s": time.time() - t0,
    }
    return _jsonable(record)


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def _experiment_seed_records(cfg: ExperimentConfig, seed: int) -> list:
    ctx = prepare_run(cfg, seed)
    return [execute_run(ctx, cfg, method, bits)
            for bits in cfg.bits for method in cfg.methods]


def _theta_seed_records(cfg: ExperimentConfig, seed: int, thetas: list) -> list:
    ctx = prepare_run(cfg, seed)
    records = []
    for bits in cfg.bits:
        # value-metric baseline first, then the focus metric across the grid
        records.append(execute_run(ctx, cfg, "mse", bits))
        for theta in thetas:
            records.append(execute_run(ctx, cfg, "pcc", bits, theta=theta))
    return records


def _granularity_seed_records(cfg: ExperimentConfig, seed: int) -> list:
    ctx = prepare_run(cfg, seed)
    records = []
    for bits in cfg.bits:
        for objective in ("local", "par"):
            for gran in ("per-layer", "per-stage"):
                for init in ("mse", "pcc"):
                    rec = execute_run(ctx, cfg, init, bits, recon=objective,
                                      granularity=gran)
                    rec["init"] = init
                    records.append(rec)
    return records


_SEED_DRIVERS = {
    "experiment": _experiment_seed_records,
    "sweep-theta": _theta_seed_records,
    "sweep-granularity": _granularity_seed_records,
}


def _seed_task(args):
    kind, cfg, seed, extra = args
    driver = _SEED_DRIVERS[kind]
    return driver(cfg, seed, *extra)


def _run_seeds(kind: str, cfg: ExperimentConfig, extra: tuple = ()) -> dict:
    tasks = [(kind, cfg, seed, extra) for seed in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_seed = list(pool.map(_seed_task, tasks))
    else:
        per_seed = [_seed_task(t) for t in tasks]
    records = [r for chunk in per_seed for r in chunk]
    records.sort(key=lambda r: (r["seed"], r["method"], r["bits"],
                                r.get("theta") if r.get("theta") is not None
                                else -1.0,
                                r.get("recon") or "", r.get("granularity") or ""))
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config_to_dict(cfg),
        "records": records,
    }
    if cfg.out:
        emit_report(report, "json", cfg.out)
    return report


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline per (seed, method, bits): build, inject, calibrate,
    optionally reconstruct, evaluate. Returns the report dict."""
    return _run_seeds("experiment", cfg)


def sweep_theta(cfg: ExperimentConfig, thetas: list | None = None) -> dict:
    """Focus-threshold sweep: one record per theta per seed plus an MSE
    baseline record per seed, for each bit setting."""
    grid = list(cfg.theta_grid) if thetas is None else list(thetas)
    if not grid:
        raise ConfigError("theta sweep needs a non-empty grid")
    for t in grid:
        if not 0.0 < t < 1.0:
            raise ConfigError("theta grid values must lie in (0, 1)")
    return _run_seeds("sweep-theta", cfg, (grid,))


def sweep_granularity(cfg: ExperimentConfig) -> dict:
    """Reconstruction ablation: {local, par} x {per-layer, per-stage} x
    {mse, pcc} initialization, mirroring the paper-style 2x2(+init) table."""
    return _run_seeds("sweep-granularity", cfg)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

# fixed CSV schema; one row per record, blanks where a field does not apply
CSV_COLUMNS = [
    "kind",            # experiment | sweep-theta | sweep-granularity
    "seed",            # run seed
    "method",          # minmax | mse | pcc (sweep-granularity: the init)
    "bits",            # WxAy
    "theta",           # focus threshold (pcc records only)
    "recon",           # none | local | par
    "granularity",     # per-stage | per-layer (reconstruction runs only)
    "mask_iou",        # mean mask agreement vs the FP model
    "dist_pcc_mean",   # mean focus distance across attention modules
    "hybrid_mse_final",  # hybrid-token MSE at the last stage boundary
    "runtime_s",       # wall time for the record
]


def report_to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in report["records"]:
        per_stage = rec.get("hybrid_mse_per_stage") or []
        row = {
            "kind": report.get("kind", ""),
            "seed": rec.get("seed", ""),
            "method": rec.get("method", ""),
            "bits": rec.get("bits", ""),
            "theta": rec.get("theta"),
            "recon": rec.get("recon", ""),
            "granularity": rec.get("granularity"),
            "mask_iou": rec.get("mask_iou", ""),
            "dist_pcc_mean": rec.get("dist_pcc_mean", ""),
            "hybrid_mse_final": per_stage[-1] if per_stage else "",
            "runtime_s": rec.get("runtime_s", ""),
        }
        writer.writerow(["" if row[c] is None else row[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def emit_report(report: dict, fmt: str, path: str):
    """Serialize a report; identical content yields identical bytes."""
    if fmt == "json":
        text = report_to_json(report)
    elif fmt == "csv":
        text = report_to_csv(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    with open(path, "w") as f:
        f.write(text)


_VOLATILE_KEYS = ("runtime_s", "eval_seconds")


def comparable_bytes(report: dict) -> bytes:
    """Canonical encoding with wall-time fields stripped, for determinism
    checks: two runs of the same config and seed must agree on this."""
    def strip(obj):
        if isinstance(obj, dict):
            return {k: strip(v) for k, v in obj.items()
                    if k not in _VOLATILE_KEYS}
        if isinstance(obj, list):
            return [strip(v) for v in obj]
        return obj

    return json.dumps(strip(report), sort_keys=True).encode()
