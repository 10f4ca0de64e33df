"""Run configuration, synthetic data generators, and the full pipeline.

A run permutes the inputs (optional), builds the KV pyramid, estimates
block importance, assigns a multi-level mask, optionally caps it by
intra-block similarity and a causal pre-pass, then executes both the
streaming pass and the tiled schedule and scores them against the dense
oracle on the same (permuted) inputs.
"""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, fields

import numpy as np

from .attention import causal_full_attention, full_attention, psa_streaming
from .blocks import BlockLayout, build_pyramid, make_layout
from .errors import NumericError, ValidationError
from .importance import (SamplerConfig, adjacent_key_similarity,
                         importance_antidiagonal, importance_sampled)
from .linalg import relative_error
from .mask import (PRESET_CUTPOINTS, LevelThresholds, QuantileCutpoints,
                   SimThresholds, assign_quantile, assign_threshold,
                   binary_mask, causal_premask, combine_mask,
                   level_cap_from_similarity, report_from_counts,
                   sparsity_report)
from .permute import apply_permutation, hilbert_order, invert_permutation
from .scheduler import build_schedule, execute_schedule, utilization

ESTIMATORS = ("sampled-max", "sampled-mean", "antidiagonal")
MASK_STRATEGIES = ("threshold", "quantile", "binary") + tuple(PRESET_CUTPOINTS)


@dataclass(frozen=True)
class RunConfig:
    """Flat key-value run description (JSON-serializable)."""

    n: int
    d: int
    b_q: int
    b_k: int
    levels: int
    estimator: str
    mask: str
    tile_len: int
    grid: tuple | None = None
    s_q: int | None = None
    s_k: int | None = None
    stride: int | None = None
    seed: int | None = None
    thresholds: tuple | None = None
    cutpoints: tuple | None = None
    tau: float | None = None
    sim_thresholds: tuple | None = None
    causal: bool = False
    num_steps: int = 1
    dense_prefix: float = 0.0
    unpermute: bool = False

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValidationError(
                f"estimator {self.estimator!r} not one of {ESTIMATORS}"
            )
        if self.mask not in MASK_STRATEGIES:
            raise ValidationError(
                f"mask strategy {self.mask!r} not one of {MASK_STRATEGIES}"
            )
        if self.estimator.startswith("sampled"):
            if self.s_q is None or self.s_k is None:
                raise ValidationError("sampled estimators need s_q and s_k")
            if self.seed is None:
                raise ValidationError("sampled estimators need an explicit seed")
        if self.estimator == "antidiagonal" and self.stride is None:
            raise ValidationError("antidiagonal estimator needs a stride")
        if self.mask == "threshold" and not self.thresholds:
            raise ValidationError("threshold strategy needs thresholds")
        if self.mask == "quantile" and not self.cutpoints:
            raise ValidationError("quantile strategy needs cutpoints")
        if self.mask == "binary" and self.tau is None:
            raise ValidationError("binary strategy needs tau")
        if self.tile_len < 1:
            raise ValidationError("tile_len must be >= 1")
        if self.num_steps < 1:
            raise ValidationError("num_steps must be >= 1")
        if not 0.0 <= self.dense_prefix <= 1.0:
            raise ValidationError("dense_prefix must lie in [0, 1]")
        if self.grid is not None:
            grid = tuple(int(g) for g in self.grid)
            if math.prod(grid) != self.n:
                raise ValidationError(
                    f"grid {grid} covers {math.prod(grid)} tokens, expected {self.n}"
                )
            object.__setattr__(self, "grid", grid)
        for name in ("thresholds", "cutpoints", "sim_thresholds"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(x) for x in val))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        missing = {"n", "d", "b_q", "b_k", "levels", "estimator", "mask",
                   "tile_len"} - set(data)
        if missing:
            raise ValidationError(f"missing config keys: {sorted(missing)}")
        data = dict(data)
        if data.get("sim_thresholds") == "off":
            data["sim_thresholds"] = None
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValidationError("config file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = list(val)
            out[f.name] = val
        return out

    def layout(self) -> BlockLayout:
        return make_layout(self.n, self.d, self.b_q, self.b_k, self.levels)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _near_square_grid(n: int) -> tuple:
    if n & (n - 1):
        raise ValidationError(
            f"cannot infer a grid for n={n}; pass one explicitly"
        )
    half = (n.bit_length() - 1) // 2
    return (1 << half, n >> half)


def _correlated_field(g0: int, g1: int, d: int, rng, base: float = 2.0,
                      step: float = 0.25) -> np.ndarray:
    """Smooth 2D field: shared mean plus independent random walks per axis.

    Grid neighbours differ by a single walk step, so adjacent-key cosine
    similarity is high along both axes; flattening is row-major.
    """
    mu = rng.normal(size=d) * base
    w0 = np.cumsum(rng.normal(size=(g0, d)) * step, axis=0)
    w1 = np.cumsum(rng.normal(size=(g1, d)) * step, axis=0)
    field = mu[None, None, :] + w0[:, None, :] + w1[None, :, :]
    return field.reshape(g0 * g1, d)


def synthesize(kind: str, n: int, d: int, seed: int, heads: int = 1,
               grid=None, dup_factor: int = 2) -> dict:
    """Generate Q/K/V test tensors; shape (n, d), or (heads, n, d) if heads > 1.

    Kinds: "gaussian" (iid normal), "correlated" (smooth 2D field per the
    random-walk construction), "duplicated" (every K/V token repeated
    ``dup_factor`` times, for pooled-bias exactness checks).
    """
    if kind not in ("gaussian", "correlated", "duplicated"):
        raise ValidationError(f"unknown synthetic kind {kind!r}")
    if n < 1 or d < 1 or heads < 1:
        raise ValidationError("n, d, heads must be positive")
    rng = np.random.default_rng(seed)

    def one_head():
        if kind == "gaussian":
            return {name: rng.normal(size=(n, d)) for name in ("q", "k", "v")}
        if kind == "correlated":
            g = tuple(int(x) for x in grid) if grid else _near_square_grid(n)
            if len(g) == 3:
                g = (g[0] * g[1], g[2])
            if len(g) != 2 or g[0] * g[1] != n:
                raise ValidationError(f"grid {g} does not cover n={n} tokens")
            return {name: _correlated_field(g[0], g[1], d, rng)
                    for name in ("q", "k", "v")}
        if dup_factor < 1 or n % dup_factor:
            raise ValidationError(
                f"dup_factor {dup_factor} must divide n={n}"
            )
        out = {"q": rng.normal(size=(n, d))}
        for name in ("k", "v"):
            base_rows = rng.normal(size=(n // dup_factor, d))
            out[name] = np.repeat(base_rows, dup_factor, axis=0)
        return out

    if heads == 1:
        return one_head()
    stacks = [one_head() for _ in range(heads)]
    return {name: np.stack([s[name] for s in stacks]) for name in ("q", "k", "v")}


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    report: dict
    output: np.ndarray  # streaming attention output, (heads, n, d) or (n, d)


def _build_mask(cfg: RunConfig, scores: np.ndarray,
                layout: BlockLayout) -> np.ndarray:
    if cfg.mask == "threshold":
        taus = LevelThresholds(cfg.thresholds)
        if len(taus) > layout.levels:
            raise ValidationError(
                f"{len(taus)} thresholds exceed {layout.levels} levels"
            )
        return assign_threshold(scores, taus)
    if cfg.mask == "binary":
        return binary_mask(scores, cfg.tau)
    points = (QuantileCutpoints(cfg.cutpoints) if cfg.mask == "quantile"
              else PRESET_CUTPOINTS[cfg.mask])
    if len(points) > layout.levels:
        raise ValidationError(
            f"{len(points)} cutpoints exceed {layout.levels} levels "
            f"(presets need levels >= 4)"
        )
    return assign_quantile(scores, points)


def _estimate(cfg: RunConfig, q, k, layout: BlockLayout) -> np.ndarray:
    if cfg.estimator == "antidiagonal":
        return importance_antidiagonal(q, k, layout, cfg.stride)
    reducer = "max" if cfg.estimator == "sampled-max" else "mean"
    sampler = SamplerConfig(s_q=cfg.s_q, s_k=cfg.s_k, seed=cfg.seed)
    return importance_sampled(q, k, layout, sampler, reducer=reducer)


@contextmanager
def _stage(name: str):
    """Tag propagating errors with the pipeline stage that raised them."""
    try:
        yield
    except (ValidationError, NumericError) as exc:
        raise type(exc)(f"[stage: {name}] {exc}") from exc


def _run_head(cfg: RunConfig, layout: BlockLayout, q, k, v) -> tuple:
    if cfg.grid is not None:
        with _stage("permutation"):
            perm = hilbert_order(cfg.grid)
            q = apply_permutation(q, perm)
            k = apply_permutation(k, perm)
            v = apply_permutation(v, perm)
    else:
        perm = None

    with _stage("pyramid"):
        pyramid = build_pyramid(k, v, layout)
    with _stage("importance"):
        scores = _estimate(cfg, q, k, layout)
    with _stage("mask"):
        mask = _build_mask(cfg, scores, layout)
    if cfg.sim_thresholds is not None:
        with _stage("similarity-cap"):
            caps = level_cap_from_similarity(
                pyramid, SimThresholds(cfg.sim_thresholds)
            )
            mask = combine_mask(mask, caps)
    if cfg.causal:
        with _stage("causal-premask"):
            mask = causal_premask(mask, layout)

    with _stage("executor"):
        stream = psa_streaming(q, pyramid, mask, causal=cfg.causal)
    with _stage("scheduler"):
        schedule = build_schedule(mask, layout, cfg.tile_len)
        tiled = execute_schedule(q, pyramid, schedule, causal=cfg.causal)
    with _stage("oracle"):
        oracle = (causal_full_attention(q, k, v) if cfg.causal
                  else full_attention(q, k, v))

    selected_rows = int(sum(
        layout.pooled_len(int(h)) for h in mask.reshape(-1) if h > 0
    ))
    util = utilization(schedule)
    if util.useful_rows != selected_rows:
        raise ValidationError(
            f"schedule covers {util.useful_rows} pooled rows, mask selects "
            f"{selected_rows}"
        )

    with _stage("error-metric"):
        head_report = {
            "relative_error": relative_error(stream.out, oracle.out),
            "schedule_relative_error": relative_error(tiled.out, oracle.out),
            "sparsity": sparsity_report(mask, levels=layout.levels).as_dict(),
            "utilization": util.as_dict(),
            "selected_pooled_rows": selected_rows,
            "skipped_rows": stream.skipped_rows,
        }

    out = stream.out
    if cfg.unpermute and perm is not None:
        out = apply_permutation(out, invert_permutation(perm))
    return head_report, out


def _steps_metadata(cfg: RunConfig, rho_bar: float) -> dict:
    dense_steps = math.ceil(cfg.dense_prefix * cfg.num_steps) \
        if cfg.dense_prefix > 0 else 0
    dense_steps = min(dense_steps, cfg.num_steps)
    modes = ["dense"] * dense_steps + ["sparse"] * (cfg.num_steps - dense_steps)
    mean_rho = (dense_steps * 1.0
                + (cfg.num_steps - dense_steps) * rho_bar) / cfg.num_steps
    return {
        "num_steps": cfg.num_steps,
        "dense_prefix": cfg.dense_prefix,
        "dense_steps": dense_steps,
        "modes": modes,
        "mean_rho_over_steps": mean_rho,
    }


def run_pipeline(cfg: RunConfig, q, k, v) -> PipelineResult:
    """Execute the configured pipeline on Q/K/V and produce a report.

    Inputs are (n, d) single-head or (heads, n, d) arrays; heads run as an
    outer loop and the report carries per-head numbers plus aggregates.
    Reports for the same config and seed are byte-identical apart from
    the wall-time field.
    """
    t0 = time.perf_counter()
    layout = cfg.layout()
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape != k.shape or k.shape != v.shape:
        raise ValidationError(
            f"Q/K/V shapes differ: {q.shape}/{k.shape}/{v.shape}"
        )
    if q.ndim == 2:
        q, k, v = q[None], k[None], v[None]
        squeeze = True
    elif q.ndim == 3:
        squeeze = False
    else:
        raise ValidationError(f"expected (n, d) or (heads, n, d), got {q.shape}")
    if q.shape[1:] != (cfg.n, cfg.d):
        raise ValidationError(
            f"tensor shape {q.shape[1:]} does not match config "
            f"({cfg.n}, {cfg.d})"
        )

    heads = q.shape[0]
    per_head = []
    outputs = []
    for h in range(heads):
        head_report, out = _run_head(cfg, layout, q[h], k[h], v[h])
        per_head.append(head_report)
        outputs.append(out)

    counts = np.sum([h["sparsity"]["level_counts"] for h in per_head], axis=0)
    total = sum(h["sparsity"]["total_entries"] for h in per_head)
    agg_sparsity = report_from_counts(counts.tolist(), total).as_dict()
    tiles = sum(h["utilization"]["tiles"] for h in per_head)
    useful = sum(h["utilization"]["useful_rows"] for h in per_head)
    capacity = sum(h["utilization"]["capacity"] for h in per_head)
    report = {
        "config": cfg.to_dict(),
        "heads": heads,
        "relative_error": float(np.mean([h["relative_error"] for h in per_head])),
        "schedule_relative_error": float(
            np.mean([h["schedule_relative_error"] for h in per_head])
        ),
        "sparsity": agg_sparsity,
        "utilization": {
            "tiles": tiles,
            "useful_rows": useful,
            "capacity": capacity,
            "utilization": useful / capacity if capacity else 1.0,
        },
        "skipped_rows": sum(h["skipped_rows"] for h in per_head),
        "per_head": per_head,
        "steps": _steps_metadata(cfg, agg_sparsity["rho_bar"]),
        "wall_time_s": time.perf_counter() - t0,
    }
    output = outputs[0] if squeeze else np.stack(outputs)
    return PipelineResult(report=report, output=output)


def report_to_json(report: dict) -> str:
    """Deterministic JSON rendering (stable key order, repr floats)."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def similarity_profile(k, max_stride: int = 8) -> list:
    """Adjacent-key similarity for strides 1..max_stride (diagnostic CSV rows).

    Multi-head input is averaged pair-weighted across heads.
    """
    k = np.asarray(k, dtype=np.float64)
    heads = k[None] if k.ndim == 2 else k
    if heads.ndim != 3:
        raise ValidationError(f"expected (n, d) or (heads, n, d), got {k.shape}")
    rows = []
    for stride in range(1, max_stride + 1):
        if stride >= heads.shape[1]:
            break
        sims = [adjacent_key_similarity(h, stride) for h in heads]
        used = sum(s.used_pairs for s in sims)
        value = (sum(s.value * s.used_pairs for s in sims) / used
                 if used else 0.0)
        rows.append({
            "stride": stride,
            "similarity": value,
            "used_pairs": used,
            "skipped_pairs": sum(s.skipped_pairs for s in sims),
        })
    return rows
