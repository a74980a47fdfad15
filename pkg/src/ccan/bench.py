"""Scaling verification: counted MACs and wall time versus token count.

The aggregator's cost is affine in the number of input tokens N at
fixed config (every N-dependent term is a cross-attention projection or
score product), while a plain self-attention aggregator pays an N^2
attention term. ``count_macs`` enumerates exactly the matrix products
the forward pass executes, so an instrumented run must agree with it;
wall times are advisory medians.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import FeatureBag
from .errors import ConfigError
from .model import BaselineConfig, BaselineModel, CCANModel


def _cross_block_macs(m, n, d):
    # q/k/v/out projections + attention products + 4x MLP
    return 10 * m * d * d + 2 * n * d * d + 2 * m * n * d


def _self_block_macs(m, d):
    return 12 * m * d * d + 2 * m * m * d


def count_macs(config, n_tokens):
    """Closed-form multiply-accumulate count of one eval-mode forward."""
    config.validate()
    d = config.d_latent
    macs = n_tokens * config.d_encoded * d  # input projection
    ctx = n_tokens
    for m in config.latent_counts():
        for _ in range(config.block_repeats):
            macs += _cross_block_macs(m, ctx, d)
            macs += config.self_layers * _self_block_macs(m, d)
        macs += _cross_block_macs(m + 1, n_tokens, d)  # final cross over inputs
        macs += _self_block_macs(m + 1, d)
        macs += d * d + d * config.out_units  # head MLP on the class row
        ctx = m
    return macs


def count_baseline_macs(config, n_tokens):
    """MACs of the full-self-attention reference, with the N^2 term split out."""
    d = config.d_latent
    attention = 2 * n_tokens * n_tokens * d
    total = (
        n_tokens * config.d_feature * d  # input projection
        + 12 * n_tokens * d * d
        + attention
        + d * config.out_units
    )
    return {"total": total, "attention": attention}


def make_bench_bag(n_tokens, d_feature, seed=0):
    side = int(np.ceil(np.sqrt(n_tokens)))
    rng = np.random.default_rng(seed)
    cells = np.arange(n_tokens)
    return FeatureBag(
        bag_id=f"bench{n_tokens}",
        patient_id="bench",
        label=0,
        tokens=rng.standard_normal((n_tokens, d_feature)).astype(np.float32),
        rows=cells // side,
        cols=cells % side,
        rows_total=side,
        cols_total=side,
    )


@dataclass
class BenchRow:
    model: str
    n_tokens: int
    wall_ms: float
    macs: int
    peak_bytes: int
    ok: bool


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float


def linear_fit(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(slope=float(slope), intercept=float(intercept), r2=r2)


@dataclass
class ScalingReport:
    rows: list  # of BenchRow
    time_fit: LinearFit  # aggregator wall time vs N
    macs_fit: LinearFit  # aggregator MACs vs N
    baseline_quad_ratio: float  # baseline attention MACs(2N)/MACs(N)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "n_tokens", "wall_ms", "macs", "peak_bytes", "ok"])
            for r in self.rows:
                writer.writerow([r.model, r.n_tokens, repr(r.wall_ms), r.macs, r.peak_bytes, int(r.ok)])

    def summary(self):
        lines = [
            f"{'model':<22}{'N':>7}{'median ms':>12}{'MACs':>16}{'peak MB':>10}",
        ]
        for r in self.rows:
            status = "" if r.ok else "  FAILED"
            lines.append(
                f"{r.model:<22}{r.n_tokens:>7}{r.wall_ms:>12.2f}{r.macs:>16}"
                f"{r.peak_bytes / 1e6:>10.1f}{status}"
            )
        lines.append(
            f"aggregator time vs N: slope={self.time_fit.slope:.4g} ms/token, R^2={self.time_fit.r2:.5f}"
        )
        lines.append(f"aggregator MACs vs N: R^2={self.macs_fit.r2:.6f}")
        lines.append(f"baseline attention MACs(2N)/MACs(N) = {self.baseline_quad_ratio:.2f}")
        return "\n".join(lines)


def _timed_forwards(model, bag, repeats, warmup):
    times = []
    peak = 0
    with ag.no_grad():
        for _ in range(warmup):
            model.forward(bag, train_mode=False)
        for _ in range(repeats):
            with ag.op_probe() as probe:
                t0 = time.perf_counter()
                model.forward(bag, train_mode=False)
                times.append((time.perf_counter() - t0) * 1000.0)
            peak = max(peak, probe.tensor_bytes)
    return float(np.median(times)), peak


def bench_scaling(config, ns, repeats=7, warmup=2, seed=0, include_baseline=True, log=None):
    """Time eval forwards across token counts and fit the scaling curves."""
    ns = list(ns)
    if repeats < 5:
        raise ConfigError(f"need at least 5 repeats, got {repeats}")
    if not ns or any(a >= b for a, b in zip(ns, ns[1:])):
        raise ConfigError(f"token counts must be strictly increasing, got {ns}")
    model = CCANModel(config)
    baseline = None
    if include_baseline:
        baseline = BaselineModel(
            BaselineConfig(
                kind="full-self-attention",
                d_feature=config.d_feature,
                d_latent=config.d_latent,
                num_classes=config.num_classes,
                scale_mode=config.scale_mode,
                heads=config.heads,
                seed=config.seed,
            )
        )
    rows = []
    for n in ns:
        bag = make_bench_bag(n, config.d_feature, seed=seed)
        try:
            wall, peak = _timed_forwards(model, bag, repeats, warmup)
            rows.append(BenchRow("ccan", n, wall, count_macs(config, n), peak, True))
        except MemoryError:
            rows.append(BenchRow("ccan", n, float("nan"), count_macs(config, n), 0, False))
        if baseline is not None:
            try:
                wall, peak = _timed_forwards(baseline, bag, repeats, warmup)
                rows.append(
                    BenchRow("full-self-attention", n, wall, count_baseline_macs(config, n)["total"], peak, True)
                )
            except MemoryError:
                rows.append(
                    BenchRow("full-self-attention", n, float("nan"), count_baseline_macs(config, n)["total"], 0, False)
                )
        if log is not None:
            log(f"N={n}: " + ", ".join(f"{r.model}={r.wall_ms:.1f}ms" for r in rows[-2 if baseline else -1 :]))
    ccan_ok = [r for r in rows if r.model == "ccan" and r.ok]
    time_fit = linear_fit([r.n_tokens for r in ccan_ok], [r.wall_ms for r in ccan_ok])
    macs_fit = linear_fit([r.n_tokens for r in ccan_ok], [r.macs for r in ccan_ok])
    n0 = ns[0]
    ratio = count_baseline_macs(config, 2 * n0)["attention"] / count_baseline_macs(config, n0)["attention"]
    return ScalingReport(rows=rows, time_fit=time_fit, macs_fit=macs_fit, baseline_quad_ratio=ratio)
