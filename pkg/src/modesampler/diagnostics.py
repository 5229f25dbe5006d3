"""Convergence diagnostics: relative errors of mean and covariance,
running moment accumulators with exact merging, the pooled-estimate
decomposition of tagged samples, and the time-stamped diagnostics series.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ZeroDenominatorError(ValueError):
    """Reference moments sum to zero; use the absolute-error fallback and
    flag it in the output."""


def rem(mu_hat, mu_star) -> float:
    """Relative error of mean: sum_d |mu_hat_d - mu_star_d| / sum_d mu_star_d.

    The denominator is the signed sum, taken as defined; it must be nonzero.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_star = np.asarray(mu_star, dtype=float)
    denom = float(np.sum(mu_star))
    if denom == 0.0:
        raise ZeroDenominatorError(
            "sum of reference means is zero; report mean absolute error instead")
    return float(np.sum(np.abs(mu_hat - mu_star))) / denom


def recov(sigma_hat, sigma_star) -> float:
    """Relative error of covariance: sum_ij |diff_ij| / sum_ij sigma_star_ij."""
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    sigma_star = np.asarray(sigma_star, dtype=float)
    denom = float(np.sum(sigma_star))
    if denom == 0.0:
        raise ZeroDenominatorError(
            "sum of reference covariances is zero; report mean absolute error instead")
    return float(np.sum(np.abs(sigma_hat - sigma_star))) / denom


def rem_with_fallback(mu_hat, mu_star) -> tuple[float, bool]:
    """rem, or (mean absolute error, flagged=True) on a zero denominator."""
    try:
        return rem(mu_hat, mu_star), False
    except ZeroDenominatorError:
        mu_hat = np.asarray(mu_hat, dtype=float)
        mu_star = np.asarray(mu_star, dtype=float)
        return float(np.mean(np.abs(mu_hat - mu_star))), True


def recov_with_fallback(sigma_hat, sigma_star) -> tuple[float, bool]:
    try:
        return recov(sigma_hat, sigma_star), False
    except ZeroDenominatorError:
        sigma_hat = np.asarray(sigma_hat, dtype=float)
        sigma_star = np.asarray(sigma_star, dtype=float)
        return float(np.mean(np.abs(sigma_hat - sigma_star))), True


def pooled_mean(part1: tuple[int, np.ndarray], part2: tuple[int, np.ndarray]
                ) -> np.ndarray:
    """Sample-size-weighted mean of two partitions; equals the mean of the
    concatenated samples exactly."""
    n1, m1 = part1
    n2, m2 = part2
    if n1 + n2 < 1:
        raise ValueError("both partitions are empty")
    if n1 == 0:
        return np.asarray(m2, dtype=float)
    if n2 == 0:
        return np.asarray(m1, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    return (n1 * m1 + n2 * m2) / (n1 + n2)


class RunningMoments:
    """Streaming mean/covariance via counts, sums, and outer-product sums.

    Merging is exact (associative, order independent up to roundoff), which
    lets per-chain accumulators combine at reporting time.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.sum = np.zeros(dim)
        self.outer = np.zeros((dim, dim))

    def push(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        self.sum += x
        self.outer += np.outer(x, x)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        out = RunningMoments(self.dim)
        out.count = self.count + other.count
        out.sum = self.sum + other.sum
        out.outer = self.outer + other.outer
        return out

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples")
        return self.sum / self.count

    @property
    def covariance(self) -> np.ndarray:
        if self.count < 2:
            raise ValueError("need at least two samples for covariance")
        mu = self.mean
        return (self.outer - self.count * np.outer(mu, mu)) / (self.count - 1)


@dataclass
class DiagnosticsRecord:
    t_seconds: float
    rem: float
    recov: float
    rem_window: float
    n_bfgs: int
    modes_found: int
    flagged: bool = False


class DiagnosticsSeries:
    """Time-stamped REM/RECOV/window-REM records with strictly increasing
    timestamps, serialized to the documented CSV schema."""

    CSV_HEADER = "t_seconds,rem,recov,rem_window1000,n_bfgs,modes_found"

    def __init__(self):
        self.records: list[DiagnosticsRecord] = []

    def add(self, record: DiagnosticsRecord) -> None:
        if self.records and record.t_seconds <= self.records[-1].t_seconds:
            raise ValueError("wall times must be strictly increasing")
        for v in (record.t_seconds, record.rem, record.recov, record.rem_window):
            if not np.isfinite(v):
                raise ValueError("diagnostics entries must be finite")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path) -> None:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.t_seconds:.9g},{r.rem:.9g},{r.recov:.9g},"
                         f"{r.rem_window:.9g},{r.n_bfgs},{r.modes_found}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


class PooledDiagnostics:
    """Pooled-across-chains accumulator feeding a DiagnosticsSeries.

    Maintains full-run moments, a trailing window of the most recent 1000
    pooled samples, and the per-registry-size partition used by the bias
    report.
    """

    def __init__(self, dim: int, reference: Optional[tuple] = None,
                 window: int = 1000):
        self.moments = RunningMoments(dim)
        self.window: deque = deque(maxlen=window)
        self.reference = reference
        self.flagged = False

    def push(self, x) -> None:
        self.moments.push(x)
        self.window.append(np.array(x, dtype=float))

    def snapshot(self, t_seconds: float, n_bfgs: int, modes_found: int
                 ) -> Optional[DiagnosticsRecord]:
        if self.reference is None or self.moments.count < 2:
            return None
        mu_star, sigma_star = self.reference
        rem_v, f1 = rem_with_fallback(self.moments.mean, mu_star)
        recov_v, f2 = recov_with_fallback(self.moments.covariance, sigma_star)
        win = np.mean(np.asarray(self.window), axis=0)
        win_v, f3 = rem_with_fallback(win, mu_star)
        flagged = f1 or f2 or f3
        self.flagged = self.flagged or flagged
        return DiagnosticsRecord(t_seconds, rem_v, recov_v, win_v,
                                 n_bfgs, modes_found, flagged)


@dataclass
class BiasReport:
    """REM/RECOV computed three ways over registry-size-tagged samples:
    pooled, full-registry-only, and the early (k < K) contribution."""

    pooled_rem: float
    pooled_recov: float
    final_rem: Optional[float]
    final_recov: Optional[float]
    early_rem: Optional[float]
    early_recov: Optional[float]
    n_early: int
    n_final: int
    early_fraction: float
    flagged: bool = False


def bias_report(samples: np.ndarray, tags: np.ndarray, mu_star, sigma_star,
                full_size: Optional[int] = None) -> BiasReport:
    """Partition tagged samples into before/after-all-modes-found segments
    and quantify the early-sampling contribution to the pooled estimate."""
    samples = np.asarray(samples, dtype=float)
    tags = np.asarray(tags)
    if samples.shape[0] != tags.shape[0] or samples.shape[0] == 0:
        raise ValueError("samples and tags must align and be non-empty")
    if full_size is None:
        full_size = int(tags.max())
    flagged = False

    def both(chunk):
        nonlocal flagged
        if chunk.shape[0] < 2:
            return None, None
        r, f1 = rem_with_fallback(chunk.mean(axis=0), mu_star)
        c, f2 = recov_with_fallback(np.cov(chunk, rowvar=False), sigma_star)
        flagged = flagged or f1 or f2
        return r, c

    pooled_r, pooled_c = both(samples)
    final = samples[tags == full_size]
    early = samples[tags < full_size]
    final_r, final_c = both(final)
    early_r, early_c = both(early)
    return BiasReport(pooled_rem=pooled_r, pooled_recov=pooled_c,
                      final_rem=final_r, final_recov=final_c,
                      early_rem=early_r, early_recov=early_c,
                      n_early=int(early.shape[0]), n_final=int(final.shape[0]),
                      early_fraction=early.shape[0] / samples.shape[0],
                      flagged=flagged)
