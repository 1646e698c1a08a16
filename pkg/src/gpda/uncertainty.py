"""Prediction-uncertainty metrics and correct-vs-incorrect cohort reports.

For the Bayesian classifier, certainty is the separation between the two
largest latent-score posteriors N(mu_j*, sigma_j*^2) and N(mu_j+, sigma_j+^2):
measured either by their Bhattacharyya distance or by a Bayes error rate.
Point-estimate baselines get the Bhattacharyya pseudo-distance, the log-ratio
of their two largest softmax probabilities.

``bayes_error`` ships in two modes.  ``as_written`` plugs the normalized
separation D = (mu* - mu+) / sqrt((sigma*^2 + sigma+^2)/2) into the two-tail
rate 0.5 * (Phi((mu+ - D)/sigma+) + Phi((D - mu*)/sigma*)); because that D is
dimensionless, the rate tends to 0.25 (not 0) for well-separated unit-variance
posteriors.  ``midpoint`` instead uses the equal-cost Gaussian decision
threshold D = (sigma+ mu* + sigma* mu+) / (sigma* + sigma+), under which the
rate vanishes with growing separation.  Default is ``as_written``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurenet import FeatureNet, features
from .gp_head import VariationalPosterior, moments_batch

BAYES_ERROR_MODES = ("as_written", "midpoint")


def _norm_cdf(x: float) -> float:
    # complementary error function keeps full double precision in the tails
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def bhattacharyya(mu1: float, sigma1: float, mu2: float, sigma2: float) -> float:
    """Bhattacharyya distance between two univariate Gaussians (>= 0, symmetric)."""
    if sigma1 <= 0 or sigma2 <= 0:
        raise ValueError("standard deviations must be positive")
    v1, v2 = sigma1 * sigma1, sigma2 * sigma2
    log_term = 0.25 * math.log(0.25 * (v1 / v2 + v2 / v1 + 2.0))
    mean_term = 0.25 * (mu1 - mu2) ** 2 / (v1 + v2)
    return log_term + mean_term


def bayes_error(
    mu_star: float,
    sigma_star: float,
    mu_dag: float,
    sigma_dag: float,
    mode: str = "as_written",
) -> float:
    """Two-tail misclassification rate between the top two score posteriors."""
    if sigma_star <= 0 or sigma_dag <= 0:
        raise ValueError("standard deviations must be positive")
    if mu_star < mu_dag:
        raise ValueError("mu_star must be the larger mean")
    if mode == "as_written":
        threshold = (mu_star - mu_dag) / math.sqrt((sigma_star**2 + sigma_dag**2) / 2.0)
    elif mode == "midpoint":
        threshold = (sigma_dag * mu_star + sigma_star * mu_dag) / (sigma_star + sigma_dag)
    else:
        raise ValueError(f"mode must be one of {BAYES_ERROR_MODES}, got {mode!r}")
    return 0.5 * (
        _norm_cdf((mu_dag - threshold) / sigma_dag) + _norm_cdf((threshold - mu_star) / sigma_star)
    )


def bpd(class_probabilities: np.ndarray) -> float:
    """Log-ratio of the two largest class probabilities (pseudo-distance, >= 0)."""
    p = np.asarray(class_probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("need a probability vector with at least two entries")
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1 within 1e-9")
    top_two = np.sort(p)[-2:]
    if top_two[0] <= 0:
        raise ValueError("the two largest probabilities must be strictly positive")
    return float(np.log(top_two[1]) - np.log(top_two[0]))


# ---------------------------------------------------------------------------
# Cohort reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintyRecord:
    sample_id: int
    pred: int
    runner_up: int
    true_label: int | None
    correct: bool | None
    bd: float | None
    bayes_err: float | None
    bpd: float | None


@dataclass(frozen=True)
class HistogramTable:
    """Fixed-width bins with separate counts for the two cohorts."""

    bin_lo: np.ndarray
    bin_hi: np.ndarray
    count_correct: np.ndarray
    count_incorrect: np.ndarray

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count_correct,count_incorrect"]
        for lo, hi, c, i in zip(self.bin_lo, self.bin_hi, self.count_correct, self.count_incorrect):
            lines.append(f"{lo!r},{hi!r},{int(c)},{int(i)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _cohort_histogram(
    values: np.ndarray, correct: np.ndarray, bins: int = 50
) -> HistogramTable:
    """50 uniform bins over [0, 99th pooled percentile]; overflow lands in the last bin."""
    hi = float(np.percentile(values, 99.0)) if values.size else 1.0
    if hi <= 0:
        hi = 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    clipped = np.minimum(values, np.nextafter(hi, 0.0))
    idx = np.clip(np.digitize(clipped, edges) - 1, 0, bins - 1)
    count_correct = np.bincount(idx[correct], minlength=bins)
    count_incorrect = np.bincount(idx[~correct], minlength=bins)
    return HistogramTable(edges[:-1], edges[1:], count_correct, count_incorrect)


@dataclass(frozen=True)
class CohortReport:
    records: list[UncertaintyRecord]
    bd_hist: HistogramTable | None
    bayes_hist: HistogramTable | None
    bpd_hist: HistogramTable | None

    def records_csv(self) -> str:
        def cell(x) -> str:
            if x is None:
                return ""
            if isinstance(x, bool):
                return str(int(x))
            if isinstance(x, float):
                return repr(x)
            return str(x)

        lines = ["id,pred,runner_up,true,correct,bd,bayes_err,bpd"]
        for r in self.records:
            lines.append(
                ",".join(
                    cell(x)
                    for x in (
                        r.sample_id,
                        r.pred,
                        r.runner_up,
                        r.true_label,
                        r.correct,
                        r.bd,
                        r.bayes_err,
                        r.bpd,
                    )
                )
            )
        return "\n".join(lines) + "\n"

    def write_records_csv(self, path) -> None:
        Path(path).write_text(self.records_csv(), encoding="utf-8")


def _top_two(mu_row: np.ndarray) -> tuple[int, int]:
    j_star = int(np.argmax(mu_row))
    masked = mu_row.copy()
    masked[j_star] = -np.inf
    return j_star, int(np.argmax(masked))


def cohort_report(
    net: FeatureNet,
    q: VariationalPosterior,
    x: np.ndarray,
    y: np.ndarray,
    mode: str = "as_written",
    bins: int = 50,
) -> CohortReport:
    """Per-sample uncertainty records plus cohort histograms on a labelled set."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty labelled set")
    mu, sigma = moments_batch(q, features(net, x))
    records = []
    bd_values = np.empty(x.shape[0])
    bayes_values = np.empty(x.shape[0])
    correct = np.empty(x.shape[0], dtype=bool)
    for i in range(x.shape[0]):
        j_star, j_dag = _top_two(mu[i])
        bd_values[i] = bhattacharyya(mu[i, j_star], sigma[i, j_star], mu[i, j_dag], sigma[i, j_dag])
        bayes_values[i] = bayes_error(
            mu[i, j_star], sigma[i, j_star], mu[i, j_dag], sigma[i, j_dag], mode
        )
        correct[i] = j_star == int(y[i])
        records.append(
            UncertaintyRecord(
                sample_id=i,
                pred=j_star,
                runner_up=j_dag,
                true_label=int(y[i]),
                correct=bool(correct[i]),
                bd=float(bd_values[i]),
                bayes_err=float(bayes_values[i]),
                bpd=None,
            )
        )
    return CohortReport(
        records=records,
        bd_hist=_cohort_histogram(bd_values, correct, bins),
        bayes_hist=_cohort_histogram(bayes_values, correct, bins),
        bpd_hist=None,
    )


def bpd_cohort_report(
    probabilities: np.ndarray, y: np.ndarray, bins: int = 50
) -> CohortReport:
    """Pseudo-distance records for a point-estimate model's (n, K) probabilities."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(y)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("need a nonempty (n, K) probability array")
    records = []
    values = np.empty(p.shape[0])
    correct = np.empty(p.shape[0], dtype=bool)
    for i in range(p.shape[0]):
        j_star, j_dag = _top_two(p[i])
        values[i] = bpd(p[i])
        correct[i] = j_star == int(y[i])
        records.append(
            UncertaintyRecord(
                sample_id=i,
                pred=j_star,
                runner_up=j_dag,
                true_label=int(y[i]),
                correct=bool(correct[i]),
                bd=None,
                bayes_err=None,
                bpd=float(values[i]),
            )
        )
    return CohortReport(
        records=records,
        bd_hist=None,
        bayes_hist=None,
        bpd_hist=_cohort_histogram(values, correct, bins),
    )
