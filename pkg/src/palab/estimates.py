"""Monte Carlo point estimates with standard errors.

Every estimator in this package reports a value together with its standard
error; bare point estimates are not emitted anywhere. This module holds the
small shared record type and the aggregation helpers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MCEstimate:
    """A Monte Carlo estimate: point value, standard error, sample count.

    ``se`` is the standard error of ``value`` as an estimator of the target
    expectation, under whatever sampling scheme produced it (per-agent scatter
    within one ensemble, or scatter across independent replications — the
    producing function documents which).
    """

    value: float
    se: float
    n_samples: int

    def interval(self, width: float = 3.0) -> tuple[float, float]:
        """Symmetric ``value ± width·se`` interval (default 3 standard errors)."""
        return (self.value - width * self.se, self.value + width * self.se)

    def __float__(self) -> float:
        return float(self.value)


def mean_se(samples: np.ndarray) -> MCEstimate:
    """Sample mean with its standard error std/sqrt(m).

    A single sample yields se = 0 (there is no scatter to estimate); callers
    that need a real error bar must supply replications.
    """
    arr = np.asarray(samples, dtype=float).ravel()
    m = arr.size
    if m == 0:
        raise ValueError("mean_se needs at least one sample")
    value = float(arr.mean())
    se = float(arr.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return MCEstimate(value, se, m)


def variance_se(samples: np.ndarray) -> MCEstimate:
    """Unbiased sample variance with the usual large-sample standard error.

    SE uses the asymptotic formula sqrt((m4 - var^2·(m-3)/(m-1)) / m), which
    reduces to var·sqrt(2/(m-1)) in the Gaussian case.
    """
    arr = np.asarray(samples, dtype=float).ravel()
    m = arr.size
    if m < 2:
        raise ValueError("variance_se needs at least two samples")
    var = float(arr.var(ddof=1))
    centered = arr - arr.mean()
    m4 = float(np.mean(centered**4))
    inner = m4 - var**2 * (m - 3) / (m - 1)
    se = float(np.sqrt(max(inner, 0.0) / m))
    return MCEstimate(var, se, m)
