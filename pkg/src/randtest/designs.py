"""Treatment-assignment designs and the rerandomization balance criterion.

The same objects describe both the design stage (how the experiment assigned
treatment) and the permutation law of the randomization test; the engine
redraws assignments from whichever design it is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from .errors import AcceptanceTimeout, DimensionMismatch, InvalidSizes, InvariantViolation, SingularCovariance

# Candidates examined per vectorized rejection-sampling round.
_REJECTION_BATCH = 64


def _check_arms(n: int, n1: int, what: str = "units"):
    if not (2 <= n1 <= n - 2):
        raise InvalidSizes(f"need 2 <= treated {what} <= total - 2, got {n1} of {n}")


@dataclass(frozen=True)
class CompleteDesign:
    """Complete randomization: N1 of N units treated, uniformly."""

    n_units: int
    n_treated: int

    def __post_init__(self):
        _check_arms(self.n_units, self.n_treated)


@dataclass(frozen=True)
class ClusterDesign:
    """Complete randomization over M clusters, M1 treated."""

    n_clusters: int
    n_treated_clusters: int

    def __post_init__(self):
        _check_arms(self.n_clusters, self.n_treated_clusters, "clusters")


@dataclass(frozen=True, eq=False)
class StratifiedDesign:
    """Independent complete randomization inside each stratum.

    `strata` holds unit-level stratum codes 0..K-1; `sizes` holds one
    (N_k, N_k1) pair per stratum in code order.
    """

    strata: np.ndarray
    sizes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        strata = np.asarray(self.strata, dtype=np.int64)
        strata.setflags(write=False)
        object.__setattr__(self, "strata", strata)
        object.__setattr__(self, "sizes", tuple((int(a), int(b)) for a, b in self.sizes))
        counts = np.bincount(strata, minlength=len(self.sizes))
        if len(counts) != len(self.sizes):
            raise InvalidSizes("stratum codes do not match the size list")
        for k, (n_k, n_k1) in enumerate(self.sizes):
            if counts[k] != n_k:
                raise InvalidSizes(f"stratum {k} has {counts[k]} units, sizes say {n_k}")
            _check_arms(n_k, n_k1)

    @classmethod
    def from_observed(cls, strata: np.ndarray, z: np.ndarray) -> "StratifiedDesign":
        """Design whose per-stratum arm sizes are the realized ones of z."""
        strata = np.asarray(strata, dtype=np.int64)
        z = np.asarray(z)
        sizes = []
        for k in range(int(strata.max()) + 1):
            zk = z[strata == k]
            sizes.append((int(zk.shape[0]), int(zk.sum())))
        return cls(strata, tuple(sizes))


@dataclass(frozen=True, eq=False)
class RerandomizedDesign:
    """Complete randomization accepted only under the balance criterion.

    An assignment is accepted iff the Mahalanobis distance of the covariate
    mean difference, in the metric of its randomization covariance
    (N/(N1 N0)) * S2_x with the (N-1)-denominator covariance S2_x, is below
    `threshold`.
    """

    base: CompleteDesign
    threshold: float
    covariates: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (self.threshold > 0):
            raise InvariantViolation(f"threshold must be positive, got {self.threshold}")
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] != self.base.n_units or x.shape[1] < 1:
            raise DimensionMismatch("covariates must be (N, J_d) with J_d >= 1")
        if not np.all(np.isfinite(x)):
            raise InvariantViolation("design covariates must be finite")
        x = x.copy()
        x.setflags(write=False)
        object.__setattr__(self, "covariates", x)


DesignSpec = CompleteDesign | ClusterDesign | StratifiedDesign | RerandomizedDesign


@dataclass(frozen=True)
class BalanceReport:
    tau_x_hat: np.ndarray
    mahalanobis: float
    accepted: bool
    threshold: float


def draw_complete(n: int, n1: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the assignments with exactly n1 of n treated."""
    _check_arms(n, n1)
    template = np.zeros(n, dtype=np.int64)
    template[:n1] = 1
    return rng.permutation(template)


def draw_stratified(design: StratifiedDesign, rng: np.random.Generator) -> np.ndarray:
    """Independent complete randomization inside each stratum."""
    z = np.zeros(design.strata.shape[0], dtype=np.int64)
    for k, (n_k, n_k1) in enumerate(design.sizes):
        template = np.zeros(n_k, dtype=np.int64)
        template[:n_k1] = 1
        z[design.strata == k] = rng.permutation(template)
    return z


def _balance_metric(x_d: np.ndarray) -> np.ndarray:
    """(N-1)-denominator covariance of the design covariates, checked."""
    j = x_d.shape[1]
    s2 = np.cov(x_d, rowvar=False, ddof=1).reshape(j, j)
    if not np.all(np.isfinite(s2)) or np.linalg.cond(s2) > 1e12:
        raise SingularCovariance("covariate covariance matrix is singular")
    return s2


def mahalanobis(z: np.ndarray, x_d: np.ndarray, threshold: float = np.inf) -> BalanceReport:
    """Balance report for one assignment.

    tau_x_hat is the treated-minus-control covariate mean difference and the
    distance is tau_x' cov^-1 tau_x with cov = (N/(N1 N0)) * S2_x.
    """
    z = np.asarray(z)
    x_d = np.asarray(x_d, dtype=np.float64)
    if x_d.ndim == 1:
        x_d = x_d.reshape(-1, 1)
    if z.shape[0] != x_d.shape[0]:
        raise DimensionMismatch("z and covariates must have equal length")
    n = z.shape[0]
    n1 = int(z.sum())
    n0 = n - n1
    if n1 < 1 or n0 < 1:
        raise InvalidSizes("both arms must be nonempty")
    tau_x = x_d[z == 1].mean(axis=0) - x_d[z == 0].mean(axis=0)
    s2 = _balance_metric(x_d)
    cov = (n / (n1 * n0)) * s2
    try:
        w = np.linalg.solve(cov, tau_x)
    except np.linalg.LinAlgError as err:
        raise SingularCovariance(str(err)) from err
    dist = float(tau_x @ w)
    return BalanceReport(tau_x, dist, dist < threshold, threshold)


def mahalanobis_many(zmat: np.ndarray, x_d: np.ndarray) -> np.ndarray:
    """Balance distances for a batch of assignments (rows of zmat)."""
    x_d = np.asarray(x_d, dtype=np.float64)
    if x_d.ndim == 1:
        x_d = x_d.reshape(-1, 1)
    zmat = np.asarray(zmat, dtype=np.float64)
    n = x_d.shape[0]
    n1 = int(round(zmat[0].sum()))
    n0 = n - n1
    s2 = _balance_metric(x_d)
    cov = (n / (n1 * n0)) * s2
    factor = scipy.linalg.cho_factor(cov)
    col_sums = x_d.sum(axis=0)
    mean1 = (zmat @ x_d) / n1
    mean0 = (col_sums[None, :] - mean1 * n1) / n0
    tau = mean1 - mean0
    w = scipy.linalg.cho_solve(factor, tau.T).T
    return np.einsum("ij,ij->i", tau, w)


def draw_rem(
    n: int,
    n1: int,
    x_d: np.ndarray,
    a: float,
    rng: np.random.Generator,
    max_tries: int = 10**6,
) -> np.ndarray:
    """Rejection-sample a complete assignment until the criterion accepts.

    Candidates are drawn in small vectorized rounds from the same stream;
    the first acceptable candidate in draw order is returned, so the result
    is a deterministic function of the stream.
    """
    x_d = np.asarray(x_d, dtype=np.float64)
    if x_d.ndim == 1:
        x_d = x_d.reshape(-1, 1)
    _check_arms(n, n1)
    if not (a > 0):
        raise InvariantViolation(f"threshold must be positive, got {a}")
    template = np.zeros(n, dtype=np.int64)
    template[:n1] = 1
    tries = 0
    while tries < max_tries:
        batch = min(_REJECTION_BATCH, max_tries - tries)
        zmat = rng.permuted(np.tile(template, (batch, 1)), axis=1)
        dists = mahalanobis_many(zmat, x_d)
        hits = np.nonzero(dists < a)[0]
        if hits.size:
            return zmat[hits[0]].copy()
        tries += batch
    raise AcceptanceTimeout(
        f"no acceptable assignment in {tries} tries (threshold {a})",
        tries=tries,
        acceptance_rate=0.0,
    )


def draw(design: DesignSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one assignment vector from any design."""
    if isinstance(design, CompleteDesign):
        return draw_complete(design.n_units, design.n_treated, rng)
    if isinstance(design, ClusterDesign):
        return draw_complete(design.n_clusters, design.n_treated_clusters, rng)
    if isinstance(design, StratifiedDesign):
        return draw_stratified(design, rng)
    if isinstance(design, RerandomizedDesign):
        return draw_rem(
            design.base.n_units,
            design.base.n_treated,
            design.covariates,
            design.threshold,
            rng,
        )
    raise TypeError(f"unknown design {design!r}")


def assignment_count(design: DesignSpec) -> int:
    """Size of the assignment space (pre-filter upper bound for ReM)."""
    if isinstance(design, CompleteDesign):
        return math.comb(design.n_units, design.n_treated)
    if isinstance(design, ClusterDesign):
        return math.comb(design.n_clusters, design.n_treated_clusters)
    if isinstance(design, StratifiedDesign):
        total = 1
        for n_k, n_k1 in design.sizes:
            total *= math.comb(n_k, n_k1)
        return total
    if isinstance(design, RerandomizedDesign):
        return assignment_count(design.base)
    raise TypeError(f"unknown design {design!r}")


def chi2_cdf(x, k):
    """Chi-square CDF: regularized lower incomplete gamma P(k/2, x/2)."""
    return scipy.special.gammainc(np.asarray(k) / 2.0, np.asarray(x) / 2.0)[()]
