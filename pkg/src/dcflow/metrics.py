"""Free energy, KL, gradient-mapping and rate diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from .flow import FlowState, seeded_rng
from .jko import NEGATIVE_ENTROPY, RegularizerSpec
from .potentials import DCPotential
from .transport import EmpiricalMeasure, coupling_displacement_cost, w2_exact

CSV_COLUMNS = (
    "iteration",
    "free_energy",
    "free_energy_se",
    "kl",
    "kl_se",
    "grad_mapping_sq",
    "w2_to_prev",
    "wallclock_s",
)
EXACT_SUBSAMPLE = 512


class Estimate(NamedTuple):
    """Monte Carlo mean with its standard error.

    ``up_to_constant`` flags a KL whose target normalizer is unknown.
    """

    value: float
    stderr: float
    up_to_constant: bool = False


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, float)
    n = len(values)
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se


# ---------------------------------------------------------------------------
# Densities and energies
# ---------------------------------------------------------------------------


def chain_log_density(state: FlowState, base_points):
    """Pushed points and log-density of the current iterate at those points."""
    if not state.base.has_density:
        raise ValueError("density bookkeeping needs a base with a density")
    return state.push(base_points, with_log_density=True)


def eval_cloud(state: FlowState, n: int, seed: int):
    """Common-random-number evaluation cloud (points, log-densities) of the iterate."""
    if n < 2:
        raise ValueError("need at least two evaluation points")
    z = state.base.sample(n, seeded_rng(seed))
    return chain_log_density(state, z)


def kl_from_cloud(points, logp, potential: DCPotential) -> Estimate:
    """KL(mu || pi) from samples of mu with their exact log-densities."""
    log_z = potential.log_normalizer
    terms = logp + potential.value(points)
    if log_z is not None:
        terms = terms + log_z
    m, se = _mean_se(terms)
    return Estimate(m, se, log_z is None)


def _pair_terms(kernel, points) -> np.ndarray:
    """h1(x_i) = 2 mean_{j != i} k(x_i, x_j): first-order projection of the pair mean."""
    n = len(points)
    k = kernel.value(points, points)
    np.fill_diagonal(k, 0.0)
    return 2.0 * k.sum(1) / (n - 1)


def free_energy_from_cloud(points, logp, potential: DCPotential, reg: RegularizerSpec = NEGATIVE_ENTROPY) -> Estimate:
    """E F + R from samples: R = E log p (negative entropy) or the distinct-pair kernel mean."""
    f = potential.value(points)
    if reg.kind == "negative_entropy":
        if logp is None:
            raise ValueError("negative entropy needs log-densities")
        m, se = _mean_se(f + logp)
        return Estimate(m, se)
    if reg.kind == "interaction_energy":
        h1 = _pair_terms(reg.kernel, points)
        # mean of h1 / 2 is exactly the U-statistic; its linearisation is f + h1
        m, _ = _mean_se(f + 0.5 * h1)
        _, se = _mean_se(f + h1)
        return Estimate(m, se)
    return Estimate(*_mean_se(f))


def kl_estimate(state: FlowState, potential: DCPotential, n: int, seed: int) -> Estimate:
    points, logp = eval_cloud(state, n, seed)
    return kl_from_cloud(points, logp, potential)


def free_energy_estimate(
    state: FlowState, potential: DCPotential, reg: RegularizerSpec = NEGATIVE_ENTROPY, n: int = 4096, seed: int = 0
) -> Estimate:
    if reg.kind == "negative_entropy":
        points, logp = eval_cloud(state, n, seed)
    else:
        points, logp = state.sample(n, seed), None
    return free_energy_from_cloud(points, logp, potential, reg)


# ---------------------------------------------------------------------------
# Gradient mapping
# ---------------------------------------------------------------------------


class GradientMappingSeries(NamedTuple):
    """Squared gradient-mapping norms between consecutive iterates.

    ``coupled`` uses the index coupling of common-seed clouds of size n (an
    upper bound of W2^2 / eta^2); ``exact`` is the optimal assignment on the
    first ``m`` <= 512 points and ``coupled_subsample`` the index coupling on
    the same m points, so ``exact <= coupled_subsample`` always.
    """

    coupled: np.ndarray
    exact: np.ndarray
    coupled_subsample: np.ndarray


def _same_run(a: FlowState, b: FlowState) -> bool:
    return (
        a.base == b.base
        and a.eta == b.eta
        and a.scheme == b.scheme
        and (a.potential is b.potential or (a.potential.spec is not None and a.potential.spec == b.potential.spec))
    )


def check_provenance(states: Sequence[FlowState]):
    for a, b in zip(states, states[1:]):
        if not _same_run(a, b):
            raise ValueError("states come from different runs (base, eta, scheme or potential differ)")
        if b.iteration != a.iteration + 1 or any(p is not q and not np.array_equal(p.params, q.params) for p, q in zip(a.maps, b.maps)):
            raise ValueError(f"state {b.iteration} does not extend state {a.iteration} by one map")


def gradient_mapping_pair(x_prev, x_next, eta: float, m: int = EXACT_SUBSAMPLE):
    """(coupled, exact, coupled_subsample) squared gradient-mapping estimates for one pair of clouds."""
    coupled = coupling_displacement_cost(x_prev, x_next) / eta**2
    m = min(m, len(x_prev))
    sub_a, sub_b = x_prev[:m], x_next[:m]
    exact = w2_exact(sub_a, sub_b).cost / eta**2
    return coupled, exact, coupling_displacement_cost(sub_a, sub_b) / eta**2


def gradient_mapping_series(states: Sequence[FlowState], n: int, seed: int, m: int = EXACT_SUBSAMPLE) -> GradientMappingSeries:
    """||G_eta(mu_k)||^2 = W2^2(mu_k, mu_{k+1}) / eta^2 along consecutive states of one run."""
    if len(states) < 2:
        raise ValueError("need at least two consecutive states")
    check_provenance(states)
    z = states[0].base.sample(n, seeded_rng(seed))
    eta = states[0].eta
    clouds = [s.push(z)[0] for s in states]
    rows = [gradient_mapping_pair(a, b, eta, m) for a, b in zip(clouds, clouds[1:])]
    coupled, exact, sub = (np.array(col) for col in zip(*rows))
    return GradientMappingSeries(coupled, exact, sub)


def running_min(series) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(series, float))


class InverseFit(NamedTuple):
    """Least-squares fit of y_N ~ C / N through the origin."""

    constant: float
    r_squared: float
    bound: float  # max_N N y_N, the smallest C with y_N <= C / N everywhere


def inverse_n_fit(values, n_index) -> InverseFit:
    """Fit y_N = C / N; r^2 is uncentered (the model has no intercept)."""
    y = np.asarray(values, float)
    x = 1.0 / np.asarray(n_index, float)
    c = float(x @ y / (x @ x))
    resid = y - c * x
    denom = float(y @ y)
    r2 = 1.0 - float(resid @ resid) / denom if denom > 0 else 1.0
    return InverseFit(c, max(0.0, r2), float(np.max(y / x)))


# ---------------------------------------------------------------------------
# Rate classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    """Observed decay regime of F(mu_n) - F*.

    linear:    e_n ~ A q^n, ``rate_constant`` = q; ``theta`` = 0.5, the
               boundary of the exponents (0, 1/2] that give this regime.
    sublinear: e_n ~ A n^-p, ``rate_constant`` = A, ``exponent`` = p and
               ``theta`` = (1 + 1/p) / 2 from p = 1 / (2 theta - 1).
    finite:    e_n reaches 0 (within tolerance); ``theta`` = 0 and
               ``rate_constant`` is the first step where it does.
    ``r0`` is the largest gap e_n covered by the fit.
    """

    regime: str
    theta: float
    rate_constant: float
    r_squared: float
    exponent: Optional[float] = None
    r0: Optional[float] = None


def _linfit(x, y):
    res = stats.linregress(x, y)
    r2 = float(res.rvalue**2) if np.isfinite(res.rvalue) else 0.0
    return float(res.slope), float(res.intercept), min(max(r2, 0.0), 1.0)


def rate_fit(free_energy_series, f_star: float, *, tol: float = 1e-12, min_points: int = 10) -> RateFit:
    """Classify the decay of e_n = F_n - F* (n = 1, 2, ...) as finite, linear or sublinear."""
    series = np.asarray(free_energy_series, float)
    if len(series) < min_points:
        raise ValueError(f"need at least {min_points} values, got {len(series)}")
    if np.all(series == series[0]):
        raise ValueError("degenerate series: all values equal")
    gaps = series - f_star
    scale = tol * max(1.0, abs(f_star))
    n = np.arange(1, len(series) + 1)
    settled = gaps <= scale
    if settled[-1]:
        # first index of the trailing run of settled values
        trailing = np.flatnonzero(~settled)
        start = int(trailing[-1]) + 1 if trailing.size else 0
        if len(series) - start >= 2:
            return RateFit("finite", 0.0, float(n[start]), 1.0, r0=float(gaps[:start].max()) if start else 0.0)
    keep = gaps > scale
    if keep.sum() < 3:
        raise ValueError("too few points above F* to fit a rate")
    e, nk = gaps[keep], n[keep]
    slope_l, icpt_l, r2_l = _linfit(nk, np.log(e))
    slope_s, icpt_s, r2_s = _linfit(np.log(nk), np.log(e))
    r0 = float(e.max())
    if r2_l >= r2_s:
        return RateFit("linear", 0.5, math.exp(slope_l), r2_l, r0=r0)
    p = -slope_s
    theta = 0.5 * (1.0 + 1.0 / p) if p > 0 else float("nan")
    return RateFit("sublinear", theta, math.exp(icpt_s), r2_s, exponent=p, r0=r0)


# ---------------------------------------------------------------------------
# Sample-based diagnostics
# ---------------------------------------------------------------------------


def _cloud(x) -> np.ndarray:
    return x.points if isinstance(x, EmpiricalMeasure) else EmpiricalMeasure(x).points


def annulus_mass(cloud, center, radius: float, width: float) -> float:
    """Fraction of points with | ||x - center|| - radius | <= width."""
    if not width > 0:
        raise ValueError("width must be positive")
    pts = _cloud(cloud)
    r = np.linalg.norm(pts - np.asarray(center, float), axis=1)
    return float(np.mean(np.abs(r - radius) <= width))


def mmd_estimate(x, y, kernel) -> float:
    """Unbiased U-statistic estimate of MMD^2 between the two samples."""
    a, b = _cloud(x), _cloud(y)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two points")

    def within(p):
        k = kernel.value(p, p)
        m = len(p)
        return (k.sum() - np.trace(k)) / (m * (m - 1))

    return float(within(a) + within(b) - 2.0 * kernel.value(a, b).mean())


def kde_log_density(samples, points) -> np.ndarray:
    """Gaussian KDE (Silverman bandwidth) log-density; a cross-check for particle clouds."""
    s = _cloud(samples)
    kde = stats.gaussian_kde(s.T, bw_method="silverman")
    return kde.logpdf(_cloud(points).T)


def kde_kl_estimate(samples, potential: DCPotential) -> Estimate:
    """KL(cloud || pi) with the cloud density replaced by a KDE.

    The KDE is fitted on the even-indexed points and evaluated on the odd
    ones, which avoids the downward bias of evaluating it at its own centres.
    """
    pts = _cloud(samples)
    fit, held = pts[0::2], pts[1::2]
    return kl_from_cloud(held, kde_log_density(fit, held), potential)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    iteration: int
    free_energy: float
    free_energy_se: float
    kl: Optional[float] = None
    kl_se: Optional[float] = None
    grad_mapping_sq: Optional[float] = None
    w2_to_prev: Optional[float] = None
    wallclock_s: float = 0.0

    def __post_init__(self):
        if self.free_energy_se < 0 or (self.kl_se is not None and self.kl_se < 0):
            raise ValueError("standard errors must be nonnegative")
        if self.grad_mapping_sq is not None and self.grad_mapping_sq < 0:
            raise ValueError("grad_mapping_sq must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> list:
        return ["" if v is None else (repr(float(v)) if k != "iteration" else str(v)) for k, v in self.to_dict().items()]
