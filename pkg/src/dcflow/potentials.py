"""Difference-of-convex potentials F = G - H and the bundled target families.

Every field function works on batches: values map (n, d) -> (n,), gradients
(n, d) -> (n, d) and Hessians (n, d) -> (n, d, d).  The convenience methods
on :class:`DCPotential` also accept a single point of shape (d,).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.special import logsumexp, softmax

from .kernels import build_kernel

Field = Callable[[np.ndarray], np.ndarray]


class NonConvexSplitWarning(UserWarning):
    """A DC component failed its convexity spot check."""


def as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    """Return ``x`` as a float (n, dim) array and whether it was a single point."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


def _zeros_value(x):
    return np.zeros(len(x))


def _zeros_grad(x):
    return np.zeros_like(x)


def _zeros_hess(x):
    n, d = x.shape
    return np.zeros((n, d, d))


@dataclass(frozen=True)
class ScalarField:
    """One convex component: value, (sub)gradient selector and optional Hessian."""

    dim: int
    value: Field
    grad: Field
    hess: Optional[Field] = None

    @classmethod
    def zero(cls, dim: int) -> "ScalarField":
        return cls(dim, _zeros_value, _zeros_grad, _zeros_hess)


@dataclass(frozen=True)
class ConvexityReport:
    n_pairs: int
    segment_violations: int
    subgradient_violations: int
    worst_gap: float

    @property
    def ok(self) -> bool:
        return self.segment_violations == 0 and self.subgradient_violations == 0


@dataclass(frozen=True)
class DCPotential:
    """F = G - H with G, H convex.

    ``h_selector`` is a Borel selector of the subdifferential of H; it is the
    direction used by the forward push of the semi forward-backward scheme.
    """

    dim: int
    g_value: Field
    h_value: Field
    g_grad: Field
    h_selector: Field
    g_hess: Optional[Field] = None
    h_hess: Optional[Field] = None
    lipschitz_h: Optional[float] = None
    log_normalizer: Optional[float] = None
    spec: Optional[dict] = field(default=None, compare=False)
    convexity_ok: Optional[bool] = None

    @property
    def G(self) -> ScalarField:
        return ScalarField(self.dim, self.g_value, self.g_grad, self.g_hess)

    @property
    def H(self) -> ScalarField:
        return ScalarField(self.dim, self.h_value, self.h_selector, self.h_hess)

    @property
    def has_hessians(self) -> bool:
        return self.g_hess is not None and self.h_hess is not None

    def value(self, x):
        xb, single = as_batch(x, self.dim)
        out = self.g_value(xb) - self.h_value(xb)
        return float(out[0]) if single else out

    def grad(self, x):
        xb, single = as_batch(x, self.dim)
        out = self.g_grad(xb) - self.h_selector(xb)
        return out[0] if single else out

    def hess(self, x):
        if not self.has_hessians:
            raise ValueError("potential does not provide both component Hessians")
        xb, single = as_batch(x, self.dim)
        out = self.g_hess(xb) - self.h_hess(xb)
        return out[0] if single else out

    def log_density(self, x):
        """log pi(x) = -F(x) - log Z; requires a known normalizer."""
        if self.log_normalizer is None:
            raise ValueError("log normalizer unknown for this potential")
        return -self.value(x) - self.log_normalizer


def convexity_report(
    value: Field,
    grad: Optional[Field],
    dim: int,
    *,
    n_pairs: int = 512,
    radius: float = 5.0,
    seed: int = 0,
    tol: float = 1e-9,
) -> ConvexityReport:
    """Spot-check convexity on random segments inside a centred box.

    Two checks: f(tx + (1-t)y) <= t f(x) + (1-t) f(y) and, when a gradient is
    given, the subgradient inequality f(y) >= f(x) + <g(x), y - x>.  Both use a
    tolerance relative to the magnitude of the values involved.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, size=(n_pairs, dim))
    # half of the pairs are short segments so that local concavity is caught
    step = rng.normal(size=(n_pairs, dim))
    step[: n_pairs // 2] *= 0.5
    step[n_pairs // 2 :] *= radius
    y = x + step
    t = rng.uniform(size=(n_pairs, 1))
    fx, fy = value(x), value(y)
    fm = value(t * x + (1 - t) * y)
    scale = 1.0 + np.abs(fx) + np.abs(fy)
    seg_gap = fm - (t[:, 0] * fx + (1 - t[:, 0]) * fy)
    seg_bad = seg_gap > tol * scale
    worst = float(np.max(seg_gap / scale))
    sub_bad = np.zeros(n_pairs, bool)
    if grad is not None:
        lin = fx + np.einsum("nd,nd->n", grad(x), y - x)
        sub_gap = lin - fy
        sub_bad = sub_gap > tol * scale
        worst = max(worst, float(np.max(sub_gap / scale)))
    return ConvexityReport(n_pairs, int(seg_bad.sum()), int(sub_bad.sum()), worst)


def _check_component(name: str, value: Field, grad: Field, dim: int, **kwargs) -> bool:
    report = convexity_report(value, grad, dim, **kwargs)
    if not report.ok:
        warnings.warn(
            f"{name} failed the convexity spot check "
            f"({report.segment_violations} segment and {report.subgradient_violations} "
            f"subgradient violations out of {report.n_pairs} pairs, worst gap {report.worst_gap:.3g})",
            NonConvexSplitWarning,
            stacklevel=3,
        )
    return report.ok


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixtureTarget:
    """pi(x) proportional to sum_i w_i exp(-||x - c_i||^2 / sigma^2)."""

    centers: np.ndarray
    weights: np.ndarray
    sigma: float

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if centers.size == 0:
            raise ValueError("gaussian mixture needs at least one center")
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(weights) != len(centers):
            raise ValueError(f"{len(weights)} weights for {len(centers)} centers")
        if np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("mixture weights must lie on the probability simplex")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def log_density(self, x) -> np.ndarray:
        """Normalized log-density evaluated directly from the mixture form."""
        x = np.atleast_2d(np.asarray(x, float))
        d = self.dim
        sq = ((x[:, None, :] - self.centers[None]) ** 2).sum(-1)
        comp = np.log(self.weights) - sq / self.sigma**2 - 0.5 * d * np.log(np.pi * self.sigma**2)
        return logsumexp(comp, axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        std = self.sigma / math.sqrt(2.0)
        return self.centers[idx] + std * rng.standard_normal((n, self.dim))


def gaussian_mixture_dc(target: GaussianMixtureTarget) -> DCPotential:
    """G(x) = ||x||^2 / s^2 and H(x) = log sum_i w_i exp((2<x, c_i> - ||c_i||^2) / s^2)."""
    centers, sigma = target.centers, target.sigma
    s2 = sigma**2
    log_w = np.log(target.weights)
    c_sq = (centers**2).sum(1)
    d = target.dim

    def logits(x):
        return log_w + (2.0 * x @ centers.T - c_sq) / s2

    def g_value(x):
        return (x**2).sum(1) / s2

    def g_grad(x):
        return 2.0 * x / s2

    def g_hess(x):
        return np.broadcast_to(2.0 / s2 * np.eye(d), (len(x), d, d)).copy()

    def h_value(x):
        return logsumexp(logits(x), axis=1)

    def h_selector(x):
        return (2.0 / s2) * softmax(logits(x), axis=1) @ centers

    def h_hess(x):
        w = softmax(logits(x), axis=1)
        m = w @ centers
        second = np.einsum("nk,ki,kj->nij", w, centers, centers)
        return (4.0 / s2**2) * (second - m[:, :, None] * m[:, None, :])

    diffs = centers[:, None, :] - centers[None, :, :]
    diam_sq = float((diffs**2).sum(-1).max())
    log_z = float(logsumexp(log_w + 0.5 * d * np.log(np.pi * s2)))
    spec = {
        "name": "gaussian_mixture",
        "params": {"centers": centers.tolist(), "weights": target.weights.tolist(), "sigma": sigma},
    }
    return DCPotential(
        dim=d,
        g_value=g_value,
        h_value=h_value,
        g_grad=g_grad,
        h_selector=h_selector,
        g_hess=g_hess,
        h_hess=h_hess,
        # Popoviciu: every directional variance of the softmax-weighted centers
        # is at most diam^2 / 4
        lipschitz_h=diam_sq / s2**2,
        log_normalizer=log_z,
        spec=spec,
        convexity_ok=True,
    )


def mixture_softmax_weights(target: GaussianMixtureTarget, x) -> np.ndarray:
    """The responsibilities that weight the centers inside grad H."""
    x = np.atleast_2d(np.asarray(x, float))
    s2 = target.sigma**2
    lg = np.log(target.weights) + (2.0 * x @ target.centers.T - (target.centers**2).sum(1)) / s2
    return softmax(lg, axis=1)


# ---------------------------------------------------------------------------
# Distance-to-set relaxed von Mises-Fisher
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelaxedVmfTarget:
    """pi(t) proportional to exp(-kappa ||t - mu||^2 / 2 - rho dist(t, S)^2 / 2).

    S is the unit sphere centred at ``sphere_center`` (the origin by default).
    ``tie_break_direction`` fixes the projection onto S at its centre, where
    every point of S is a nearest point.
    """

    center: np.ndarray
    kappa: float
    rho: float
    tie_break_direction: Optional[np.ndarray] = None
    sphere_center: Optional[np.ndarray] = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        d = len(center)
        if d == 0:
            raise ValueError("center must be a non-empty vector")
        if not (self.kappa > 0 and self.rho > 0):
            raise ValueError("kappa and rho must be positive")
        tie = self.tie_break_direction
        tie = np.eye(d)[0] if tie is None else np.asarray(tie, dtype=float).reshape(-1)
        if tie.shape != (d,) or not math.isclose(float(np.linalg.norm(tie)), 1.0, abs_tol=1e-12):
            raise ValueError("tie_break_direction must be a unit vector of the target dimension")
        sc = np.zeros(d) if self.sphere_center is None else np.asarray(self.sphere_center, float).reshape(-1)
        if sc.shape != (d,):
            raise ValueError("sphere_center must match the target dimension")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "tie_break_direction", tie)
        object.__setattr__(self, "sphere_center", sc)

    @property
    def dim(self) -> int:
        return len(self.center)

    def project(self, theta) -> np.ndarray:
        """Nearest point of S, with the tie-break at the sphere centre."""
        theta = np.atleast_2d(np.asarray(theta, float))
        u = theta - self.sphere_center
        r = np.linalg.norm(u, axis=1, keepdims=True)
        out = np.where(r > 0, u / np.where(r > 0, r, 1.0), self.tie_break_direction)
        return self.sphere_center + out

    def unnormalized_log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, float))
        r = np.linalg.norm(theta - self.sphere_center, axis=1)
        return -0.5 * self.kappa * ((theta - self.center) ** 2).sum(1) - 0.5 * self.rho * (r - 1.0) ** 2


def relaxed_vmf_dc(target: RelaxedVmfTarget) -> DCPotential:
    """G = kappa ||t - mu||^2 / 2 + rho ||t - c||^2 / 2 and H = (rho / 2)(2 ||t - c|| - 1)."""
    mu, c = target.center, target.sphere_center
    kappa, rho, tie = target.kappa, target.rho, target.tie_break_direction
    d = target.dim

    def g_value(x):
        return 0.5 * kappa * ((x - mu) ** 2).sum(1) + 0.5 * rho * ((x - c) ** 2).sum(1)

    def g_grad(x):
        return kappa * (x - mu) + rho * (x - c)

    def g_hess(x):
        return np.broadcast_to((kappa + rho) * np.eye(d), (len(x), d, d)).copy()

    def h_value(x):
        return 0.5 * rho * (2.0 * np.linalg.norm(x - c, axis=1) - 1.0)

    def h_selector(x):
        u = x - c
        r = np.linalg.norm(u, axis=1, keepdims=True)
        safe = np.where(r > 0, r, 1.0)
        return rho * np.where(r > 0, u / safe, tie)

    def h_hess(x):
        # almost-everywhere Hessian; the sphere centre (a null set) gets zeros
        u = x - c
        r = np.linalg.norm(u, axis=1)
        safe = np.where(r > 0, r, 1.0)
        unit = u / safe[:, None]
        proj = np.eye(d) - unit[:, :, None] * unit[:, None, :]
        out = rho * proj / safe[:, None, None]
        out[r == 0] = 0.0
        return out

    log_z = _vmf_log_normalizer_2d(target) if d == 2 else None
    spec = {
        "name": "relaxed_vmf",
        "params": {
            "center": mu.tolist(),
            "kappa": kappa,
            "rho": rho,
            "tie_break_direction": tie.tolist(),
            "sphere_center": c.tolist(),
        },
    }
    return DCPotential(
        dim=d,
        g_value=g_value,
        h_value=h_value,
        g_grad=g_grad,
        h_selector=h_selector,
        g_hess=g_hess,
        h_hess=h_hess,
        lipschitz_h=None,  # the selector jumps at the sphere centre
        log_normalizer=log_z,
        spec=spec,
        convexity_ok=True,
    )


def _vmf_log_normalizer_2d(target: RelaxedVmfTarget, n_angles: int = 256) -> float:
    """log of the integral of exp(-F) in the plane, by polar quadrature around the sphere centre.

    The angular integral of a smooth periodic function is done with the
    trapezoid rule (spectrally accurate); the radial one with adaptive quad.
    """
    c = target.sphere_center
    phi = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    # shift by the maximum of the log-density along the ring r = 1
    shift = float(np.max(target.unnormalized_log_density(c + dirs)))

    def radial(r):
        pts = c + r * dirs
        return r * np.mean(np.exp(target.unnormalized_log_density(pts) - shift)) * 2 * np.pi

    far = 1.0 + 40.0 / math.sqrt(target.rho) + 40.0 / math.sqrt(target.kappa) + float(
        np.linalg.norm(target.center - c)
    )
    val, _ = integrate.quad(radial, 0.0, far, points=[1.0], limit=400, epsabs=0.0, epsrel=1e-12)
    return math.log(val) + shift


# ---------------------------------------------------------------------------
# Generic splittings
# ---------------------------------------------------------------------------


def smooth_dc_split(
    f_value: Field,
    f_grad: Field,
    alpha: float,
    *,
    dim: int,
    f_hess: Optional[Field] = None,
    check: bool = True,
    check_radius: float = 5.0,
    spec: Optional[dict] = None,
) -> DCPotential:
    """Split an L-smooth F as G = alpha ||x||^2, H = alpha ||x||^2 - F.

    H is convex once ``alpha >= L / 2``.  With ``check`` on, H is spot-checked
    for convexity and a :class:`NonConvexSplitWarning` is issued on failure.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")

    def g_value(x):
        return alpha * (x**2).sum(1)

    def g_grad(x):
        return 2.0 * alpha * x

    def g_hess(x):
        return np.broadcast_to(2.0 * alpha * np.eye(dim), (len(x), dim, dim)).copy()

    def h_value(x):
        return alpha * (x**2).sum(1) - f_value(x)

    def h_selector(x):
        return 2.0 * alpha * x - f_grad(x)

    h_hess = None
    if f_hess is not None:

        def h_hess(x):
            return 2.0 * alpha * np.eye(dim) - f_hess(x)

    ok = None
    if check:
        ok = _check_component("H = alpha ||x||^2 - F", h_value, h_selector, dim, radius=check_radius)
    return DCPotential(
        dim=dim,
        g_value=g_value,
        h_value=h_value,
        g_grad=g_grad,
        h_selector=h_selector,
        g_hess=g_hess,
        h_hess=h_hess,
        lipschitz_h=None,
        log_normalizer=None,
        spec=spec,
        convexity_ok=ok,
    )


def mmd_dc_potential(kernel, target_samples, alpha: float, *, check: bool = True, spec=None) -> DCPotential:
    """Concave potential of the MMD flow: G = 0, H(x) = 2 alpha ||x||^2 + 2 mean_y k(x, y).

    ``target_samples`` is an (m, d) array or an object with a ``points``
    attribute.  The matching interaction kernel is
    ``ShiftedKernel(kernel, alpha)``.
    """
    ys = np.atleast_2d(np.asarray(getattr(target_samples, "points", target_samples), float))
    if ys.size == 0:
        raise ValueError("mmd potential needs at least one target sample")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    d = ys.shape[1]

    def h_value(x):
        return 2.0 * alpha * (x**2).sum(1) + 2.0 * kernel.value(x, ys).mean(1)

    def h_selector(x):
        return 4.0 * alpha * x + 2.0 * kernel.grad_x(x, ys).mean(1)

    def h_hess(x):
        return 4.0 * alpha * np.eye(d) + 2.0 * kernel.hess_x(x, ys).mean(1)

    ok = None
    if check:
        ok = _check_component("H = 2 alpha ||x||^2 + 2 E k(x, y)", h_value, h_selector, d)
    return DCPotential(
        dim=d,
        g_value=_zeros_value,
        h_value=h_value,
        g_grad=_zeros_grad,
        h_selector=h_selector,
        g_hess=_zeros_hess,
        h_hess=h_hess,
        lipschitz_h=4.0 * alpha + 2.0 * kernel.lipschitz_grad,
        log_normalizer=None,
        spec=spec,
        convexity_ok=ok,
    )


@dataclass(frozen=True)
class ShiftedKernel:
    """W(x, y) = k(x, y) + alpha ||x||^2 + alpha ||y||^2, convex for alpha >= Lip(grad k)."""

    base: object
    alpha: float

    @property
    def lipschitz_grad(self) -> float:
        return self.base.lipschitz_grad + 2.0 * self.alpha

    def value(self, x, y):
        x, y = np.asarray(x, float), np.asarray(y, float)
        return self.base.value(x, y) + self.alpha * ((x**2).sum(1)[:, None] + (y**2).sum(1)[None, :])

    def grad_x(self, x, y):
        x = np.asarray(x, float)
        return self.base.grad_x(x, y) + 2.0 * self.alpha * x[:, None, :]

    def hess_x(self, x, y):
        d = np.shape(x)[1]
        return self.base.hess_x(x, y) + 2.0 * self.alpha * np.eye(d)


# ---------------------------------------------------------------------------
# Construction from experiment configs
# ---------------------------------------------------------------------------

_SMOOTH_FUNCTIONS = {}


def _smooth_quadratic(params, dim):
    scale = float(params.get("scale", 1.0))
    m = np.asarray(params.get("mean", np.zeros(dim)), float)
    return (
        lambda x: 0.5 * scale * ((x - m) ** 2).sum(1),
        lambda x: scale * (x - m),
        lambda x: np.broadcast_to(scale * np.eye(dim), (len(x), dim, dim)).copy(),
        0.5 * dim * math.log(2 * math.pi / scale),
    )


def _smooth_cosine(params, dim):
    amp = float(params.get("amplitude", 1.0))
    freq = float(params.get("frequency", 1.0))

    def hess(x):
        return -amp * freq**2 * np.einsum("nd,de->nde", np.cos(freq * x), np.eye(dim))

    return (
        lambda x: amp * np.cos(freq * x).sum(1),
        lambda x: -amp * freq * np.sin(freq * x),
        hess,
        None,
    )


_SMOOTH_FUNCTIONS["quadratic"] = _smooth_quadratic
_SMOOTH_FUNCTIONS["cosine"] = _smooth_cosine

TARGET_NAMES = ("gaussian_mixture", "relaxed_vmf", "smooth_dc", "mmd")


def build_potential(spec: dict, seed: int = 0) -> DCPotential:
    """Build a bundled target from ``{"name": ..., "params": {...}}``.

    Randomized parts (mixture centers drawn at random, MMD target samples) are
    resolved with ``seed`` and written back as explicit values in the
    returned potential's ``spec``, so the result can be rebuilt exactly.
    """
    name = spec.get("name")
    params = dict(spec.get("params", {}))
    if name == "gaussian_mixture":
        centers = params.get("centers", "random")
        if isinstance(centers, str):
            if centers != "random":
                raise ValueError(f"target.params.centers: unknown option {centers!r}")
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6978]))
            k = int(params.get("n_components", 5))
            d = int(params.get("dim", 2))
            half = float(params.get("center_range", 4.0))
            centers = rng.uniform(-half, half, size=(k, d))
        centers = np.atleast_2d(np.asarray(centers, float))
        weights = params.get("weights", "uniform")
        if isinstance(weights, str):
            if weights != "uniform":
                raise ValueError(f"target.params.weights: unknown option {weights!r}")
            weights = np.full(len(centers), 1.0 / len(centers))
        return gaussian_mixture_dc(GaussianMixtureTarget(centers, np.asarray(weights, float), float(params.get("sigma", 1.0))))
    if name == "relaxed_vmf":
        return relaxed_vmf_dc(
            RelaxedVmfTarget(
                center=params["center"],
                kappa=float(params.get("kappa", 1.0)),
                rho=float(params.get("rho", 100.0)),
                tie_break_direction=params.get("tie_break_direction"),
                sphere_center=params.get("sphere_center"),
            )
        )
    if name == "smooth_dc":
        fname = params.get("function", "quadratic")
        if fname not in _SMOOTH_FUNCTIONS:
            raise ValueError(f"target.params.function: unknown function {fname!r}")
        dim = int(params.get("dim", 1))
        f_value, f_grad, f_hess, log_z = _SMOOTH_FUNCTIONS[fname](params.get("function_params", {}), dim)
        pot = smooth_dc_split(
            f_value,
            f_grad,
            float(params.get("alpha", 0.5)),
            dim=dim,
            f_hess=f_hess,
            spec={"name": name, "params": params},
        )
        if log_z is not None:
            pot = replace(pot, log_normalizer=log_z)
        return pot
    if name == "mmd":
        kernel = build_kernel(params.get("kernel", {"name": "gaussian", "params": {"bandwidth": 1.0}}))
        samples = params.get("target_samples")
        if samples is None:
            ts = params.get("target", {"mean": [0.0, 0.0], "std": 1.0, "n": 256})
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6D64]))
            mean = np.asarray(ts.get("mean", [0.0, 0.0]), float)
            samples = mean + float(ts.get("std", 1.0)) * rng.standard_normal((int(ts.get("n", 256)), len(mean)))
        samples = np.atleast_2d(np.asarray(samples, float))
        alpha = float(params.get("alpha", kernel.lipschitz_grad))
        resolved = {"name": name, "params": {**params, "target_samples": samples.tolist(), "alpha": alpha}}
        return mmd_dc_potential(kernel, samples, alpha, spec=resolved)
    raise ValueError(f"target.name: unknown target {name!r}; expected one of {list(TARGET_NAMES)}")

