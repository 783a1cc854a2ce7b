"""One JKO step, solved by stochastic optimisation over an input-convex network.

The variational problem over maps T = grad psi reads

    min_psi  (1 / 2 eta) E ||grad psi(xi) - xi||^2 + E G(grad psi(xi)) + Delta R

with xi drawn from the measure being pushed and Delta R the change of the
regulariser: -E log det Hess psi(xi) for the negative entropy, or a
distinct-pair kernel mean of the pushed points for an interaction energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch

from . import icnn
from .flow import FlowState, seeded_rng
from .icnn import ICNNArchitecture, ICNNFunction

REGULARIZERS = ("negative_entropy", "interaction_energy", "none")
DEFAULT_WIDTHS = (64, 64)
BATCH_STREAM = 0x626174  # keeps batch draws apart from other streams of the same seed


class DivergenceError(RuntimeError):
    """The inner objective blew up or became non-finite."""


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "negative_entropy"
    kernel: Optional[object] = None

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"regularizer kind must be one of {REGULARIZERS}, got {self.kind!r}")
        if (self.kind == "interaction_energy") != (self.kernel is not None):
            raise ValueError("a kernel is required for, and only for, the interaction energy")


NEGATIVE_ENTROPY = RegularizerSpec("negative_entropy")


def constant_schedule(inner_iters: int, rate: float) -> tuple:
    return ((1, max(int(inner_iters), 1), float(rate)),)


@dataclass(frozen=True)
class JKOConfig:
    """Inner-loop settings for one JKO step.

    ``learning_rate_schedule`` is a sequence of ``(first, last, rate)``
    triples over 1-based inner iterations that must tile [1, inner_iters].
    """

    eta: float = 0.1
    inner_iters: int = 300
    batch_size: int = 512
    learning_rate_schedule: tuple = ((1, 300, 5e-3),)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eta0: float = math.inf
    hidden_widths: tuple = DEFAULT_WIDTHS
    init_scale: float = 1e-3
    cache_batches: bool = True
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    tail_average: float = 0.5

    def __post_init__(self):
        sched = tuple((int(a), int(b), float(r)) for a, b, r in self.learning_rate_schedule)
        object.__setattr__(self, "learning_rate_schedule", sched)
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.eta < self.eta0:
            raise ValueError(f"eta={self.eta} must be below the step-size guard eta0={self.eta0}")
        if self.inner_iters < 0:
            raise ValueError("inner_iters must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if not 0 <= self.tail_average < 1:
            raise ValueError("tail_average must lie in [0, 1)")
        expect = 1
        for first, last, rate in sorted(sched):
            if first != expect or last < first or not rate > 0:
                raise ValueError(f"learning_rate_schedule must tile [1, inner_iters] with positive rates: {sched}")
            expect = last + 1
        if self.inner_iters > 0 and expect <= self.inner_iters:
            raise ValueError(f"learning_rate_schedule stops at {expect - 1} < inner_iters={self.inner_iters}")

    def rate(self, i: int) -> float:
        """Learning rate of 1-based inner iteration ``i``."""
        for first, last, rate in self.learning_rate_schedule:
            if first <= i <= last:
                return rate
        raise ValueError(f"inner iteration {i} not covered by the learning-rate schedule")

    def architecture(self, dim: int) -> ICNNArchitecture:
        return ICNNArchitecture(dim, self.hidden_widths, init_scale=self.init_scale)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray
    t: int

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, rate: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, float)
    grad = np.asarray(grad, float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, gradient and moments must have matching shapes")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return params - rate * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


class _PairMean(torch.autograd.Function):
    """Distinct-pair mean of a symmetric kernel over the rows of y."""

    @staticmethod
    def forward(ctx, y, kernel):
        y_np = y.detach().numpy()
        n = len(y_np)
        k = kernel.value(y_np, y_np)
        ctx.save_for_backward(y)
        ctx.kernel = kernel
        return torch.tensor((k.sum() - np.trace(k)) / (n * (n - 1)), dtype=y.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (y,) = ctx.saved_tensors
        y_np = y.detach().numpy()
        n = len(y_np)
        g = ctx.kernel.grad_x(y_np, y_np)
        idx = np.arange(n)
        g[idx, idx] = 0.0
        # symmetric kernel: both slots of each pair contribute the same x-gradient
        grad = 2.0 * g.sum(1) / (n * (n - 1))
        return grad_out * torch.from_numpy(grad), None


class JKOTerms(NamedTuple):
    """Objective pieces: mean squared displacement, mean G, regulariser change."""

    transport: float
    potential: float
    regularizer: float
    eta: float

    @property
    def total(self) -> float:
        return self.transport / (2 * self.eta) + self.potential + self.regularizer


def _objective_torch(arch, theta, xi, g, reg: RegularizerSpec, eta: float):
    order = 2 if reg.kind == "negative_entropy" else 1
    der = icnn.forward(arch, theta, xi, order=order)
    diff = der.grad - xi
    transport = (diff * diff).sum(1).mean()
    zero = torch.zeros((), dtype=icnn.DTYPE)
    potential = icnn.field_value(g, der.grad).mean() if g is not None else zero
    if reg.kind == "negative_entropy":
        regular = -icnn.spd_logdet(der.hess).mean()
    elif reg.kind == "interaction_energy":
        if len(xi) < 2:
            raise ValueError("the interaction energy needs at least two points per batch")
        regular = _PairMean.apply(der.grad, reg.kernel)
    else:
        regular = zero
    total = transport / (2 * eta) + potential + regular
    return total, (transport, potential, regular)


def jko_objective(f: ICNNFunction, xi_batch, g, reg: RegularizerSpec, eta: float) -> JKOTerms:
    """Monte Carlo JKO objective of map grad psi on a batch of the pushed measure.

    ``g`` is a scalar field with ``value`` and ``grad`` (e.g. ``potential.G``)
    or None when the potential energy lives in the forward step.
    """
    xi = np.atleast_2d(np.asarray(xi_batch, float))
    if len(xi) == 0:
        raise ValueError("empty batch")
    with torch.no_grad():
        _, terms = _objective_torch(f.arch, torch.from_numpy(np.array(f.params)), torch.from_numpy(xi), g, reg, eta)
    return JKOTerms(*(float(t) for t in terms), eta)


def _value_and_grad(f: ICNNFunction, xi: np.ndarray, g, reg, eta):
    theta = torch.from_numpy(np.array(f.params)).requires_grad_(True)
    total, _ = _objective_torch(f.arch, theta, torch.from_numpy(xi), g, reg, eta)
    (grad,) = torch.autograd.grad(total, theta)
    return float(total.detach()), grad.numpy()


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def base_batch_sampler(state: FlowState, batch_size: int, seed: int) -> Callable[[int], np.ndarray]:
    """Inner batch ``i`` is a fixed draw from the base, keyed by (seed, i)."""
    base = state.base

    def draw(i: int) -> np.ndarray:
        return base.sample(batch_size, seeded_rng(seed, BATCH_STREAM, i))

    return draw


@dataclass
class JKOResult:
    function: ICNNFunction
    trace: np.ndarray
    initial: ICNNFunction = field(repr=False)
    adam: Optional[AdamState] = field(default=None, repr=False)

    def smoothed_trace(self, window: int = 20) -> np.ndarray:
        if len(self.trace) < window:
            return self.trace.copy()
        return np.convolve(self.trace, np.ones(window) / window, mode="valid")


def initial_function(state: FlowState, cfg: JKOConfig) -> ICNNFunction:
    """Warm start: the previous fitted map, or a near-identity network for the first step."""
    if state.maps:
        return state.maps[-1]
    return icnn.init_near_identity(cfg.architecture(state.dim), cfg.seed)


def jko_solve(
    prev_chain: FlowState,
    g,
    reg: RegularizerSpec,
    cfg: JKOConfig,
    base_sampler: Optional[Callable[[int], np.ndarray]] = None,
    *,
    batches: Optional[Sequence[np.ndarray]] = None,
    warm_start: Optional[ICNNFunction] = None,
    adam_state: Optional[AdamState] = None,
) -> JKOResult:
    """Fit psi for the next JKO step by Adam on fresh pushed batches.

    Inner iteration i (0-based) uses ``base_sampler(i)`` pushed through the
    whole chain including the trailing forward map.  ``batches`` may supply
    those pushed batches directly (the cached path); they must be the same
    points the literal push would produce.
    """
    if prev_chain.eta != cfg.eta:
        raise ValueError(f"chain eta {prev_chain.eta} differs from config eta {cfg.eta}")
    f = warm_start if warm_start is not None else initial_function(prev_chain, cfg)
    if f.dim != prev_chain.dim:
        raise ValueError("warm start dimension differs from the chain")
    start = f
    if base_sampler is None:
        base_sampler = base_batch_sampler(prev_chain, cfg.batch_size, cfg.seed)
    if batches is not None and len(batches) < cfg.inner_iters:
        raise ValueError("not enough cached batches for the inner loop")

    mask = f.arch.constrained_mask
    params = np.where(mask, np.maximum(f.params, 0.0), f.params)
    adam = AdamState.zeros(len(params)) if adam_state is None else adam_state
    if len(adam.m) != len(params):
        raise ValueError("adam_state does not match the parameter count")
    trace = np.empty(cfg.inner_iters)
    # iterates after `tail_start` are averaged; the mean of points satisfying
    # the sign constraints satisfies them too
    tail_start = cfg.inner_iters - int(cfg.tail_average * cfg.inner_iters)
    tail_sum, tail_count = np.zeros_like(params), 0
    threshold = None
    strikes = 0
    for i in range(cfg.inner_iters):
        if batches is not None:
            xi = batches[i]
        else:
            xi = prev_chain.push(base_sampler(i), trailing_forward=True)[0]
        current = f.with_params(params)
        try:
            value, grad = _value_and_grad(current, xi, g, reg, cfg.eta)
        except icnn.ConvexityError as exc:
            raise DivergenceError(f"inner iteration {i + 1}: {exc}") from exc
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite objective at inner iteration {i + 1}")
        trace[i] = value
        if threshold is None:
            threshold = cfg.divergence_factor * max(abs(value), 1.0)
        strikes = strikes + 1 if value > threshold else 0
        if strikes >= cfg.divergence_patience:
            raise DivergenceError(
                f"objective above {threshold:.4g} for {strikes} consecutive inner iterations (now {value:.4g})"
            )
        try:
            params, adam = adam_step(params, grad, adam, cfg.rate(i + 1), cfg.adam_betas, cfg.adam_eps)
        except FloatingPointError as exc:
            raise DivergenceError(f"inner iteration {i + 1}: {exc}") from exc
        params = np.where(mask, np.maximum(params, 0.0), params)
        if i >= tail_start:
            tail_sum += params
            tail_count += 1
    if tail_count > 1:
        params = tail_sum / tail_count
    return JKOResult(f.with_params(params), trace, start, adam)


# ---------------------------------------------------------------------------
# Change of entropy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearMap:
    """T(x) = A x + b."""

    matrix: np.ndarray
    shift: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.atleast_2d(np.asarray(self.matrix, float)))

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        y = x @ self.matrix.T
        return y if self.shift is None else y + self.shift

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        return np.broadcast_to(self.matrix, (len(x),) + self.matrix.shape)


def entropy_change(T, batch) -> float:
    """Monte Carlo mean of log |det DT(x)| over ``batch``.

    Pushing rho through T changes the negative entropy by minus this
    quantity.  ``T`` is an :class:`ICNNFunction` (T = grad psi) or any object
    with a ``jacobian`` method.
    """
    x = np.atleast_2d(np.asarray(batch, float))
    if len(x) == 0:
        raise ValueError("empty batch")
    if isinstance(T, ICNNFunction):
        try:
            _, ld = icnn.hessian_logdet(T, x)
        except icnn.ConvexityError as exc:
            raise np.linalg.LinAlgError(str(exc)) from exc
        return float(np.mean(ld))
    sign, ld = np.linalg.slogdet(T.jacobian(x))
    if np.any(sign == 0):
        raise np.linalg.LinAlgError("singular Jacobian")
    return float(np.mean(ld))
