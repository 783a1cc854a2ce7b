"""Time discretisations of the flow: semi forward-backward Euler, forward-backward Euler, ULA.

Map-based schemes grow a :class:`~dcflow.flow.FlowState` by one fitted map
per outer iteration.  ULA moves a particle cloud directly.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import icnn
from .flow import BaseDistribution, FlowState, seeded_rng
from .jko import NEGATIVE_ENTROPY, JKOConfig, JKOResult, RegularizerSpec, base_batch_sampler, jko_solve
from .potentials import DCPotential
from .transport import EmpiricalMeasure

ULA_BLOCK = 4096


class StepResult(NamedTuple):
    state: FlowState
    jko: JKOResult


class BatchCache:
    """Inner-loop batches of the current iterate, one per inner iteration.

    Each outer step reads the batches after the trailing forward map and,
    once the new map is fitted, advances them through it.  Batch by batch
    this is the same arithmetic as re-pushing the base draws through the
    whole chain, so results match the uncached path bit for bit.
    """

    def __init__(self, state: FlowState, sampler: Callable[[int], np.ndarray], n_batches: int):
        self.iteration = state.iteration
        self.clouds = [state.push(sampler(i))[0] for i in range(n_batches)]

    def forward_batches(self, state: FlowState) -> list:
        if state.iteration != self.iteration:
            raise ValueError(f"cache holds iterate {self.iteration}, state is at {state.iteration}")
        return [state.forward(c) for c in self.clouds]

    def advance(self, new_state: FlowState, forward_batches: list):
        f = new_state.maps[-1]
        self.clouds = [icnn.grad_x(f, b) for b in forward_batches]
        self.iteration = new_state.iteration


def _jko_potential(state: FlowState):
    # semi FB keeps G in the backward step; FB moves all of F into the forward step
    return state.potential.G if state.scheme == "semi_fb" else None


def advance(
    state: FlowState,
    cfg: JKOConfig,
    *,
    reg: RegularizerSpec = NEGATIVE_ENTROPY,
    cache: Optional[BatchCache] = None,
    base_sampler: Optional[Callable[[int], np.ndarray]] = None,
) -> StepResult:
    """One outer iteration of a map-based scheme, returning the new state and the inner trace."""
    if state.scheme not in ("semi_fb", "fb"):
        raise ValueError(f"scheme {state.scheme!r} is not map-based")
    if base_sampler is None:
        base_sampler = base_batch_sampler(state, cfg.batch_size, cfg.seed)
    batches = cache.forward_batches(state) if cache is not None else None
    result = jko_solve(state, _jko_potential(state), reg, cfg, base_sampler, batches=batches)
    new_state = state.append(result.function)
    if cache is not None:
        cache.advance(new_state, batches)
    return StepResult(new_state, result)


def semi_fb_step(state: FlowState, cfg: JKOConfig, **kwargs) -> FlowState:
    """nu = (I + eta S)_# mu_n, then mu_{n+1} = JKO of eta (E_G + R) from nu."""
    if state.scheme != "semi_fb":
        raise ValueError("semi_fb_step needs a semi_fb state")
    return advance(state, cfg, **kwargs).state


def fb_step(state: FlowState, cfg: JKOConfig, **kwargs) -> FlowState:
    """nu = (I - eta grad F)_# mu_n, then mu_{n+1} = JKO of eta R from nu."""
    if state.scheme != "fb":
        raise ValueError("fb_step needs an fb state")
    return advance(state, cfg, **kwargs).state


def sample(state: FlowState, n: int, seed: int, *, trailing_forward: bool = False) -> EmpiricalMeasure:
    """Base draws keyed by ``seed`` pushed through the chain.

    The variants with and without the trailing forward map share the base
    draws, so they are index-coupled.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    return EmpiricalMeasure(state.sample(n, seed, trailing_forward=trailing_forward))


def ula_run(
    potential: DCPotential,
    eta: float,
    n_chains: int,
    n_iters: int,
    base: BaseDistribution,
    seed: int,
    *,
    block: int = ULA_BLOCK,
) -> EmpiricalMeasure:
    """x <- x - eta grad F(x) + sqrt(2 eta) z for independent chains.

    Chains are processed in blocks of ``block``; block b draws its start and
    its noise from its own stream spawned from ``seed``, so the result does
    not depend on how blocks are scheduled.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if n_chains < 1 or n_iters < 0:
        raise ValueError("need n_chains >= 1 and n_iters >= 0")
    if base.dim != potential.dim:
        raise ValueError("base and potential dimensions differ")
    n_blocks = math.ceil(n_chains / block)
    streams = np.random.SeedSequence(int(seed)).spawn(n_blocks)
    scale = math.sqrt(2 * eta)
    out = np.empty((n_chains, potential.dim))
    for b, ss in enumerate(streams):
        lo, hi = b * block, min((b + 1) * block, n_chains)
        rng = np.random.default_rng(ss)
        x = base.sample(hi - lo, rng)
        for k in range(n_iters):
            # overflow is caught just below and reported with the chain index
            with np.errstate(over="ignore", invalid="ignore"):
                x = x - eta * (potential.g_grad(x) - potential.h_selector(x)) + scale * rng.standard_normal(x.shape)
            bad = ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                raise FloatingPointError(
                    f"non-finite ULA iterate in chain {lo + int(np.flatnonzero(bad)[0])} at iteration {k + 1}"
                )
        out[lo:hi] = x
    return EmpiricalMeasure(out)


def initial_state(potential: DCPotential, base: BaseDistribution, eta: float, scheme: str) -> FlowState:
    return FlowState(base, eta, scheme, potential)


def default_sampler(state: FlowState, cfg: JKOConfig) -> Callable[[int], np.ndarray]:
    return base_batch_sampler(state, cfg.batch_size, cfg.seed)


__all__ = [
    "BatchCache",
    "FlowState",
    "StepResult",
    "advance",
    "fb_step",
    "initial_state",
    "sample",
    "semi_fb_step",
    "seeded_rng",
    "ula_run",
]
