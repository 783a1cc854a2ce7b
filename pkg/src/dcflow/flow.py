"""Measures represented as push-forwards of a base distribution through a chain of maps.

For the map-based schemes the n-th iterate is

    mu_n = (grad psi_n o T o ... o grad psi_1 o T)_# mu_0

where T is the explicit forward map of the scheme: x + eta S(x) for semi
forward-backward Euler, x - eta grad F(x) for forward-backward Euler.  The
intermediate measure nu_{n+1} = T_# mu_n carries a trailing forward map.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import icnn
from .icnn import ICNNFunction
from .potentials import DCPotential, build_potential

SCHEMES = ("semi_fb", "fb", "ula")
SNAPSHOT_VERSION = 1


def seeded_rng(*keys) -> np.random.Generator:
    """Generator keyed by a tuple of nonnegative integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class BaseDistribution:
    """Isotropic normal N(mean, variance I), or a Dirac mass (variance 0, ULA only)."""

    mean: tuple
    variance: float = 1.0
    name: str = "normal"

    def __post_init__(self):
        mean = tuple(float(m) for m in np.atleast_1d(np.asarray(self.mean, float)))
        object.__setattr__(self, "mean", mean)
        if self.name not in ("normal", "dirac"):
            raise ValueError(f"base.name: unknown distribution {self.name!r}")
        if self.name == "normal" and not self.variance > 0:
            raise ValueError("base.params.variance must be positive")
        if self.name == "dirac":
            object.__setattr__(self, "variance", 0.0)

    @classmethod
    def normal(cls, dim: int, variance: float = 1.0, mean=None) -> "BaseDistribution":
        return cls(tuple(np.zeros(dim)) if mean is None else tuple(mean), float(variance), "normal")

    @classmethod
    def dirac(cls, point) -> "BaseDistribution":
        return cls(tuple(point), 0.0, "dirac")

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def has_density(self) -> bool:
        return self.name == "normal"

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(self.mean)
        if self.name == "dirac":
            return np.tile(mean, (n, 1))
        return mean + math.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    def log_density(self, x) -> np.ndarray:
        if not self.has_density:
            raise ValueError("a Dirac base has no density")
        x = np.atleast_2d(np.asarray(x, float))
        r2 = ((x - np.asarray(self.mean)) ** 2).sum(1)
        return -0.5 * r2 / self.variance - 0.5 * self.dim * math.log(2 * math.pi * self.variance)

    def entropy(self) -> float:
        """Differential entropy -E log p."""
        return 0.5 * self.dim * (1.0 + math.log(2 * math.pi * self.variance))

    def to_dict(self) -> dict:
        return {"name": self.name, "params": {"mean": list(self.mean), "variance": self.variance}}

    @classmethod
    def from_dict(cls, d: dict, dim: Optional[int] = None) -> "BaseDistribution":
        name = d.get("name", "normal")
        params = d.get("params", {})
        mean = params.get("mean")
        if mean is None:
            if dim is None:
                raise ValueError("base.params.mean is required when the dimension is unknown")
            mean = [0.0] * dim
        if name == "dirac":
            return cls.dirac(mean)
        return cls(tuple(mean), float(params.get("variance", 1.0)), name)


def forward_map(potential: DCPotential, scheme: str, eta: float, x: np.ndarray) -> np.ndarray:
    """Explicit half-step: x + eta S(x) (semi_fb) or x - eta grad F(x) (fb)."""
    if scheme == "semi_fb":
        return x + eta * potential.h_selector(x)
    if scheme == "fb":
        return x - eta * (potential.g_grad(x) - potential.h_selector(x))
    raise ValueError(f"scheme {scheme!r} has no forward map")


def forward_jacobian(potential: DCPotential, scheme: str, eta: float, x: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`forward_map`, using the almost-everywhere Hessians."""
    eye = np.eye(x.shape[1])
    if scheme == "semi_fb":
        if potential.h_hess is None:
            raise ValueError("forward map Jacobian needs the Hessian of H")
        return eye + eta * potential.h_hess(x)
    if scheme == "fb":
        if not potential.has_hessians:
            raise ValueError("forward map Jacobian needs the Hessians of G and H")
        return eye - eta * (potential.g_hess(x) - potential.h_hess(x))
    raise ValueError(f"scheme {scheme!r} has no forward map")


def log_abs_det(jac: np.ndarray) -> np.ndarray:
    sign, logdet = np.linalg.slogdet(jac)
    if np.any(sign == 0):
        raise np.linalg.LinAlgError("singular Jacobian in the map chain")
    return logdet


@dataclass(frozen=True)
class FlowState:
    """Immutable chain of fitted maps defining the current iterate."""

    base: BaseDistribution
    eta: float
    scheme: str
    potential: DCPotential = field(repr=False)
    maps: tuple = ()

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "maps", tuple(self.maps))
        if self.base.dim != self.potential.dim:
            raise ValueError("base and potential dimensions differ")
        for f in self.maps:
            if f.dim != self.dim:
                raise ValueError("all maps must share the ambient dimension")
        if self.scheme == "ula" and self.maps:
            raise ValueError("ULA states carry no maps")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def iteration(self) -> int:
        return len(self.maps)

    def append(self, f: ICNNFunction) -> "FlowState":
        return FlowState(self.base, self.eta, self.scheme, self.potential, self.maps + (f,))

    def truncated(self, n: int) -> "FlowState":
        """The state after the first ``n`` maps (same run)."""
        return FlowState(self.base, self.eta, self.scheme, self.potential, self.maps[:n])

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward_map(self.potential, self.scheme, self.eta, x)

    def forward_logdet(self, x: np.ndarray) -> np.ndarray:
        return log_abs_det(forward_jacobian(self.potential, self.scheme, self.eta, x))

    def step_cloud(self, f: ICNNFunction, x: np.ndarray, logp: Optional[np.ndarray] = None):
        """Advance points (and optionally log-densities) of mu_n to mu_{n+1} under map ``f``."""
        y = self.forward(x)
        if logp is not None:
            logp = logp - self.forward_logdet(x)
        if logp is None:
            return icnn.grad_x(f, y), None
        _, ld = icnn.hessian_logdet(f, y)
        return icnn.grad_x(f, y), logp - ld

    def push(self, z, *, trailing_forward: bool = False, with_log_density: bool = False):
        """Push base points through the chain; returns (points, log-densities or None)."""
        x = np.atleast_2d(np.asarray(z, float))
        logp = self.base.log_density(x) if with_log_density else None
        for f in self.maps:
            x, logp = self.step_cloud(f, x, logp)
        if trailing_forward:
            if logp is not None:
                logp = logp - self.forward_logdet(x)
            x = self.forward(x)
        return x, logp

    def sample(self, n: int, seed: int, *, trailing_forward: bool = False) -> np.ndarray:
        z = self.base.sample(n, seeded_rng(seed))
        return self.push(z, trailing_forward=trailing_forward)[0]


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def save_state(state: FlowState, path, extra: Optional[dict] = None) -> Path:
    """Write a snapshot: JSON header (base, eta, scheme, potential, architectures) + parameter blocks."""
    if state.potential.spec is None:
        raise ValueError("potential has no rebuildable spec; cannot snapshot")
    head = {
        "format": "dcflow.flowstate",
        "version": SNAPSHOT_VERSION,
        "base": state.base.to_dict(),
        "eta": state.eta,
        "scheme": state.scheme,
        "potential": state.potential.spec,
        "maps": [icnn.header(f)["arch"] for f in state.maps],
        "extra": extra or {},
    }
    arrays = {f"map_{i:04d}": f.params.astype("<f8") for i, f in enumerate(state.maps)}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(head)), **arrays)
    return path


def load_state(path) -> FlowState:
    try:
        with np.load(path, allow_pickle=False) as data:
            head = json.loads(str(data["header"]))
            if head.get("format") != "dcflow.flowstate" or head.get("version") != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot header in {path}")
            maps = tuple(
                ICNNFunction(icnn.arch_from_dict(a), data[f"map_{i:04d}"].astype(np.float64))
                for i, a in enumerate(head["maps"])
            )
    except (KeyError, ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
        raise ValueError(f"corrupt snapshot {path}: {exc}") from exc
    potential = build_potential(head["potential"])
    base = BaseDistribution.from_dict(head["base"], potential.dim)
    return FlowState(base, float(head["eta"]), head["scheme"], potential, maps)
