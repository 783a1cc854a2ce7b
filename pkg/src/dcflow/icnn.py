"""Input-convex networks psi(x) whose gradient is a candidate transport map.

Architecture (all weights live in one flat float64 vector)::

    z_1     = act(A_0 x + b_0)
    z_{l+1} = act(W_l z_l + A_l x + b_l)        W_l >= 0
    psi(x)  = 0.5 ||Q x||^2 + c.x + w . z_L     w >= 0

``act`` is convex and non-decreasing, so psi is convex in x.  The quadratic
term 0.5 ||Q x||^2 has a free matrix Q (initialised to the identity), which
lets gradient maps contract as well as expand.

Spatial derivatives are propagated forward through the layers (Jacobians and
Hessians of every hidden unit), so value, gradient and Hessian come out of a
single pass built from ordinary tensor operations.  Parameter gradients of
any loss built from them, including third-order mixed terms such as
d/dtheta log det Hess_x psi, then come from one reverse-mode sweep.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as tF

DTYPE = torch.float64
LOGDET_JITTER = 1e-9
FORMAT_VERSION = 1
INIT_STREAM = 0x696E6974


class ConvexityError(ArithmeticError):
    """A Hessian of psi stayed non positive-definite after jitter."""


# ---------------------------------------------------------------------------
# Activations: value, first and second derivative
# ---------------------------------------------------------------------------


class Activation(NamedTuple):
    f: Callable
    d1: Callable
    d2: Callable


def _softplus_d2(u):
    s = torch.sigmoid(u)
    return s * (1.0 - s)


ACTIVATIONS: dict[str, Activation] = {
    "softplus": Activation(tF.softplus, torch.sigmoid, _softplus_d2),
}


def check_activation(act: Activation, *, n: int = 200, span: float = 30.0, seed: int = 0) -> bool:
    """Segment checks that ``act`` is convex and non-decreasing on [-span, span]."""
    g = torch.Generator().manual_seed(seed)
    a = (torch.rand(n, generator=g, dtype=DTYPE) * 2 - 1) * span
    b = (torch.rand(n, generator=g, dtype=DTYPE) * 2 - 1) * span
    t = torch.rand(n, generator=g, dtype=DTYPE)
    fa, fb, fm = act.f(a), act.f(b), act.f(t * a + (1 - t) * b)
    convex = bool(torch.all(fm <= t * fa + (1 - t) * fb + 1e-12 * (1 + fa.abs() + fb.abs())))
    lo, hi = torch.minimum(a, b), torch.maximum(a, b)
    monotone = bool(torch.all(act.f(lo) <= act.f(hi) + 1e-12))
    return convex and monotone and bool(torch.all(act.d1(a) >= 0)) and bool(torch.all(act.d2(a) >= 0))


def register_activation(name: str, act: Activation):
    if not check_activation(act):
        raise ValueError(f"activation {name!r} failed the convex / non-decreasing checks")
    ACTIVATIONS[name] = act


# ---------------------------------------------------------------------------
# Architecture and parameter layout
# ---------------------------------------------------------------------------


class Block(NamedTuple):
    name: str
    shape: tuple
    offset: int
    constrained: bool

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ICNNArchitecture:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    activation: str = "softplus"
    quadratic_skip: bool = True
    init_scale: float = 1e-3

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not widths or min(widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive integers")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_scale < 0:
            raise ValueError("init_scale must be nonnegative")

    @cached_property
    def layout(self) -> tuple[Block, ...]:
        d = self.input_dim
        specs = []
        if self.quadratic_skip:
            specs.append(("quad", (d, d), False))
        specs.append(("lin", (d,), False))
        prev = None
        for l, width in enumerate(self.hidden_widths):
            if prev is not None:
                specs.append((f"W{l}", (width, prev), True))
            specs.append((f"A{l}", (width, d), False))
            specs.append((f"b{l}", (width,), False))
            prev = width
        specs.append(("out", (prev,), True))
        blocks, offset = [], 0
        for name, shape, constrained in specs:
            blocks.append(Block(name, shape, offset, constrained))
            offset += math.prod(shape)
        return tuple(blocks)

    @property
    def n_params(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    @cached_property
    def constrained_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for b in self.layout:
            if b.constrained:
                mask[b.offset : b.offset + b.size] = True
        mask.flags.writeable = False
        return mask

    def unflatten(self, theta):
        """Dict of named views into a flat numpy array or torch tensor."""
        return {b.name: theta[b.offset : b.offset + b.size].reshape(b.shape) for b in self.layout}

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "quadratic_skip": self.quadratic_skip,
            "init_scale": self.init_scale,
        }


@dataclass(frozen=True)
class ICNNFunction:
    """An architecture plus an immutable flat parameter vector."""

    arch: ICNNArchitecture
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64, copy=True).reshape(-1)
        if p.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {p.size}")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def dim(self) -> int:
        return self.arch.input_dim

    def blocks(self) -> dict:
        return self.arch.unflatten(self.params)

    def with_params(self, params) -> "ICNNFunction":
        return ICNNFunction(self.arch, params)


# ---------------------------------------------------------------------------
# Forward pass with spatial derivatives
# ---------------------------------------------------------------------------


class Derivatives(NamedTuple):
    value: torch.Tensor
    grad: Optional[torch.Tensor]
    hess: Optional[torch.Tensor]


def forward(arch: ICNNArchitecture, theta: torch.Tensor, x: torch.Tensor, order: int = 0) -> Derivatives:
    """psi and (for ``order`` >= 1, 2) its x-gradient and x-Hessian at a batch x of shape (B, d).

    Spatial derivatives are carried as d forward tangents of shape (B, width)
    per layer.  The Hessian uses the exact identity

        Hess psi = Q^T Q + sum_l J_l^T diag(delta_l * act''(u_l)) J_l

    where J_l = du_l/dx and delta_l = dpsi/dz_l is the read-out adjoint, so
    every operation is a matrix product or an elementwise product of
    (B, width) arrays.
    """
    p = arch.unflatten(theta)
    act = ACTIVATIONS[arch.activation]
    n, d = x.shape
    grad = hess = None

    value = x @ p["lin"]
    if order >= 1:
        grad = p["lin"].expand(n, d)
    if arch.quadratic_skip:
        q = p["quad"]
        qx = x @ q.T
        value = value + 0.5 * (qx * qx).sum(1)
        if order >= 1:
            grad = grad + qx @ q

    n_layers = len(arch.hidden_widths)
    us, s1s, tangents = [], [], []
    z = tangent = s1 = None
    for l in range(n_layers):
        a, b = p[f"A{l}"], p[f"b{l}"]
        if l == 0:
            u = x @ a.T + b
        else:
            w = p[f"W{l}"]
            u = z @ w.T + x @ a.T + b
        if order >= 1:
            if l == 0:
                tangent = [a[:, i] for i in range(d)]
            else:
                tangent = [(s1 * t) @ w.T + a[:, i] for i, t in enumerate(tangent)]
            s1 = act.d1(u)
            tangents.append(tangent)
            s1s.append(s1)
        us.append(u)
        z = act.f(u)

    out = p["out"]
    value = value + z @ out
    if order >= 1:
        read = s1 * out
        grad = grad + torch.stack([(read * t).sum(1) if t.dim() == 2 else read @ t for t in tangent], 1)
    if order >= 2:
        hq = (q.T @ q) if arch.quadratic_skip else torch.zeros(d, d, dtype=x.dtype)
        entries = [[None] * d for _ in range(d)]
        delta = out.expand(n, -1)
        for l in reversed(range(n_layers)):
            weight = delta * act.d2(us[l])
            tl = tangents[l]
            for i in range(d):
                for j in range(i, d):
                    if l == 0:
                        term = weight @ (tl[i] * tl[j])
                    else:
                        term = (weight * tl[i] * tl[j]).sum(1)
                    entries[i][j] = term if entries[i][j] is None else entries[i][j] + term
            if l > 0:
                delta = (s1s[l] * delta) @ p[f"W{l}"]
        rows = [torch.stack([entries[min(i, j)][max(i, j)] for j in range(d)], 1) for i in range(d)]
        hess = torch.stack(rows, 1) + hq
    return Derivatives(value, grad, hess)


def spd_logdet(hess: torch.Tensor, jitter: float = LOGDET_JITTER) -> torch.Tensor:
    """log det of a batch of SPD matrices via Cholesky, with diagonal jitter on failure."""
    chol, info = torch.linalg.cholesky_ex(hess)
    if bool((info > 0).any()):
        d = hess.shape[-1]
        bad = (info > 0).to(hess.dtype)[:, None, None]
        chol, info = torch.linalg.cholesky_ex(hess + jitter * bad * torch.eye(d, dtype=hess.dtype))
        if bool((info > 0).any()):
            idx = int(torch.nonzero(info > 0)[0, 0])
            raise ConvexityError(f"Hessian of psi is not positive definite at batch index {idx}")
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


def _prepare(f: ICNNFunction, x):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != f.dim:
        raise ValueError(f"expected points of dimension {f.dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input point")
    return torch.from_numpy(np.ascontiguousarray(arr)), single


def _theta(f: ICNNFunction) -> torch.Tensor:
    return torch.from_numpy(np.array(f.params))


def psi_value(f: ICNNFunction, x):
    xt, single = _prepare(f, x)
    with torch.no_grad():
        v = forward(f.arch, _theta(f), xt, order=0).value.numpy()
    return float(v[0]) if single else v


def grad_x(f: ICNNFunction, x):
    """The transport map x -> grad psi(x)."""
    xt, single = _prepare(f, x)
    with torch.no_grad():
        g = forward(f.arch, _theta(f), xt, order=1).grad.numpy()
    return g[0] if single else g


def hessian_logdet(f: ICNNFunction, x):
    """Spatial Hessian of psi and its log-determinant.

    Raises :class:`ConvexityError` if a Hessian is not positive definite
    after adding the jitter to its diagonal.
    """
    xt, single = _prepare(f, x)
    with torch.no_grad():
        h = forward(f.arch, _theta(f), xt, order=2).hess
        ld = spd_logdet(h)
    h, ld = h.numpy().copy(), ld.numpy()
    return (h[0], float(ld[0])) if single else (h, ld)


# ---------------------------------------------------------------------------
# Losses in theta
# ---------------------------------------------------------------------------


class _FieldValue(torch.autograd.Function):
    """Apply a numpy scalar field (value + gradient) inside an autograd graph."""

    @staticmethod
    def forward(ctx, y, scalar_field):
        ctx.save_for_backward(y)
        ctx.scalar_field = scalar_field
        return torch.from_numpy(np.asarray(scalar_field.value(y.detach().numpy()), dtype=np.float64))

    @staticmethod
    def backward(ctx, grad_out):
        (y,) = ctx.saved_tensors
        g = torch.from_numpy(np.asarray(ctx.scalar_field.grad(y.detach().numpy()), dtype=np.float64))
        return grad_out[:, None] * g, None


def field_value(scalar_field, y: torch.Tensor) -> torch.Tensor:
    """Differentiable (in y) evaluation of a numpy field with ``value`` and ``grad``."""
    return _FieldValue.apply(y, scalar_field)


Weight = Union[float, np.ndarray]


@dataclass(frozen=True)
class LossSpec:
    """Per-point weights of the terms of a scalar loss in theta.

    loss = sum_i [ psi_i psi(x_i) + transport_i ||grad psi(x_i) - x_i||^2
                   + potential_i G(grad psi(x_i)) - logdet_i log det Hess psi(x_i) ]

    Weights are scalars (applied to every point) or arrays of length n.
    ``g`` is required when ``potential`` is nonzero.
    """

    psi: Weight = 0.0
    transport: Weight = 0.0
    potential: Weight = 0.0
    logdet: Weight = 0.0
    g: Optional[object] = None

    @classmethod
    def mean_psi(cls, n: int) -> "LossSpec":
        return cls(psi=1.0 / n)

    @classmethod
    def jko(cls, n: int, eta: float, g=None) -> "LossSpec":
        return cls(transport=1.0 / (2 * eta * n), potential=(1.0 / n if g is not None else 0.0), logdet=1.0 / n, g=g)


def _uses(w) -> bool:
    return np.any(np.asarray(w) != 0)


def loss_torch(arch: ICNNArchitecture, theta: torch.Tensor, x: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    order = 2 if _uses(spec.logdet) else (1 if (_uses(spec.transport) or _uses(spec.potential)) else 0)
    der = forward(arch, theta, x, order=order)
    n = x.shape[0]

    def weight(w):
        w = np.asarray(w, dtype=np.float64)
        return torch.from_numpy(np.broadcast_to(w, (n,)).copy())

    total = torch.zeros((), dtype=DTYPE)
    if _uses(spec.psi):
        total = total + (weight(spec.psi) * der.value).sum()
    if _uses(spec.transport):
        diff = der.grad - x
        total = total + (weight(spec.transport) * (diff * diff).sum(1)).sum()
    if _uses(spec.potential):
        if spec.g is None:
            raise ValueError("potential weight given without a potential g")
        total = total + (weight(spec.potential) * field_value(spec.g, der.grad)).sum()
    if _uses(spec.logdet):
        total = total - (weight(spec.logdet) * spd_logdet(der.hess)).sum()
    return total


def loss_value(f: ICNNFunction, batch, spec: LossSpec) -> float:
    xt, _ = _prepare(f, batch)
    with torch.no_grad():
        return float(loss_torch(f.arch, _theta(f), xt, spec))


def loss_param_grad(f: ICNNFunction, batch, spec: LossSpec) -> np.ndarray:
    """Gradient in theta of the loss described by ``spec`` over ``batch``."""
    xt, _ = _prepare(f, batch)
    if len(xt) == 0:
        raise ValueError("empty batch")
    theta = _theta(f).requires_grad_(True)
    loss = loss_torch(f.arch, theta, xt, spec)
    (g,) = torch.autograd.grad(loss, theta)
    return g.numpy().copy()


# ---------------------------------------------------------------------------
# Constraint handling and initialisation
# ---------------------------------------------------------------------------


def project_nonneg(f: ICNNFunction) -> ICNNFunction:
    """Clamp the hidden-to-hidden and read-out weights at zero."""
    mask = f.arch.constrained_mask
    return f.with_params(np.where(mask, np.maximum(f.params, 0.0), f.params))


def init_near_identity(arch: ICNNArchitecture, seed: int) -> ICNNFunction:
    """Random network whose gradient map is within ``init_scale``-scaled distance of the identity.

    Q = I and c = 0, so the map is exactly the identity when ``init_scale`` is 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), INIT_STREAM]))
    d = arch.input_dim
    theta = np.zeros(arch.n_params)
    blocks = arch.unflatten(theta)
    if arch.quadratic_skip:
        blocks["quad"][...] = np.eye(d)
    prev = None
    for l, width in enumerate(arch.hidden_widths):
        if prev is not None:
            blocks[f"W{l}"][...] = rng.uniform(0.0, 1.0 / prev, size=(width, prev))
        blocks[f"A{l}"][...] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(width, d))
        blocks[f"b{l}"][...] = rng.normal(0.0, 1.0, size=width)
        prev = width
    blocks["out"][...] = arch.init_scale * rng.uniform(0.0, 1.0, size=prev) / prev
    return ICNNFunction(arch, theta)


def quadratic_function(matrix, hidden_widths: Sequence[int] = (1,)) -> ICNNFunction:
    """psi(x) = 0.5 x^T M x for symmetric positive-definite M (hidden part switched off)."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    arch = ICNNArchitecture(m.shape[0], tuple(hidden_widths), init_scale=0.0)
    theta = np.zeros(arch.n_params)
    arch.unflatten(theta)["quad"][...] = np.linalg.cholesky(m).T
    return ICNNFunction(arch, theta)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def header(f: ICNNFunction) -> dict:
    return {"format": "dcflow.icnn", "version": FORMAT_VERSION, "arch": f.arch.to_dict()}


def arch_from_dict(d: dict) -> ICNNArchitecture:
    return ICNNArchitecture(
        input_dim=int(d["input_dim"]),
        hidden_widths=tuple(d["hidden_widths"]),
        activation=d.get("activation", "softplus"),
        quadratic_skip=bool(d.get("quadratic_skip", True)),
        init_scale=float(d.get("init_scale", 1e-3)),
    )


def save_icnn(f: ICNNFunction, path) -> Path:
    """Write a versioned .npz holding a JSON header and little-endian float64 parameters."""
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header(f))), params=f.params.astype("<f8"))
    return path


def load_icnn(path) -> ICNNFunction:
    with np.load(path, allow_pickle=False) as data:
        head = json.loads(str(data["header"]))
        if head.get("format") != "dcflow.icnn" or head.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported ICNN file header: {head}")
        return ICNNFunction(arch_from_dict(head["arch"]), data["params"].astype(np.float64))
