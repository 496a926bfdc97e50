"""All coordinate partial derivatives of a network, analytically.

The engine propagates truncated multivariate Taylor expansions (jets)
through the layers of a sinusoidal network: affine layers act linearly
on coefficients, sine layers compose exactly via d^j sin(u) / du^j =
sin(u + j*pi/2).  Internally coefficients follow the Taylor convention
(value / n!), which keeps composition well conditioned; raw partials
are restored at the boundary by multiplying the factorials back.

Derivatives are stored multiplicity-free: one entry per multi-index in
graded-lexicographic order (ascending total order, then lexicographic
with the first axis varying slowest), the natural basis since mixed
partials commute.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapabilityError, ContractViolation
from .siren import SirenNetwork, forward_many

__all__ = [
    "DEFAULT_MAX_ORDER",
    "multi_index_set",
    "stack_size",
    "JetSpace",
    "jet_space",
    "Jet",
    "DerivativeStack",
    "truncated_product",
    "coordinate_jets",
    "siren_jet_coeffs",
    "jet_eval",
    "jet_eval_many",
    "jet_elementwise",
    "first_order_closed_form",
    "fd_derivatives",
    "derivative_shift_tables",
    "stack_to_symmetric_tensor",
    "full_tensor_multiplicities",
]

DEFAULT_MAX_ORDER = 4


def _indices_of_total(m: int, total: int):
    if m == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _indices_of_total(m - 1, total - first):
            yield (first,) + rest


@lru_cache(maxsize=None)
def multi_index_set(m: int, order: int) -> tuple[tuple[int, ...], ...]:
    """All exponent tuples with |n| <= order, in graded-lex order."""
    if m < 1 or order < 0:
        raise ContractViolation(f"need m >= 1 and order >= 0, got m={m}, order={order}")
    out = []
    for k in range(order + 1):
        out.extend(_indices_of_total(m, k))
    return tuple(out)


def stack_size(m: int, order: int) -> int:
    """Number of distinct partial derivatives up to the given order."""
    return math.comb(order + m, m)


@dataclass(frozen=True)
class JetSpace:
    """Precomputed index tables for one (dimension, order) pair."""

    m: int
    order: int
    indices: tuple[tuple[int, ...], ...]
    index_of: dict[tuple[int, ...], int]
    factorials: np.ndarray  # prod of per-axis factorials, shape (M,)
    totals: np.ndarray  # |n| per entry, shape (M,)
    mul_i: np.ndarray  # triple tables for truncated products
    mul_j: np.ndarray
    mul_starts: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


@lru_cache(maxsize=None)
def jet_space(m: int, order: int) -> JetSpace:
    indices = multi_index_set(m, order)
    index_of = {n: i for i, n in enumerate(indices)}
    factorials = np.array(
        [math.prod(math.factorial(e) for e in n) for n in indices], dtype=np.float64
    )
    totals = np.array([sum(n) for n in indices], dtype=np.int64)
    # Product triples grouped by target index; enumeration order is a
    # prefix of the same table at any higher order, so truncation is exact.
    mi, mj, starts = [], [], []
    for k_pos, nk in enumerate(indices):
        starts.append(len(mi))
        for i_pos, ni in enumerate(indices):
            nj = tuple(a - b for a, b in zip(nk, ni))
            if min(nj) < 0:
                continue
            mi.append(i_pos)
            mj.append(index_of[nj])
    return JetSpace(
        m=m,
        order=order,
        indices=indices,
        index_of=index_of,
        factorials=factorials,
        totals=totals,
        mul_i=np.array(mi, dtype=np.intp),
        mul_j=np.array(mj, dtype=np.intp),
        mul_starts=np.array(starts, dtype=np.intp),
    )


def truncated_product(a: np.ndarray, b: np.ndarray, space: JetSpace, axis: int = -1) -> np.ndarray:
    """Product of Taylor-coefficient arrays, truncated at space.order."""
    prods = np.take(a, space.mul_i, axis=axis) * np.take(b, space.mul_j, axis=axis)
    return np.add.reduceat(prods, space.mul_starts, axis=axis)


@dataclass
class Jet:
    """Taylor coefficients per output channel, last axis indexed by
    the canonical multi-index order (coefficient at n is value / n!)."""

    coeffs: np.ndarray  # (..., M)
    m: int
    order: int

    @property
    def space(self) -> JetSpace:
        return jet_space(self.m, self.order)

    @property
    def value(self) -> np.ndarray:
        return self.coeffs[..., 0]

    def to_stack(self) -> "DerivativeStack":
        return DerivativeStack(self.coeffs * self.space.factorials, self.m, self.order)


@dataclass
class DerivativeStack:
    """Raw partial derivatives at one point, canonical order.

    ``values`` has shape (channels, M); entry 0 per channel equals the
    plain forward value.
    """

    values: np.ndarray
    m: int
    order: int

    @property
    def space(self) -> JetSpace:
        return jet_space(self.m, self.order)

    def entry(self, n: tuple[int, ...]) -> np.ndarray:
        return self.values[..., self.space.index_of[tuple(n)]]


# ---------------------------------------------------------------------------
# jet propagation through a network
# ---------------------------------------------------------------------------


def coordinate_jets(xs: np.ndarray, space: JetSpace) -> np.ndarray:
    """Seed jets for the identity map at a batch of points: (P, M, m)."""
    xs = np.asarray(xs, dtype=np.float64)
    p, m = xs.shape
    coeffs = np.zeros((p, space.size, m))
    coeffs[:, 0, :] = xs
    if space.order >= 1:
        for i in range(m):
            coeffs[:, 1 + i, i] = 1.0
    return coeffs


def _sine_compose(coeffs: np.ndarray, pre_values: np.ndarray, scale: float, space: JetSpace) -> tuple[np.ndarray, np.ndarray]:
    """sin(scale * u) applied to jets in (P, M, width) layout.

    pre_values is the plain forward pre-activation for the same batch;
    the value row is taken from it so jet values match forward() bit
    for bit.  Returns (jets, activation values).
    """
    k = space.order
    act = np.sin(scale * pre_values)
    out = np.zeros_like(coeffs)
    out[:, 0, :] = act
    if k >= 1:
        hat = coeffs.copy()
        hat[:, 0, :] = 0.0
        power = None
        for j in range(1, k + 1):
            power = hat if j == 1 else truncated_product(power, hat, space, axis=1)
            cj = (scale**j) * np.sin(scale * pre_values + j * np.pi / 2.0) / math.factorial(j)
            out += cj[:, None, :] * power
        out[:, 0, :] = act
    return out, act


def siren_jet_coeffs(
    net: SirenNetwork,
    xs: np.ndarray,
    order: int,
    max_order: int = DEFAULT_MAX_ORDER,
) -> np.ndarray:
    """Taylor coefficients of the network at each point: (P, M, c).

    The value row is computed along the plain forward path, so stack
    entry (0, ..., 0) bit-equals forward().
    """
    if order < 0:
        raise ContractViolation(f"order must be nonnegative, got {order}")
    if order > max_order:
        raise CapabilityError(
            f"derivative order {order} exceeds the configured maximum {max_order}"
        )
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != net.input_dim:
        raise ContractViolation(
            f"coordinates must have shape (n, {net.input_dim}), got {xs.shape}"
        )
    space = jet_space(net.input_dim, order)
    p = xs.shape[0]
    jets = coordinate_jets(xs, space)
    h = xs
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = h @ w + b
        jets = (jets.reshape(p * space.size, -1) @ w).reshape(p, space.size, w.shape[1])
        jets[:, 0, :] = pre
        if i < last:
            scale = net.omega0 if i == 0 else 1.0
            jets, h = _sine_compose(jets, pre, scale, space)
        else:
            h = pre
    return jets


def jet_eval_many(
    net: SirenNetwork,
    xs: np.ndarray,
    order: int,
    max_order: int = DEFAULT_MAX_ORDER,
) -> np.ndarray:
    """Raw partial derivatives at each point: (P, c, M)."""
    space = jet_space(net.input_dim, order)
    coeffs = siren_jet_coeffs(net, xs, order, max_order)
    return np.ascontiguousarray(coeffs.transpose(0, 2, 1)) * space.factorials


def jet_eval(
    net: SirenNetwork,
    x: np.ndarray,
    order: int,
    max_order: int = DEFAULT_MAX_ORDER,
) -> DerivativeStack:
    """All partial derivatives of the network at one point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ContractViolation(f"expected coordinate of shape ({net.input_dim},), got {x.shape}")
    values = jet_eval_many(net, x[None, :], order, max_order)[0]
    return DerivativeStack(values, net.input_dim, order)


def jet_elementwise(jet: Jet, fn) -> Jet:
    """Apply a tagged scalar nonlinearity to a jet.

    fn is "identity", "relu", or ("sine", scale).  ReLU multiplies all
    coefficients by [value > 0], exact away from the kink and defined
    as the zero branch at it.
    """
    space = jet.space
    if fn == "identity":
        return Jet(jet.coeffs.copy(), jet.m, jet.order)
    if fn == "relu":
        ind = (jet.coeffs[..., 0] > 0.0).astype(np.float64)
        return Jet(jet.coeffs * ind[..., None], jet.m, jet.order)
    if isinstance(fn, tuple) and len(fn) == 2 and fn[0] == "sine":
        scale = float(fn[1])
        flat = jet.coeffs.reshape(-1, space.size)
        out, _ = _sine_compose(flat[:, :, None], flat[:, 0][:, None], scale, space)
        return Jet(out[:, :, 0].reshape(jet.coeffs.shape), jet.m, jet.order)
    raise CapabilityError(f"unsupported elementwise function tag: {fn!r}")


def first_order_closed_form(net: SirenNetwork, x: np.ndarray) -> np.ndarray:
    """Gradient (c, m) as the chain-rule product of layer Jacobians.

    Diagonal sine-derivative factors multiply the reused layer weights,
    so this is an independent closed-form path against the jet engine.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ContractViolation(f"expected coordinate of shape ({net.input_dim},), got {x.shape}")
    h = x[None, :]
    jac = np.eye(net.input_dim)
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = h @ w + b
        jac = jac @ w
        if i < last:
            scale = net.omega0 if i == 0 else 1.0
            jac = jac * (scale * np.cos(scale * pre))
            h = np.sin(scale * pre)
        else:
            h = pre
    return jac.T


def _stencil_1d(order: int, h: float) -> list[tuple[float, float]]:
    """Central-difference stencil for one axis: (offset, coefficient)."""
    if order == 0:
        return [(0.0, 1.0)]
    return [
        ((order / 2.0 - k) * h, ((-1.0) ** k) * math.comb(order, k) / h**order)
        for k in range(order + 1)
    ]


def fd_derivatives(f, x: np.ndarray, order: int, h: float = 1e-4) -> DerivativeStack:
    """Finite-difference oracle: tensor central stencils per multi-index.

    ``f`` maps a coordinate to a scalar or a (c,) vector.  Independent
    of the jet engine by construction.
    """
    if h <= 0:
        raise ContractViolation(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    space = jet_space(m, order)
    probe = np.atleast_1d(np.asarray(f(x), dtype=np.float64))
    values = np.zeros((probe.shape[0], space.size))
    for pos, n in enumerate(space.indices):
        stencils = [_stencil_1d(n[axis], h) for axis in range(m)]
        acc = np.zeros_like(probe)
        for combo in itertools.product(*stencils):
            point = x + np.array([off for off, _ in combo])
            coeff = math.prod(c for _, c in combo)
            acc = acc + coeff * np.atleast_1d(np.asarray(f(point), dtype=np.float64))
        values[:, pos] = acc
    return DerivativeStack(values, m, order)


def derivative_shift_tables(base: JetSpace, sub: JetSpace, rem: JetSpace) -> tuple[np.ndarray, np.ndarray]:
    """Tables for reading the jet of a partial derivative out of a jet.

    For base coefficients t, the Taylor coefficients of the n-th
    partial are s_q = t[n + q] * (n + q)! / q!.  Returns SRC and FAC of
    shape (sub.size, rem.size); requires sub.order + rem.order <=
    base.order.
    """
    if sub.order + rem.order > base.order:
        raise ContractViolation(
            f"need base order >= {sub.order + rem.order}, got {base.order}"
        )
    src = np.zeros((sub.size, rem.size), dtype=np.intp)
    fac = np.zeros((sub.size, rem.size))
    for a, n in enumerate(sub.indices):
        for b, q in enumerate(rem.indices):
            tot = tuple(i + j for i, j in zip(n, q))
            src[a, b] = base.index_of[tot]
            fac[a, b] = math.prod(
                math.factorial(i + j) // math.factorial(j) for i, j in zip(n, q)
            )
    return src, fac


def full_tensor_multiplicities(space: JetSpace) -> np.ndarray:
    """Count of index permutations per entry: |n|! / prod(n_i!)."""
    return np.array(
        [
            math.factorial(int(t)) / math.prod(math.factorial(e) for e in n)
            for t, n in zip(space.totals, space.indices)
        ]
    )


def stack_to_symmetric_tensor(values: np.ndarray, m: int, k: int) -> np.ndarray:
    """Expand the order-k slice of a single-channel stack to the full
    m^k symmetric derivative tensor."""
    space = jet_space(m, max(k, 0))
    if k == 0:
        return np.asarray(values[0])
    tensor = np.zeros((m,) * k)
    for combo in np.ndindex(*([m] * k)):
        n = [0] * m
        for axis in combo:
            n[axis] += 1
        tensor[combo] = values[space.index_of[tuple(n)]]
    return tensor
