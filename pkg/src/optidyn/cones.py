"""Symmetric-cone building blocks: free, nonnegative, and second-order cones.

Vectors live in an ordered Cartesian product of blocks. The nonnegative and
second-order cones are self dual; the dual of the free cone is the zero cone,
which shows up when dualizing a spec but is never used as a primal block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "ConeKind",
    "ConeBlock",
    "ConeSpec",
    "free",
    "nonneg",
    "second_order",
    "zero",
    "contains",
    "dual",
    "cone_product",
    "identity_element",
    "product_jacobians",
    "complementarity_residual",
    "complementarity_jacobians",
]

# Computed dual variables on zero-cone slices carry LU round-off; exact
# equality would spuriously reject them during the line search.
_ZERO_TOL = 1e-9


class ConeKind(Enum):
    FREE = "free"
    ZERO = "zero"
    NONNEG = "nonneg"
    SECOND_ORDER = "second_order"


@dataclass(frozen=True)
class ConeBlock:
    """One block of a cone product: a kind plus its dimension."""

    kind: ConeKind
    dim: int

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"cone block needs dim >= 1, got {self.dim}")
        if self.kind is ConeKind.SECOND_ORDER and self.dim < 2:
            raise ValueError("second-order block needs head plus tail (dim >= 2)")


@dataclass(frozen=True)
class ConeSpec:
    """Ordered product of cone blocks."""

    blocks: tuple[ConeBlock, ...]
    _slices: tuple[slice, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        slices = []
        start = 0
        for block in self.blocks:
            slices.append(slice(start, start + block.dim))
            start += block.dim
        object.__setattr__(self, "_slices", tuple(slices))

    @property
    def total_dim(self) -> int:
        return sum(block.dim for block in self.blocks)

    def slices(self) -> tuple[slice, ...]:
        return self._slices


def free(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.FREE, dim)


def nonneg(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.NONNEG, dim)


def second_order(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.SECOND_ORDER, dim)


def zero(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.ZERO, dim)


def _check_vector(spec: ConeSpec, x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.total_dim,):
        raise ValueError(
            f"{name} has shape {x.shape}, cone spec expects ({spec.total_dim},)"
        )
    return x


def contains(spec: ConeSpec, x: np.ndarray, strict: bool = False) -> bool:
    """Blockwise cone membership. With ``strict``, interior membership.

    Free blocks always pass; zero blocks require (numerically) zero entries;
    second-order blocks test the head against the Euclidean norm of the tail.
    """
    x = _check_vector(spec, x, "x")
    for block, sl in zip(spec.blocks, spec.slices()):
        v = x[sl]
        if block.kind is ConeKind.FREE:
            continue
        if block.kind is ConeKind.ZERO:
            if np.any(np.abs(v) > _ZERO_TOL):
                return False
        elif block.kind is ConeKind.NONNEG:
            if strict:
                if np.any(v <= 0.0):
                    return False
            elif np.any(v < 0.0):
                return False
        else:
            tail = float(np.linalg.norm(v[1:]))
            if strict:
                if not tail < v[0]:
                    return False
            elif not tail <= v[0]:
                return False
    return True


_DUAL_KIND = {
    ConeKind.FREE: ConeKind.ZERO,
    ConeKind.ZERO: ConeKind.FREE,
    ConeKind.NONNEG: ConeKind.NONNEG,
    ConeKind.SECOND_ORDER: ConeKind.SECOND_ORDER,
}


def dual(spec: ConeSpec) -> ConeSpec:
    """Blockwise dual cone."""
    return ConeSpec(tuple(ConeBlock(_DUAL_KIND[b.kind], b.dim) for b in spec.blocks))


def cone_product(spec: ConeSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bilinear blockwise product: elementwise except on second-order blocks,
    where (a o b) = (a.b, a_1 b_tail + b_1 a_tail)."""
    a = _check_vector(spec, a, "a")
    b = _check_vector(spec, b, "b")
    out = np.empty(spec.total_dim)
    for block, sl in zip(spec.blocks, spec.slices()):
        if block.kind is ConeKind.SECOND_ORDER:
            ab, bb = a[sl], b[sl]
            out[sl.start] = ab @ bb
            out[sl.start + 1 : sl.stop] = ab[0] * bb[1:] + bb[0] * ab[1:]
        else:
            out[sl] = a[sl] * b[sl]
    return out


def identity_element(spec: ConeSpec) -> np.ndarray:
    """Product identity: ones on nonnegative blocks, (1, 0, ...) on
    second-order blocks, zeros on free and zero blocks."""
    e = np.zeros(spec.total_dim)
    for block, sl in zip(spec.blocks, spec.slices()):
        if block.kind is ConeKind.NONNEG:
            e[sl] = 1.0
        elif block.kind is ConeKind.SECOND_ORDER:
            e[sl.start] = 1.0
    return e


def _arrow(v: np.ndarray) -> np.ndarray:
    """Arrowhead matrix of a second-order block: arrow(a) @ b == a o b."""
    d = v.shape[0]
    A = v[0] * np.eye(d)
    A[0, 1:] = v[1:]
    A[1:, 0] = v[1:]
    return A


def product_jacobians(
    spec: ConeSpec, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact linear maps (L_a, L_b) with d(a o b) = L_a da + L_b db."""
    a = _check_vector(spec, a, "a")
    b = _check_vector(spec, b, "b")
    n = spec.total_dim
    La = np.zeros((n, n))
    Lb = np.zeros((n, n))
    for block, sl in zip(spec.blocks, spec.slices()):
        if block.kind is ConeKind.SECOND_ORDER:
            La[sl, sl] = _arrow(b[sl])
            Lb[sl, sl] = _arrow(a[sl])
        else:
            idx = np.arange(sl.start, sl.stop)
            La[idx, idx] = b[sl]
            Lb[idx, idx] = a[sl]
    return La, Lb


def complementarity_residual(
    spec: ConeSpec, z: np.ndarray, nu: np.ndarray, mu: float
) -> np.ndarray:
    """Relaxed complementarity rows, one per coordinate of ``z``.

    Cone blocks contribute z o nu - mu * e. Free blocks pair with the zero
    cone, so their rows reduce to the dual variable itself.
    """
    z = _check_vector(spec, z, "z")
    nu = _check_vector(spec, nu, "nu")
    out = np.empty(spec.total_dim)
    for block, sl in zip(spec.blocks, spec.slices()):
        if block.kind is ConeKind.FREE:
            out[sl] = nu[sl]
        elif block.kind is ConeKind.SECOND_ORDER:
            zb, nb = z[sl], nu[sl]
            out[sl.start] = zb @ nb - mu
            out[sl.start + 1 : sl.stop] = zb[0] * nb[1:] + nb[0] * zb[1:]
        elif block.kind is ConeKind.NONNEG:
            out[sl] = z[sl] * nu[sl] - mu
        else:
            raise ValueError("zero blocks are not valid primal cone blocks")
    return out


def complementarity_jacobians(
    spec: ConeSpec, z: np.ndarray, nu: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the complementarity rows with respect to (z, nu)."""
    z = _check_vector(spec, z, "z")
    nu = _check_vector(spec, nu, "nu")
    n = spec.total_dim
    dz = np.zeros((n, n))
    dnu = np.zeros((n, n))
    for block, sl in zip(spec.blocks, spec.slices()):
        if block.kind is ConeKind.FREE:
            idx = np.arange(sl.start, sl.stop)
            dnu[idx, idx] = 1.0
        elif block.kind is ConeKind.SECOND_ORDER:
            dz[sl, sl] = _arrow(nu[sl])
            dnu[sl, sl] = _arrow(z[sl])
        elif block.kind is ConeKind.NONNEG:
            idx = np.arange(sl.start, sl.stop)
            dz[idx, idx] = nu[sl]
            dnu[idx, idx] = z[sl]
        else:
            raise ValueError("zero blocks are not valid primal cone blocks")
    return dz, dnu
