"""Finite-dimensional closed convex cones and box sets.

Cones are stored by generators. ``contains`` answers primal membership,
``dual_contains`` answers membership in the dual cone
``K+ = {xi : <y, xi> >= 0 for all y in K}``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

DEFAULT_TOL = 1e-10

KINDS = ("orthant", "zero", "free", "product", "polyhedral")


class DimensionError(ValueError):
    """Raised when a vector does not match the ambient dimension of a cone or box."""


@dataclass(frozen=True)
class ConeSpec:
    """A closed convex cone in R^n.

    ``kind`` is one of ``orthant``, ``zero``, ``free``, ``product`` or
    ``polyhedral``. Polyhedral cones are ``{G w : w >= 0}`` with the columns
    of ``generators`` as the generating rays.
    """

    kind: str
    dim: int = 0
    factors: tuple[ConeSpec, ...] = ()
    generators: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.kind == "product":
            if not self.factors:
                raise ValueError("product cone needs at least one factor")
            object.__setattr__(self, "dim", sum(f.dim for f in self.factors))
        elif self.kind == "polyhedral":
            if self.generators is None:
                raise ValueError("polyhedral cone needs a generator matrix")
            G = np.atleast_2d(np.asarray(self.generators, dtype=float))
            if G.size == 0:
                raise ValueError("polyhedral cone needs at least one generator")
            if np.any(np.all(G == 0.0, axis=0)):
                raise ValueError("polyhedral generator matrix has an all-zero column")
            G.setflags(write=False)
            object.__setattr__(self, "generators", G)
            object.__setattr__(self, "dim", G.shape[0])
        if self.dim <= 0:
            raise ValueError("cone dimension must be positive")

    # constructors -------------------------------------------------------
    @classmethod
    def orthant(cls, n: int) -> ConeSpec:
        return cls("orthant", n)

    @classmethod
    def zero(cls, n: int) -> ConeSpec:
        return cls("zero", n)

    @classmethod
    def free(cls, n: int) -> ConeSpec:
        return cls("free", n)

    @classmethod
    def product(cls, factors: Sequence[ConeSpec]) -> ConeSpec:
        return cls("product", factors=tuple(factors))

    @classmethod
    def polyhedral(cls, generators) -> ConeSpec:
        return cls("polyhedral", generators=np.asarray(generators, dtype=float))

    # generator views ------------------------------------------------------
    def primal_generators(self) -> np.ndarray:
        """Columns spanning the cone as nonnegative combinations (n x p)."""
        n = self.dim
        if self.kind == "orthant":
            return np.eye(n)
        if self.kind == "zero":
            return np.zeros((n, 0))
        if self.kind == "free":
            return np.hstack([np.eye(n), -np.eye(n)])
        if self.kind == "polyhedral":
            return np.array(self.generators)
        return _block_diag([f.primal_generators() for f in self.factors])

    def dual_generators(self) -> np.ndarray:
        """Columns spanning the dual cone as nonnegative combinations."""
        n = self.dim
        if self.kind == "orthant":
            return np.eye(n)
        if self.kind == "zero":
            return np.hstack([np.eye(n), -np.eye(n)])
        if self.kind == "free":
            return np.zeros((n, 0))
        if self.kind == "polyhedral":
            return _polyhedral_dual_generators(np.array(self.generators))
        return _block_diag([f.dual_generators() for f in self.factors])

    def split(self, y) -> list[np.ndarray]:
        """Split a product-cone vector into its factor blocks."""
        y = np.asarray(y, dtype=float)
        if self.kind != "product":
            return [y]
        out, start = [], 0
        for f in self.factors:
            out.append(y[start : start + f.dim])
            start += f.dim
        return out


def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def _polyhedral_dual_generators(G: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Generators of {xi : G^T xi >= 0} by enumeration of tight row subsets.

    The dual cone is L + P where L = null(G^T) is its lineality space and P is
    pointed inside L-perp. Extreme rays of P are the directions in L-perp
    making rank(G)-1 independent rows of G^T tight.
    """
    n = G.shape[0]
    u, s, vt = np.linalg.svd(G.T)
    rank = int(np.sum(s > tol * max(1.0, s[0])))
    lineality = vt[rank:].T  # n x (n - rank)
    rays = [lineality, -lineality]
    if rank > 0:
        # coordinates in the row space of G^T
        basis = vt[:rank].T  # n x rank
        A = G.T @ basis  # p x rank
        p = A.shape[0]
        found = []
        if rank == 1:
            for sign in (1.0, -1.0):
                d = sign * basis[:, 0]
                if np.all(G.T @ d >= -tol):
                    found.append(d)
        else:
            for rows in itertools.combinations(range(p), rank - 1):
                sub = A[list(rows)]
                _, ss, svt = np.linalg.svd(sub)
                if np.sum(ss > tol * max(1.0, ss[0])) != rank - 1:
                    continue
                d = basis @ svt[-1]
                for cand in (d, -d):
                    if np.all(G.T @ cand >= -1e-10 * np.linalg.norm(cand)):
                        found.append(cand / np.linalg.norm(cand))
                        break
        uniq: list[np.ndarray] = []
        for d in found:
            if not any(np.allclose(d, e, atol=1e-9) for e in uniq):
                uniq.append(d)
        if uniq:
            rays.append(np.column_stack(uniq))
    return np.hstack([r.reshape(n, -1) for r in rays])


def _check_dim(cone: ConeSpec, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != cone.dim:
        raise DimensionError(f"vector has dimension {y.shape[0]}, cone lives in R^{cone.dim}")
    return y


def contains(cone: ConeSpec, y, tol: float = DEFAULT_TOL) -> bool:
    """True iff ``y`` lies within ``tol`` of the cone."""
    y = _check_dim(cone, y)
    kind = cone.kind
    if kind == "orthant":
        return bool(np.all(y >= -tol))
    if kind == "zero":
        return bool(np.all(np.abs(y) <= tol))
    if kind == "free":
        return True
    if kind == "product":
        return all(contains(f, part, tol) for f, part in zip(cone.factors, cone.split(y)))
    G = cone.generators
    _, resid = nnls(G, y)
    return bool(resid <= tol * max(1.0, np.linalg.norm(y)) or resid <= tol)


def dual_contains(cone: ConeSpec, xi, tol: float = DEFAULT_TOL) -> bool:
    """True iff <g, xi> >= -tol for every generator g of the cone."""
    xi = _check_dim(cone, xi)
    G = cone.primal_generators()
    if G.shape[1] == 0:
        return True
    return bool(np.all(G.T @ xi >= -tol))


def interior_contains(cone: ConeSpec, y) -> bool:
    """True iff <y, xi> > 0 for every nonzero dual generator xi.

    Cones with empty interior (zero cone, lower-dimensional polyhedral cones)
    always answer False since their dual has a lineality space.
    """
    y = _check_dim(cone, y)
    D = cone.dual_generators()
    D = D[:, np.linalg.norm(D, axis=0) > 0]
    if D.shape[1] == 0:
        return True
    return bool(np.all(D.T @ y > 0.0))


def boundary_distance(cone: ConeSpec, y) -> float:
    """Distance from a point of the cone to the cone's boundary.

    Zero when the cone has empty interior; ``inf`` for the whole space.
    """
    y = _check_dim(cone, y)
    D = cone.dual_generators()
    norms = np.linalg.norm(D, axis=0)
    D, norms = D[:, norms > 0], norms[norms > 0]
    if D.shape[1] == 0:
        return float("inf")
    return float(max(0.0, np.min((D.T @ y) / norms)))


@dataclass(frozen=True)
class BoxSet:
    """Closed box ``{x : lower <= x <= upper}``; infinite bounds allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionError("box bounds have different lengths")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def whole_space(cls, n: int) -> BoxSet:
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def uniform(cls, n: int, lo: float, hi: float) -> BoxSet:
        return cls(np.full(n, lo), np.full(n, hi))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, x):
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, tol: float = DEFAULT_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


def normal_cone_residual(box: BoxSet, x, xi, tol: float = 1e-9) -> float:
    """max(0, sup_{c in box} <c - x, xi>); zero iff xi lies in N_C(x).

    The supremum separates over coordinates. An unbounded coordinate pointing
    along a nonzero component of ``xi`` gives ``inf``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if x.shape[0] != box.dim or xi.shape[0] != box.dim:
        raise DimensionError("dimension mismatch between box, point and normal vector")
    if not box.contains(x, tol):
        raise ValueError("point lies outside the box")
    total = 0.0
    for lo, hi, xk, sk in zip(box.lower, box.upper, x, xi):
        if sk > 0:
            if not np.isfinite(hi):
                return float("inf")
            total += (hi - xk) * sk
        elif sk < 0:
            if not np.isfinite(lo):
                return float("inf")
            total += (lo - xk) * sk
    return max(0.0, float(total))


def normal_cone_generators(box: BoxSet, x, tol: float = 1e-9) -> np.ndarray:
    """Columns spanning N_C(x) for a box: +e_k at active upper, -e_k at active lower bounds."""
    x = np.asarray(x, dtype=float).reshape(-1)
    cols = []
    for k in range(box.dim):
        e = np.zeros(box.dim)
        e[k] = 1.0
        if np.isfinite(box.upper[k]) and x[k] >= box.upper[k] - tol:
            cols.append(e)
        if np.isfinite(box.lower[k]) and x[k] <= box.lower[k] + tol:
            cols.append(-e)
    if not cols:
        return np.zeros((box.dim, 0))
    return np.column_stack(cols)
