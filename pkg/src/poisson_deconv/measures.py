"""k-atomic uniform measures, their moments, and evaluation distances.

The estimation target throughout the library is a uniform distribution on k
points of R^d (d = 1 or 2): every atom carries mass 1/k, and uniformity is
structural (weights are never stored).  This module provides the measure type,
exact moment computation, the moment distance M_k, exact p-Wasserstein
distances between equal-size uniform measures, the Hausdorff distance between
supports, Voronoi-cell conditional measures relative to a clustered reference,
the cluster-weighted local Wasserstein divergence, and a moment-matched
perturbation that produces adversarial pairs sharing their first k-1 moments.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial.distance import cdist

# Module-level tolerances: algebraic identities vs root-finding-limited checks.
ALGEBRAIC_TOL = 1e-12
ROOT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class AtomicUniformMeasure:
    """Uniform distribution on k atoms in R^d, each carrying mass 1/k.

    Parameters
    ----------
    atoms : array_like, shape (k, d) or (k,)
        Atom locations. A 1-d array is interpreted as k points on the line.
        Atoms may repeat (multiplicities are allowed); they must be finite.
    """

    atoms: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.atoms, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("atoms must be a non-empty (k, d) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("atoms must be finite (no NaN/inf coordinates)")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "atoms", pts)

    @property
    def k(self) -> int:
        return self.atoms.shape[0]

    @property
    def dimension(self) -> int:
        return self.atoms.shape[1]

    def as_complex(self) -> np.ndarray:
        """View the atoms as complex scalars (d=2: x+iy; d=1: x+0i)."""
        if self.dimension == 1:
            return self.atoms[:, 0].astype(complex)
        if self.dimension == 2:
            return self.atoms[:, 0] + 1j * self.atoms[:, 1]
        raise ValueError("complex view requires dimension 1 or 2")

    @classmethod
    def from_complex(cls, z, dimension: int = 2) -> "AtomicUniformMeasure":
        """Build a measure from complex scalars (dimension 2 or 1)."""
        z = np.asarray(z, dtype=complex).ravel()
        if dimension == 1:
            return cls(np.real(z)[:, None])
        return cls(np.column_stack([np.real(z), np.imag(z)]))

    def translate(self, shift) -> "AtomicUniformMeasure":
        return AtomicUniformMeasure(self.atoms + np.asarray(shift, float))

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "atoms": self.atoms.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "AtomicUniformMeasure":
        mu = cls(np.asarray(payload["atoms"], dtype=float))
        if mu.dimension != int(payload["dimension"]):
            raise ValueError("atom coordinates do not match declared dimension")
        return mu

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "AtomicUniformMeasure":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class MomentVector:
    """Moments m_alpha of a measure for 1 <= |alpha| <= order.

    ``entries`` maps either integer indices 1..order to complex scalars
    (the complex embedding used for d <= 2) or multi-index tuples with
    1 <= |alpha| <= order to real scalars.
    """

    order: int
    entries: dict

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.is_multi_index:
            dim = len(next(iter(self.entries)))
            expected = set(self.index_family(self.order, True, dim))
        else:
            expected = set(self.index_family(self.order, False))
        if set(self.entries) != expected:
            raise ValueError("entries must cover every index with 1 <= |alpha| <= order")
        if not all(np.isfinite(v).all() for v in map(np.asarray, self.entries.values())):
            raise ValueError("moment entries must be finite")

    @property
    def is_multi_index(self) -> bool:
        return isinstance(next(iter(self.entries)), tuple)

    @staticmethod
    def index_family(order: int, multi_index: bool, dimension: int = 2):
        if not multi_index:
            return [a for a in range(1, order + 1)]
        idx = []

        def rec(prefix, remaining):
            if len(prefix) == dimension - 1:
                idx.append(tuple(prefix + [remaining]))
                return
            for a in range(remaining + 1):
                rec(prefix + [a], remaining - a)

        for total in range(1, order + 1):
            rec([], total)
        return idx

    def as_array(self) -> np.ndarray:
        """Entries in canonical index order (1..k, or graded lexicographic)."""
        if self.is_multi_index:
            keys = sorted(self.entries, key=lambda a: (sum(a), a))
        else:
            keys = range(1, self.order + 1)
        return np.array([self.entries[key] for key in keys])


def exact_moments(mu: AtomicUniformMeasure, order: int, multi_index: bool = False) -> MomentVector:
    """Exact moments of a k-atomic uniform measure up to the given order.

    With ``multi_index=False`` (the default, valid for d <= 2) the atoms are
    viewed as complex scalars and entry alpha is (1/k) sum_i z_i^alpha.  With
    ``multi_index=True`` the entries are the monomial moments
    (1/k) sum_i prod_l x_{il}^{alpha_l} over all 1 <= |alpha| <= order.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not multi_index:
        z = mu.as_complex()
        entries = {a: np.mean(z**a) for a in range(1, order + 1)}
        return MomentVector(order, entries)
    entries = {}
    for alpha in MomentVector.index_family(order, True, mu.dimension):
        mono = np.prod(mu.atoms ** np.asarray(alpha, float), axis=1)
        entries[alpha] = float(np.mean(mono))
    return MomentVector(order, entries)


def moment_distance(a: MomentVector, b: MomentVector) -> float:
    """Moment difference M_k: the sum of |m_alpha(a) - m_alpha(b)| over all indices."""
    if a.order != b.order or set(a.entries) != set(b.entries):
        raise ValueError("moment vectors must share order and index family")
    return float(sum(abs(a.entries[key] - b.entries[key]) for key in a.entries))


def _pairwise(mu: AtomicUniformMeasure, nu: AtomicUniformMeasure) -> np.ndarray:
    if mu.dimension != nu.dimension:
        raise ValueError("measures must share the ambient dimension")
    return cdist(mu.atoms, nu.atoms)


def _bottleneck_value(dist: np.ndarray) -> float:
    """Smallest threshold at which a perfect matching using edges <= threshold exists."""
    k = dist.shape[0]
    values = np.unique(dist)
    lo, hi = 0, len(values) - 1

    def feasible(thr):
        adj = csr_matrix((dist <= thr).astype(np.int8))
        match = maximum_bipartite_matching(adj, perm_type="column")
        return int(np.sum(match >= 0)) == k

    if feasible(values[lo]):
        return float(values[lo])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(values[mid]):
            hi = mid
        else:
            lo = mid
    return float(values[hi])


def wasserstein_p(mu: AtomicUniformMeasure, nu: AtomicUniformMeasure, p) -> float:
    """Exact p-Wasserstein distance between two uniform measures with equal k.

    Solves the assignment problem over permutations: for finite p this is
    ((1/k) min_sigma sum_i ||theta_sigma(i) - eta_i||^p)^(1/p); for p = inf it
    is the bottleneck assignment value min_sigma max_i ||theta_sigma(i) - eta_i||.
    """
    if mu.k != nu.k:
        raise ValueError("wasserstein_p requires equal atom counts")
    dist = _pairwise(mu, nu)
    if np.isinf(p):
        return _bottleneck_value(dist)
    p = float(p)
    if p < 1:
        raise ValueError("p must lie in [1, inf]")
    row, col = linear_sum_assignment(dist**p)
    return float((dist[row, col] ** p).sum() / mu.k) ** (1.0 / p)


def _w1_uniform_general(a: np.ndarray, b: np.ndarray) -> float:
    """W_1 between uniform measures on possibly different atom counts.

    Used for conditional per-cell measures only; solved exactly by replicating
    atoms up to the least common multiple of the two counts and matching.
    """
    na, nb = a.shape[0], b.shape[0]
    ell = math.lcm(na, nb)
    aa = np.repeat(a, ell // na, axis=0)
    bb = np.repeat(b, ell // nb, axis=0)
    dist = cdist(aa, bb)
    row, col = linear_sum_assignment(dist)
    return float(dist[row, col].sum() / ell)


def hausdorff(mu: AtomicUniformMeasure, nu: AtomicUniformMeasure) -> float:
    """Hausdorff distance between the supports (multiplicity-insensitive)."""
    dist = _pairwise(mu, nu)
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))


@dataclass(frozen=True, eq=False)
class ClusterProfile:
    """Clustered reference measure mu0 for the local Wasserstein divergence.

    The reference is mu0 = (1/k) sum_j r_j delta_{c_j} with k0 distinct cluster
    centers c_j carrying multiplicities r_j (sum r_j = k).  The profile stores
    the separation (minimum pairwise center distance) and the cluster weights
    delta_j = prod_{i != j} ||c_i - c_j||^{r_i}.

    Parameters
    ----------
    centers : array_like, shape (k0, d)
        Distinct cluster centers.
    multiplicities : array_like of int, shape (k0,)
        Number of atoms per cluster, each >= 1.
    """

    centers: np.ndarray
    multiplicities: np.ndarray

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        mult = np.asarray(self.multiplicities, dtype=int)
        if centers.shape[0] != mult.shape[0]:
            raise ValueError("one multiplicity per center required")
        if np.any(mult < 1):
            raise ValueError("multiplicities must be >= 1")
        if centers.shape[0] > 1:
            dist = cdist(centers, centers)
            np.fill_diagonal(dist, np.inf)
            if dist.min() <= 0.0:
                raise ValueError("cluster centers must be distinct")
        centers.flags.writeable = False
        mult.flags.writeable = False
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "multiplicities", mult)

    @property
    def k0(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return int(self.multiplicities.sum())

    @property
    def separation(self) -> float:
        if self.k0 == 1:
            return float("inf")
        dist = cdist(self.centers, self.centers)
        np.fill_diagonal(dist, np.inf)
        return float(dist.min())

    @property
    def cell_weights(self) -> np.ndarray:
        """delta_j(mu0) = prod_{i != j} ||c_i - c_j||^{r_i}, all strictly positive."""
        dist = cdist(self.centers, self.centers)
        weights = np.empty(self.k0)
        for j in range(self.k0):
            others = [i for i in range(self.k0) if i != j]
            weights[j] = np.prod(dist[others, j] ** self.multiplicities[others])
        return weights

    @property
    def mu0(self) -> AtomicUniformMeasure:
        """The reference measure, with each center repeated per its multiplicity."""
        return AtomicUniformMeasure(np.repeat(self.centers, self.multiplicities, axis=0))


def voronoi_assign(profile: ClusterProfile, mu: AtomicUniformMeasure):
    """Assign atoms of mu to the Voronoi cells of the profile centers.

    Each atom goes to its nearest center; ties break toward the lowest cluster
    index.  Returns a list of k0 conditional measures (uniform on the atoms of
    the cell), with None flagging an empty cell.
    """
    dist = cdist(mu.atoms, profile.centers)
    owner = np.argmin(dist, axis=1)  # argmin takes the lowest index on ties
    cells = []
    for j in range(profile.k0):
        pts = mu.atoms[owner == j]
        cells.append(AtomicUniformMeasure(pts) if pts.shape[0] else None)
    return cells


def local_divergence(profile: ClusterProfile, mu: AtomicUniformMeasure,
                     nu: AtomicUniformMeasure) -> float:
    """Local Wasserstein divergence 1 ^ sum_j delta_j * W_1^{r_j}(mu_Vj, nu_Vj).

    Conventions: W_1 between two empty cells is 0; a nonempty cell against an
    empty one is infinite, which the ^1 cap turns into a result of 1.
    """
    if not (mu.k == nu.k == profile.k):
        raise ValueError("local_divergence requires mu.k == nu.k == profile k")
    cells_mu = voronoi_assign(profile, mu)
    cells_nu = voronoi_assign(profile, nu)
    weights = profile.cell_weights
    total = 0.0
    for j, (cm, cn) in enumerate(zip(cells_mu, cells_nu)):
        if cm is None and cn is None:
            continue
        if cm is None or cn is None:
            return 1.0
        w1 = _w1_uniform_general(cm.atoms, cn.atoms)
        total += weights[j] * w1 ** int(profile.multiplicities[j])
    return min(1.0, total)


def _poly_eval_from_roots(x, roots, offset):
    """Evaluate p(x) = prod (x - r_i) + offset and its derivative."""
    diffs = x - roots
    val = np.prod(diffs) + offset
    deriv = 0.0
    for i in range(len(roots)):
        deriv += np.prod(np.delete(diffs, i))
    return val, deriv


def perturb_matching_moments(mu: AtomicUniformMeasure, tau: float) -> AtomicUniformMeasure:
    """Perturb a measure on R into one matching its first k-1 moments.

    Shifts the monic polynomial with roots at the atoms by +tau and returns the
    uniform measure on the perturbed roots.  The construction leaves moments
    1..k-1 unchanged (the leading k coefficients are untouched), changes the
    k-th moment by exactly -tau, and moves the support.

    Raises
    ------
    ValueError
        If tau is too large for the perturbed polynomial to keep k distinct
        real roots; retry with a smaller tau.
    """
    if mu.dimension != 1:
        raise ValueError("perturb_matching_moments is defined on the real line")
    if tau <= 0:
        raise ValueError("tau must be positive")
    atoms = np.sort(mu.atoms[:, 0])
    if atoms.shape[0] > 1 and np.min(np.diff(atoms)) <= 0.0:
        raise ValueError("atoms must be distinct")
    coeffs = np.poly(atoms)
    coeffs[-1] += tau
    roots = np.roots(coeffs).astype(complex)
    # Newton-polish against the stable product-form evaluation.
    for i, z in enumerate(roots):
        for _ in range(50):
            val, deriv = _poly_eval_from_roots(z, atoms.astype(complex), tau)
            if deriv == 0 or abs(val) < 1e-16 * (1.0 + abs(z)) ** len(atoms):
                break
            step = val / deriv
            z = z - step
            if abs(step) < 1e-16 * (1.0 + abs(z)):
                break
        roots[i] = z
    scale = 1.0 + np.max(np.abs(atoms))
    if np.max(np.abs(roots.imag)) > 1e-8 * scale:
        raise ValueError(
            "tau too large: perturbed polynomial has complex roots; use a smaller tau"
        )
    new_atoms = np.sort(roots.real)
    if new_atoms.shape[0] > 1 and np.min(np.diff(new_atoms)) <= 0.0:
        raise ValueError(
            "tau too large: perturbed roots are no longer distinct; use a smaller tau"
        )
    return AtomicUniformMeasure(new_atoms)
