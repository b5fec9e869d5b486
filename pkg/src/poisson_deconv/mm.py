"""Method-of-moments estimation from binned Poisson counts.

The estimator chain: kernel-adapted monic polynomials psi_alpha turn bin
counts into unbiased moment estimates of the mixing measure; Newton's
identities convert power-sum moments into elementary symmetric polynomials;
Vieta's formula assembles the monic polynomial whose roots are the atoms; a
root finder recovers them.  Three variants are exposed: the complex estimator
for planar data, its real-line projection, and a general moment-matching
optimizer constrained to a domain box.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .kernels import Kernel, KernelMoments, kernel_moments
from .measures import AtomicUniformMeasure, MomentVector
from .observation import BinGrid, CountImage


class RootRecoveryError(RuntimeError):
    """Neither the iterative root finder nor the eigenvalue fallback converged."""


class DegenerateDataWarning(UserWarning):
    """All counts are zero; the estimator returns window-center atoms."""


@dataclass(frozen=True, eq=False)
class PsiPolynomials:
    """Monic polynomials psi_0..psi_order with E_{K*mu}[psi_i(V)] = m_i(mu).

    ``coeffs[i, j]`` is the coefficient of z^j in psi_i; the matrix is unit
    lower triangular (each psi_i is monic of degree i).
    """

    coeffs: np.ndarray
    flavor: str  # "real" or "complex"

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs)
        if coeffs.ndim != 2 or coeffs.shape[0] != coeffs.shape[1]:
            raise ValueError("coeffs must be square (order+1, order+1)")
        if not np.allclose(np.diag(coeffs), 1.0):
            raise ValueError("each psi_i must be monic (unit diagonal)")
        coeffs = coeffs.astype(complex if self.flavor == "complex" else float)
        coeffs.flags.writeable = False
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def order(self) -> int:
        return self.coeffs.shape[0] - 1

    def evaluate(self, i: int, z) -> np.ndarray:
        """psi_i evaluated at scalar or array argument."""
        return np.polynomial.polynomial.polyval(z, self.coeffs[i, : i + 1])

    @classmethod
    def monomials(cls, order: int, flavor: str = "complex") -> "PsiPolynomials":
        """psi_i(z) = z^i; exact for rotationally symmetric planar kernels."""
        return cls(np.eye(order + 1), flavor)


def compute_psi(kmoments: KernelMoments) -> PsiPolynomials:
    """Kernel-adapted moment polynomials from the kernel moments m_0..m_ell.

    Builds the unit lower-triangular matrix M with M[i, j] = C(i, j) *
    m_{i-j}^K, which expresses the blurred monomial expectations in terms of
    the clean ones; row i of M^{-1} holds the coefficients of psi_i.  For the
    standard Gaussian on the line this reproduces the probabilists' Hermite
    polynomials.
    """
    ell = kmoments.order
    dtype = complex if kmoments.flavor == "complex" else float
    M = np.zeros((ell + 1, ell + 1), dtype=dtype)
    for i in range(ell + 1):
        for j in range(i + 1):
            M[i, j] = math.comb(i, j) * kmoments.values[i - j]
    A = solve_triangular(M, np.eye(ell + 1, dtype=dtype), lower=True, unit_diagonal=True)
    return PsiPolynomials(A, kmoments.flavor)


def estimate_moments(image: CountImage, psi: PsiPolynomials, k: int) -> MomentVector:
    """Moment estimates m_hat_alpha = sum_i psi_alpha(gamma_i) X_i / t.

    In noiseless mode (t = inf) the stored intensities stand in for X_i / t.
    Planar grids feed the anchors through the x+iy embedding (complex psi);
    1-d grids use the real flavor.
    """
    if k < 1 or k > psi.order:
        raise ValueError("k must satisfy 1 <= k <= psi.order")
    grid = image.grid
    anchors = grid.anchors()
    if grid.dimension == 2:
        if psi.flavor != "complex":
            raise ValueError("planar images require complex-flavor psi")
        gamma = anchors[:, 0] + 1j * anchors[:, 1]
    else:
        gamma = anchors[:, 0]
    weights = image.counts if image.noiseless else image.counts / image.t
    entries = {}
    for a in range(1, k + 1):
        entries[a] = complex(np.sum(psi.evaluate(a, gamma) * weights))
    return MomentVector(k, entries)


def newton_to_elementary(moments, k: int | None = None) -> np.ndarray:
    """Elementary symmetric values eps_0..eps_k from complex moments m_1..m_k.

    Newton's identity for uniform k-atomic measures:
    eps_l = (k/l) * sum_{j=1}^{l} (-1)^(j-1) eps_{l-j} m_j.
    """
    if isinstance(moments, MomentVector):
        if k is None:
            k = moments.order
        m = np.array([moments.entries[a] for a in range(1, k + 1)], dtype=complex)
    else:
        m = np.asarray(moments, dtype=complex).ravel()
        if k is None:
            k = m.shape[0]
        m = m[:k]
    if m.shape[0] != k:
        raise ValueError("moments m_1..m_k required")
    eps = np.zeros(k + 1, dtype=complex)
    eps[0] = 1.0
    for l in range(1, k + 1):
        acc = 0.0 + 0.0j
        for j in range(1, l + 1):
            acc += (-1) ** (j - 1) * eps[l - j] * m[j - 1]
        eps[l] = acc * k / l
    return eps


def poly_from_elementary(eps) -> np.ndarray:
    """Monic polynomial z^k - eps_1 z^{k-1} + eps_2 z^{k-2} - ... (descending coeffs)."""
    eps = np.asarray(eps, dtype=complex).ravel()
    if eps[0] != 1.0:
        raise ValueError("eps_0 must equal 1")
    signs = (-1.0) ** np.arange(eps.shape[0])
    return signs * eps


def _polyval_and_deriv(coeffs: np.ndarray, z: np.ndarray):
    """Horner evaluation of p and p' for descending coefficients."""
    p = np.full_like(z, coeffs[0])
    dp = np.zeros_like(z)
    for c in coeffs[1:]:
        dp = dp * z + p
        p = p * z + c
    return p, dp


def _newton_polish(coeffs: np.ndarray, roots: np.ndarray, max_steps: int = 8) -> np.ndarray:
    roots = roots.astype(complex).copy()
    for _ in range(max_steps):
        p, dp = _polyval_and_deriv(coeffs, roots)
        ok = np.abs(dp) > 0
        step = np.zeros_like(roots)
        step[ok] = p[ok] / dp[ok]
        nxt = roots - step
        p_new, _ = _polyval_and_deriv(coeffs, nxt)
        improved = np.abs(p_new) < np.abs(p)
        roots[improved] = nxt[improved]
        if not improved.any():
            break
    return roots


def _aberth(coeffs: np.ndarray, max_iter: int = 200):
    """Aberth-Ehrlich simultaneous iteration for a monic polynomial."""
    k = coeffs.shape[0] - 1
    radius = 1.0 + np.max(np.abs(coeffs[1:]))  # Cauchy bound
    angles = 2 * np.pi * (np.arange(k) + 0.5) / k + 0.4
    z = radius * np.exp(1j * angles)
    for _ in range(max_iter):
        p, dp = _polyval_and_deriv(coeffs, z)
        pair = z[:, None] - z[None, :]
        np.fill_diagonal(pair, np.inf)
        sums = np.sum(1.0 / pair, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(np.abs(dp) > 0, p / dp, p)
            denom = 1.0 - w * sums
            step = np.where(np.abs(denom) > 0, w / denom, w)
        step = np.where(np.isfinite(step), step, 0.0)
        z = z - step
        if np.max(np.abs(step)) < 1e-14 * (1.0 + np.max(np.abs(z))):
            break
    return z


def _residual_ok(coeffs: np.ndarray, roots: np.ndarray) -> bool:
    p, _ = _polyval_and_deriv(coeffs, roots)
    scale = np.max(np.abs(coeffs))
    k = coeffs.shape[0] - 1
    bound = 1e-10 * scale * (1.0 + np.abs(roots)) ** k
    return bool(np.all(np.abs(p) <= bound))


def complex_roots(coeffs) -> np.ndarray:
    """All k roots (with multiplicity) of a monic degree-k complex polynomial.

    Aberth-Ehrlich iteration with companion-matrix eigenvalues as fallback;
    every candidate set is Newton-polished and accepted only if the residual
    |p(root)| stays below 1e-10 * max|coeff| * (1+|root|)^k.
    """
    coeffs = np.asarray(coeffs, dtype=complex).ravel()
    if coeffs.shape[0] < 2:
        raise ValueError("polynomial degree must be >= 1")
    coeffs = coeffs / coeffs[0]
    if coeffs.shape[0] == 2:
        return np.array([-coeffs[1]])
    roots = _newton_polish(coeffs, _aberth(coeffs))
    if _residual_ok(coeffs, roots):
        return roots
    fallback = _newton_polish(coeffs, np.roots(coeffs).astype(complex))
    if _residual_ok(coeffs, fallback):
        return fallback
    raise RootRecoveryError(
        "root finding failed: Aberth iteration and companion-matrix fallback "
        "both exceeded the residual bound"
    )


def measure_from_moments(moments, k: int, dimension: int = 2) -> AtomicUniformMeasure:
    """Invert complex moments m_1..m_k into the unique k-atomic uniform measure."""
    eps = newton_to_elementary(moments, k)
    roots = complex_roots(poly_from_elementary(eps))
    if dimension == 1:
        return AtomicUniformMeasure(np.sort(roots.real))
    return AtomicUniformMeasure.from_complex(roots)


def _degenerate_guard(image: CountImage, k: int) -> AtomicUniformMeasure | None:
    if image.total() > 0:
        return None
    warnings.warn(
        "all counts are zero; returning window-center atoms", DegenerateDataWarning
    )
    center = image.grid.center()
    return AtomicUniformMeasure(np.tile(center, (k, 1)))


def _psi_for(kernel: Kernel, k: int, psi: PsiPolynomials | None) -> PsiPolynomials:
    if psi is not None:
        if psi.order < k:
            raise ValueError("supplied psi has insufficient order")
        return psi
    if kernel.dimension == 2 and kernel.is_rotationally_symmetric():
        return PsiPolynomials.monomials(k, "complex")
    return compute_psi(kernel_moments(kernel, k))


def mm_complex(image: CountImage, kernel: Kernel, k: int,
               psi: PsiPolynomials | None = None) -> AtomicUniformMeasure:
    """Complex method-of-moments estimator for planar images.

    Estimated complex moments are inverted through Newton's identities and
    Vieta's formula; the atoms are the roots of the resulting polynomial.
    Atoms may land outside the observation window; no projection is applied.
    """
    if image.grid.dimension != 2:
        raise ValueError("mm_complex requires planar data")
    guard = _degenerate_guard(image, k)
    if guard is not None:
        return guard
    psi = _psi_for(kernel, k, psi)
    m_hat = estimate_moments(image, psi, k)
    return measure_from_moments(m_hat, k, dimension=2)


def mm_real(image: CountImage, kernel: Kernel, k: int,
            psi: PsiPolynomials | None = None) -> AtomicUniformMeasure:
    """Real-line method of moments: complex pipeline, then project roots to R."""
    if image.grid.dimension != 1:
        raise ValueError("mm_real requires 1-d data")
    guard = _degenerate_guard(image, k)
    if guard is not None:
        return guard
    psi = _psi_for(kernel, k, psi)
    m_hat = estimate_moments(image, psi, k)
    return measure_from_moments(m_hat, k, dimension=1)


# general (box-constrained) moment matching ---------------------------------

@dataclass(frozen=True, eq=False)
class MultiPsi:
    """Multivariate psi polynomials over the graded multi-index family.

    ``indices`` lists every alpha with |alpha| <= order in graded order and
    ``coeffs[a, b]`` is the coefficient of the monomial x^indices[b] in
    psi_indices[a].
    """

    indices: tuple
    coeffs: np.ndarray

    def evaluate_all(self, points: np.ndarray) -> np.ndarray:
        """Values of every psi_alpha at each point, shape (n, len(indices))."""
        points = np.atleast_2d(points)
        mono = np.column_stack(
            [np.prod(points ** np.asarray(a, float), axis=1) for a in self.indices]
        )
        return mono @ self.coeffs.T


def _graded_indices(order: int, dimension: int):
    idx = [tuple(a) for a in _compositions(order, dimension)]
    return tuple(sorted(idx, key=lambda a: (sum(a), a)))


def _compositions(order, dimension):
    if dimension == 1:
        return [(j,) for j in range(order + 1)]
    out = []
    for total in range(order + 1):
        for a in range(total + 1):
            out.append((a, total - a))
    return out


def compute_psi_multi(kernel: Kernel, order: int) -> MultiPsi:
    """Multivariate analogue of compute_psi over multi-indices |alpha| <= order."""
    indices = _graded_indices(order, kernel.dimension)
    kmom = kernel.multi_moments(order)
    n = len(indices)
    pos = {a: i for i, a in enumerate(indices)}
    M = np.zeros((n, n))
    for a in indices:
        for b in _compositions(order, kernel.dimension):
            if all(bb <= aa for aa, bb in zip(a, b)):
                gamma = tuple(aa - bb for aa, bb in zip(a, b))
                coef = kmom[gamma]
                for aa, bb in zip(a, b):
                    coef *= math.comb(aa, bb)
                M[pos[a], pos[b]] = coef
    A = solve_triangular(M, np.eye(n), lower=True, unit_diagonal=True)
    return MultiPsi(indices, A)


def estimate_moments_multi(image: CountImage, mpsi: MultiPsi) -> dict:
    """Multi-index moment estimates over 1 <= |alpha| <= order."""
    weights = image.counts if image.noiseless else image.counts / image.t
    vals = mpsi.evaluate_all(image.grid.anchors())
    raw = weights @ vals
    return {a: float(raw[i]) for i, a in enumerate(mpsi.indices) if sum(a) >= 1}


def _moment_objective(m_hat: dict, k: int, dimension: int):
    """Objective sum_alpha |m_alpha(mu) - m_hat_alpha|^2 with analytic gradient."""
    alphas = [a for a in _graded_indices(k, dimension) if sum(a) >= 1]
    targets = np.array([m_hat[a] for a in alphas])
    powers = np.array(alphas, dtype=float)  # (n_alpha, d)

    def fun(theta_flat):
        atoms = theta_flat.reshape(-1, dimension)
        k_atoms = atoms.shape[0]
        mono = np.prod(
            atoms[None, :, :] ** powers[:, None, :], axis=2
        )  # (n_alpha, k)
        moments = mono.mean(axis=1)
        resid = moments - targets
        grad = np.zeros_like(atoms)
        for ax in range(dimension):
            shifted = powers.copy()
            shifted[:, ax] -= 1.0
            mask = powers[:, ax] > 0
            dm = np.zeros_like(mono)
            with np.errstate(divide="ignore", invalid="ignore"):
                dm[mask] = (
                    powers[mask, ax : ax + 1]
                    * np.prod(atoms[None, :, :] ** shifted[mask][:, None, :], axis=2)
                    / k_atoms
                )
            grad[:, ax] = 2.0 * resid @ dm
        return float(np.sum(resid**2)), grad.ravel()

    return fun


def mm_general(image: CountImage, kernel: Kernel, k: int, domain,
               restarts: int = 8, seed: int = 0):
    """Box-constrained method of moments by multi-start gradient descent.

    Minimizes sum over 1 <= |alpha| <= k of |m_alpha(mu) - m_hat_alpha|^2 over
    atom coordinates inside the domain box, restarting from uniform draws
    (plus the complex estimate projected into the box on planar data).

    Returns
    -------
    (measure, objective) : best local optimum found and its objective value.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    lo, hi = (np.atleast_1d(np.asarray(b, float)) for b in domain)
    d = image.grid.dimension
    if lo.shape[0] != d or hi.shape[0] != d or np.any(hi <= lo):
        raise ValueError("domain must be a non-degenerate box matching the dimension")
    guard = _degenerate_guard(image, k)
    if guard is not None:
        atoms = np.clip(guard.atoms, lo, hi)
        measure = AtomicUniformMeasure(atoms)
        mpsi = compute_psi_multi(kernel, k)
        m_hat = estimate_moments_multi(image, mpsi)
        obj, _ = _moment_objective(m_hat, k, d)(atoms.ravel())
        return measure, obj

    mpsi = compute_psi_multi(kernel, k)
    m_hat = estimate_moments_multi(image, mpsi)

    if k == 1:
        # quadratic in the single atom: coordinate-wise first moments, clipped
        first = np.array(
            [m_hat[tuple(int(i == ax) for i in range(d))] for ax in range(d)]
        )
        atom = np.clip(first, lo, hi)
        fun = _moment_objective(m_hat, k, d)
        return AtomicUniformMeasure(atom[None, :]), fun(atom)[0]

    fun = _moment_objective(m_hat, k, d)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    starts = [rng.uniform(lo, hi, size=(k, d)) for _ in range(restarts)]
    if d == 2:
        try:
            init = mm_complex(image, kernel, k)
            starts.append(np.clip(init.atoms, lo, hi))
        except RootRecoveryError:
            pass
    bounds = [(lo[ax], hi[ax]) for _ in range(k) for ax in range(d)]
    best_val, best_atoms = np.inf, None
    for start in starts:
        res = minimize(
            fun, start.ravel(), jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 500, "ftol": 1e-16, "gtol": 1e-12},
        )
        if res.fun < best_val:
            best_val, best_atoms = float(res.fun), res.x.reshape(k, d)
    return AtomicUniformMeasure(best_atoms), best_val
