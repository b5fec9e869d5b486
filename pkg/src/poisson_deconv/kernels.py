"""Convolution kernels, their moments, and bin-integrated intensities.

A kernel is the point-spread density K blurring the atomic measure; the
forward model only ever consumes integrals of K over axis-aligned rectangles
(bins).  Gaussian kernels with isotropic or diagonal covariance evaluate those
integrals as products of 1-d CDF differences; anisotropic Gaussians fall back
to adaptive quadrature, and tabulated kernels integrate their piecewise
linear/bilinear interpolant exactly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .measures import AtomicUniformMeasure, MomentVector

logger = logging.getLogger(__name__)

# Bins farther than this many sigmas from every atom contribute < 1e-14 mass.
GAUSSIAN_TAIL_SIGMAS = 8.0


@dataclass(frozen=True, eq=False)
class KernelMoments:
    """Kernel moments m_j^K = int y^j K(y) dy for j = 0..order.

    ``values[j]`` is real for kernels on the line and complex for planar
    kernels viewed through the x+iy embedding.  m_0^K is always 1.
    """

    values: np.ndarray
    flavor: str  # "real" or "complex"

    def __post_init__(self):
        vals = np.asarray(self.values)
        if self.flavor not in ("real", "complex"):
            raise ValueError("flavor must be 'real' or 'complex'")
        if vals.ndim != 1 or vals.shape[0] < 1:
            raise ValueError("values must be a 1-d array [m_0 .. m_order]")
        if not np.all(np.isfinite(vals)):
            raise ValueError("kernel moments must be finite")
        if abs(vals[0] - 1.0) > 1e-9:
            raise ValueError("m_0 must equal 1 (probability kernel)")
        vals = vals.astype(complex if self.flavor == "complex" else float)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def order(self) -> int:
        return self.values.shape[0] - 1


class Kernel:
    """Base class: a probability density on R^d with d in {1, 2}."""

    dimension: int

    def density(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spread(self) -> float:
        """Characteristic half-width (sigma for Gaussians, support radius otherwise)."""
        raise NotImplementedError

    def tail_radius(self) -> float:
        """Distance beyond which the kernel mass is negligible or zero."""
        raise NotImplementedError

    def is_rotationally_symmetric(self) -> bool:
        return False

    def axis_moments(self, order: int, axis: int = 0) -> np.ndarray:
        """1-d marginal-factor moments; only defined for product kernels."""
        raise NotImplementedError

    def multi_moments(self, order: int) -> dict:
        """Moments m_alpha^K for all multi-indices with |alpha| <= order."""
        raise NotImplementedError

    def real_moments(self, order: int) -> KernelMoments:
        if self.dimension != 1:
            raise ValueError("real moments require a kernel on the line")
        vals = np.array([self.multi_moments(order)[(j,)] for j in range(order + 1)])
        return KernelMoments(vals, "real")

    def complex_moments(self, order: int) -> KernelMoments:
        """Moments int z^j K(z) dz of the planar kernel under z = x + iy."""
        if self.dimension != 2:
            raise ValueError("complex moments require a planar kernel")
        if self.is_rotationally_symmetric():
            vals = np.zeros(order + 1, dtype=complex)
            vals[0] = 1.0
            return KernelMoments(vals, "complex")
        mm = self.multi_moments(order)
        vals = np.zeros(order + 1, dtype=complex)
        for j in range(order + 1):
            total = 0.0 + 0.0j
            for l in range(j + 1):
                total += math.comb(j, l) * (1j**l) * mm[(j - l, l)]
            vals[j] = total
        return KernelMoments(vals, "complex")

    def bin_integral(self, lo, hi, atom) -> float:
        """Integral of K(x - atom) over the rectangle [lo, hi]."""
        raise NotImplementedError

    def bin_integral_matrix(self, grid, atoms: np.ndarray) -> np.ndarray:
        """Per-atom bin integrals over a whole grid, shape (m, k).

        Entry (i, j) is the integral of K(x - atom_j) over bin i in the grid's
        row-major order.  The generic implementation loops; product kernels
        override the per-axis factors for a vectorized path.
        """
        atoms = np.atleast_2d(atoms)
        out = np.empty((grid.m, atoms.shape[0]))
        radius = self.tail_radius()
        for i in range(grid.m):
            lo, hi = grid.bin_bounds(i)
            center = 0.5 * (lo + hi)
            for j, atom in enumerate(atoms):
                if np.linalg.norm(center - atom) > radius + np.linalg.norm(hi - lo):
                    out[i, j] = 0.0
                else:
                    out[i, j] = self.bin_integral(lo, hi, atom)
        return out

    def bin_integral_gradient_matrix(self, grid, atoms: np.ndarray) -> np.ndarray:
        """Gradient of bin_integral_matrix entries w.r.t. atom coordinates, (m, k, d).

        Central finite differences by default; Gaussian product kernels
        override with the closed form.
        """
        atoms = np.atleast_2d(atoms)
        d = atoms.shape[1]
        step = 1e-6 * max(self.spread(), 1e-12)
        out = np.empty((grid.m, atoms.shape[0], d))
        for axis in range(d):
            offset = np.zeros(d)
            offset[axis] = step
            plus = self.bin_integral_matrix(grid, atoms + offset)
            minus = self.bin_integral_matrix(grid, atoms - offset)
            out[:, :, axis] = (plus - minus) / (2 * step)
        return out


class _ProductKernel(Kernel):
    """Kernel factorizing over coordinates; bin integrals become per-axis products."""

    def axis_cdf_diff(self, lo: np.ndarray, hi: np.ndarray, coords: np.ndarray,
                      axis: int) -> np.ndarray:
        """Integrals of the axis factor over [lo_i, hi_i] - theta_j, shape (n, k)."""
        raise NotImplementedError

    def axis_cdf_diff_grad(self, lo, hi, coords, axis):
        raise NotImplementedError

    def bin_integral(self, lo, hi, atom) -> float:
        lo = np.atleast_1d(np.asarray(lo, float))
        hi = np.atleast_1d(np.asarray(hi, float))
        atom = np.atleast_1d(np.asarray(atom, float))
        val = 1.0
        for axis in range(self.dimension):
            val *= self.axis_cdf_diff(
                lo[axis : axis + 1], hi[axis : axis + 1], atom[axis : axis + 1], axis
            )[0, 0]
        return float(val)

    def _axis_factors(self, grid, atoms):
        factors = []
        for axis in range(self.dimension):
            edges = grid.axis_edges(axis)
            factors.append(self.axis_cdf_diff(edges[:-1], edges[1:], atoms[:, axis], axis))
        return factors

    def bin_integral_matrix(self, grid, atoms: np.ndarray) -> np.ndarray:
        atoms = np.atleast_2d(atoms)
        factors = self._axis_factors(grid, atoms)
        if self.dimension == 1:
            return factors[0]
        dx, dy = factors  # row-major flat order: index = iy * n_x + ix
        return (dy[:, None, :] * dx[None, :, :]).reshape(grid.m, atoms.shape[0])

    def multi_moments(self, order: int) -> dict:
        axis_mom = [self.axis_moments(order, axis) for axis in range(self.dimension)]
        out = {}
        for alpha in [(j,) for j in range(order + 1)] if self.dimension == 1 else [
            (a, b) for total in range(order + 1) for a in range(total + 1)
            for b in [total - a]
        ]:
            val = 1.0
            for axis, a in enumerate(alpha):
                val *= axis_mom[axis][a]
            out[alpha] = float(val)
        return out


class GaussianKernel(_ProductKernel):
    """Centered Gaussian density with covariance sigma^2 I, diag(v), or full Sigma.

    Parameters
    ----------
    sigma : float, optional
        Isotropic standard deviation.
    cov : array_like, optional
        Full covariance matrix (symmetric positive definite); mutually
        exclusive with sigma.
    dim : int
        Ambient dimension, 1 or 2.
    """

    def __init__(self, sigma: float | None = None, cov=None, dim: int = 2):
        if (sigma is None) == (cov is None):
            raise ValueError("specify exactly one of sigma or cov")
        if dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        self.dimension = dim
        if sigma is not None:
            if sigma <= 0:
                raise ValueError("sigma must be positive")
            self.cov = (sigma**2) * np.eye(dim)
        else:
            cov = np.atleast_2d(np.asarray(cov, float))
            if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
                raise ValueError("cov must be a symmetric (dim, dim) matrix")
            if np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("cov must be positive definite")
            self.cov = cov
        self._diagonal = np.allclose(self.cov, np.diag(np.diag(self.cov)))
        self._axis_sigma = np.sqrt(np.diag(self.cov))

    @property
    def sigma(self) -> float:
        if not self._diagonal or not np.allclose(self._axis_sigma, self._axis_sigma[0]):
            raise ValueError("sigma is only defined for isotropic kernels")
        return float(self._axis_sigma[0])

    def is_isotropic(self) -> bool:
        return self._diagonal and np.allclose(self._axis_sigma, self._axis_sigma[0])

    def is_rotationally_symmetric(self) -> bool:
        return self.dimension == 2 and self.is_isotropic()

    def spread(self) -> float:
        return float(self._axis_sigma.max())

    def tail_radius(self) -> float:
        return GAUSSIAN_TAIL_SIGMAS * self.spread()

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        prec = np.linalg.inv(self.cov)
        norm = 1.0 / np.sqrt((2 * np.pi) ** self.dimension * np.linalg.det(self.cov))
        quad = np.einsum("ni,ij,nj->n", x, prec, x)
        return norm * np.exp(-0.5 * quad)

    def axis_moments(self, order: int, axis: int = 0) -> np.ndarray:
        if not self._diagonal:
            raise ValueError("axis moments require a diagonal covariance")
        s = self._axis_sigma[axis]
        vals = np.zeros(order + 1)
        vals[0] = 1.0
        for j in range(2, order + 1, 2):
            vals[j] = s**j * _double_factorial(j - 1)
        return vals

    def multi_moments(self, order: int) -> dict:
        if self._diagonal:
            return super().multi_moments(order)
        return _gaussian_multi_moments(self.cov, order)

    # product CDF path (diagonal covariance only)
    def axis_cdf_diff(self, lo, hi, coords, axis):
        if not self._diagonal:
            raise ValueError("CDF product path requires a diagonal covariance")
        s = self._axis_sigma[axis]
        a = (np.asarray(lo, float)[:, None] - coords[None, :]) / s
        b = (np.asarray(hi, float)[:, None] - coords[None, :]) / s
        return ndtr(b) - ndtr(a)

    def axis_cdf_diff_grad(self, lo, hi, coords, axis):
        s = self._axis_sigma[axis]
        a = (np.asarray(lo, float)[:, None] - coords[None, :]) / s
        b = (np.asarray(hi, float)[:, None] - coords[None, :]) / s
        phi = lambda u: np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi)
        return (phi(a) - phi(b)) / s

    def bin_integral(self, lo, hi, atom) -> float:
        if self._diagonal:
            return super().bin_integral(lo, hi, atom)
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        atom = np.asarray(atom, float)
        val, _ = integrate.dblquad(
            lambda y, x: self.density(np.array([[x, y]]))[0],
            lo[0] - atom[0], hi[0] - atom[0],
            lo[1] - atom[1], hi[1] - atom[1],
            epsabs=1e-12, epsrel=1e-8,
        )
        return float(val)

    def bin_integral_matrix(self, grid, atoms):
        if self._diagonal:
            return super().bin_integral_matrix(grid, atoms)
        return Kernel.bin_integral_matrix(self, grid, atoms)

    def bin_integral_gradient_matrix(self, grid, atoms):
        if not self._diagonal:
            return Kernel.bin_integral_gradient_matrix(self, grid, atoms)
        atoms = np.atleast_2d(atoms)
        vals, grads = [], []
        for axis in range(self.dimension):
            edges = grid.axis_edges(axis)
            vals.append(self.axis_cdf_diff(edges[:-1], edges[1:], atoms[:, axis], axis))
            grads.append(
                self.axis_cdf_diff_grad(edges[:-1], edges[1:], atoms[:, axis], axis)
            )
        k = atoms.shape[0]
        out = np.empty((grid.m, k, self.dimension))
        if self.dimension == 1:
            out[:, :, 0] = grads[0]
            return out
        dx, dy = vals
        gx, gy = grads
        out[:, :, 0] = (dy[:, None, :] * gx[None, :, :]).reshape(grid.m, k)
        out[:, :, 1] = (gy[:, None, :] * dx[None, :, :]).reshape(grid.m, k)
        return out


class UniformBoxKernel(_ProductKernel):
    """Uniform density on a centered axis-aligned box [-h_1, h_1] x ... x [-h_d, h_d]."""

    def __init__(self, half_widths):
        hw = np.atleast_1d(np.asarray(half_widths, float))
        if np.any(hw <= 0):
            raise ValueError("half widths must be positive")
        if hw.shape[0] not in (1, 2):
            raise ValueError("box kernel supports dimensions 1 and 2")
        self.half_widths = hw
        self.dimension = hw.shape[0]

    def spread(self) -> float:
        return float(self.half_widths.max())

    def tail_radius(self) -> float:
        return float(np.linalg.norm(self.half_widths))

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        inside = np.all(np.abs(x) <= self.half_widths[None, :], axis=1)
        return inside / np.prod(2 * self.half_widths)

    def axis_moments(self, order: int, axis: int = 0) -> np.ndarray:
        h = self.half_widths[axis]
        vals = np.zeros(order + 1)
        for j in range(0, order + 1, 2):
            vals[j] = h**j / (j + 1)
        return vals

    def axis_cdf_diff(self, lo, hi, coords, axis):
        h = self.half_widths[axis]
        a = np.asarray(lo, float)[:, None] - coords[None, :]
        b = np.asarray(hi, float)[:, None] - coords[None, :]
        overlap = np.clip(np.minimum(b, h) - np.maximum(a, -h), 0.0, None)
        return overlap / (2 * h)


class TabulatedKernel(Kernel):
    """Compactly supported kernel given by samples on a regular grid.

    Samples are interpreted as nodal values of a piecewise linear (1-d) or
    bilinear (2-d) interpolant vanishing outside the sampled box; integrals of
    that interpolant are computed in closed form.  The kernel is normalized to
    unit mass on load, logging the deviation when it exceeds 1e-3.

    Parameters
    ----------
    samples : array_like
        Nonnegative nodal values, shape (n,) for d=1 or (n_y, n_x) for d=2.
    spacing : float
        Grid spacing between consecutive nodes (same along every axis).
    origin : array_like
        Coordinate of the first node, shape (d,).
    """

    def __init__(self, samples, spacing: float, origin):
        samples = np.asarray(samples, float)
        if samples.ndim not in (1, 2):
            raise ValueError("samples must be 1-d or 2-d")
        if np.any(samples < 0):
            raise ValueError("kernel samples must be nonnegative")
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        self.dimension = samples.ndim
        self.spacing = float(spacing)
        self.origin = np.atleast_1d(np.asarray(origin, float))
        if self.origin.shape[0] != self.dimension:
            raise ValueError("origin must have one coordinate per dimension")
        mass = self._raw_mass(samples)
        if mass <= 0:
            raise ValueError("kernel samples must carry positive mass")
        if abs(mass - 1.0) > 1e-3:
            logger.info("normalizing tabulated kernel: raw mass %.6g", mass)
        self.samples = samples / mass
        self._node_coords = [
            self.origin[axis] + self.spacing * np.arange(self._shape()[axis])
            for axis in range(self.dimension)
        ]

    def _shape(self):
        if self.dimension == 1:
            return (self.samples.shape[0],)
        return (self.samples.shape[1], self.samples.shape[0])  # (n_x, n_y)

    def _raw_mass(self, samples) -> float:
        if samples.ndim == 1:
            return float(np.trapezoid(samples, dx=self.spacing))
        inner = np.trapezoid(samples, dx=self.spacing, axis=1)
        return float(np.trapezoid(inner, dx=self.spacing))

    def support_box(self):
        lo = self.origin
        hi = np.array([c[-1] for c in self._node_coords])
        return lo, hi

    def spread(self) -> float:
        lo, hi = self.support_box()
        return float(np.max(hi - lo) / 2)

    def tail_radius(self) -> float:
        lo, hi = self.support_box()
        return float(np.linalg.norm(hi - lo) / 2 + np.max(np.abs((hi + lo) / 2)))

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if self.dimension == 1:
            return np.interp(x[:, 0], self._node_coords[0], self.samples,
                             left=0.0, right=0.0)
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator(
            (self._node_coords[1], self._node_coords[0]), self.samples,
            bounds_error=False, fill_value=0.0,
        )
        return interp(x[:, ::-1])

    # exact integrals of the interpolant -------------------------------------
    def _segment_integrals(self, a: float, b: float, axis: int, degree: int) -> np.ndarray:
        """Integrals of x^degree * hat_i(x) over [a, b] for every node i on an axis.

        hat_i is the piecewise-linear nodal basis function; Gauss-Legendre of
        sufficient order makes each per-cell integral exact.
        """
        coords = self._node_coords[axis]
        n = coords.shape[0]
        out = np.zeros(n)
        if b <= coords[0] or a >= coords[-1] or b <= a:
            return out
        npts = max(1, (degree + 2 + 1) // 2)
        gl_x, gl_w = np.polynomial.legendre.leggauss(npts)
        for c in range(n - 1):
            left, right = coords[c], coords[c + 1]
            lo, hi = max(a, left), min(b, right)
            if hi <= lo:
                continue
            mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
            x = mid + half * gl_x
            w = half * gl_w
            u = (x - left) / self.spacing
            base = x**degree if degree else np.ones_like(x)
            out[c] += np.sum(w * base * (1 - u))
            out[c + 1] += np.sum(w * base * u)
        return out

    def bin_integral(self, lo, hi, atom) -> float:
        lo = np.atleast_1d(np.asarray(lo, float))
        hi = np.atleast_1d(np.asarray(hi, float))
        atom = np.atleast_1d(np.asarray(atom, float))
        if self.dimension == 1:
            weights = self._segment_integrals(lo[0] - atom[0], hi[0] - atom[0], 0, 0)
            return float(weights @ self.samples)
        wx = self._segment_integrals(lo[0] - atom[0], hi[0] - atom[0], 0, 0)
        wy = self._segment_integrals(lo[1] - atom[1], hi[1] - atom[1], 1, 0)
        return float(wy @ self.samples @ wx)

    def multi_moments(self, order: int) -> dict:
        lo, hi = self.support_box()
        out = {}
        if self.dimension == 1:
            for j in range(order + 1):
                w = self._segment_integrals(lo[0], hi[0], 0, j)
                out[(j,)] = float(w @ self.samples)
            return out
        for total in range(order + 1):
            for a in range(total + 1):
                b = total - a
                wx = self._segment_integrals(lo[0], hi[0], 0, a)
                wy = self._segment_integrals(lo[1], hi[1], 1, b)
                out[(a, b)] = float(wy @ self.samples @ wx)
        return out

    @classmethod
    def load(cls, csv_path, json_path=None) -> "TabulatedKernel":
        """Load samples from CSV (row-major) plus a JSON sidecar with spacing/origin."""
        csv_path = str(csv_path)
        if json_path is None:
            json_path = csv_path.rsplit(".", 1)[0] + ".json"
        samples = np.loadtxt(csv_path, delimiter=",", ndmin=2)
        with open(json_path) as fh:
            meta = json.load(fh)
        if "spacing" not in meta:
            raise ValueError("kernel sidecar must define 'spacing'")
        origin = meta.get("origin", [0.0, 0.0])
        if samples.shape[0] == 1:
            return cls(samples[0], float(meta["spacing"]), origin[:1])
        return cls(samples, float(meta["spacing"]), origin)


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def _gaussian_multi_moments(cov: np.ndarray, order: int) -> dict:
    """Centered Gaussian monomial moments via the Stein recurrence.

    m_{a,b} = (a-1) * Sxx * m_{a-2,b} + b * Sxy * m_{a-1,b-1}, seeded by
    m_{0,0} = 1; the reduction on the first index suffices because moments are
    symmetric in the coordinates.
    """
    sxx, sxy, syy = cov[0, 0], cov[0, 1], cov[1, 1]
    memo = {}

    def mom(a, b):
        if a < 0 or b < 0:
            return 0.0
        if (a, b) in memo:
            return memo[(a, b)]
        if a == 0 and b == 0:
            val = 1.0
        elif a == 0:
            val = (b - 1) * syy * mom(0, b - 2) if b >= 2 else 0.0
        else:
            val = (a - 1) * sxx * mom(a - 2, b) + b * sxy * mom(a - 1, b - 1)
        memo[(a, b)] = val
        return val

    out = {}
    for total in range(order + 1):
        for a in range(total + 1):
            out[(a, total - a)] = float(mom(a, total - a))
    return out


def kernel_moments(kernel: Kernel, order: int) -> KernelMoments:
    """Moments of the kernel up to the requested order.

    Kernels on the line report real moments; planar kernels report complex
    moments of z = x + iy (identically zero beyond order 0 for rotationally
    symmetric kernels).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if kernel.dimension == 1:
        return kernel.real_moments(order)
    return kernel.complex_moments(order)


def bin_intensity(kernel: Kernel, mu: AtomicUniformMeasure, lo, hi) -> float:
    """Intensity of a single bin: (1/k) sum_i int_bin K(x - theta_i) dx."""
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    if np.any(hi <= lo):
        raise ValueError("bin must be non-degenerate (lo < hi)")
    vals = [kernel.bin_integral(lo, hi, atom) for atom in mu.atoms]
    return float(np.mean(vals))
