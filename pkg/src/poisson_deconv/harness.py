"""Experiment runners: risk curves and runtime comparisons over replicates.

A spec names one of the built-in atom configurations (grid, corners, u-shape)
or supplies custom atoms, a kernel width, grid resolutions, exposure values
(inf for the noiseless regime), and the estimators to run.  Each (t, m) cell
is replicated with independently derived seeds; per-replicate W_1 errors and
wall times aggregate into a RiskTable.  risk.csv contains only deterministic
columns so identical spec+seed runs are byte-identical; timings are written
separately.
"""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .em import EmConfig, run_em
from .kernels import GaussianKernel
from .measures import AtomicUniformMeasure, wasserstein_p
from .mm import RootRecoveryError, mm_complex, mm_real
from .observation import BinGrid, noiseless, replicate_seed, simulate

logger = logging.getLogger(__name__)

CONFIGURATION_NAMES = ("grid", "corners", "u-shape", "custom")
ESTIMATOR_NAMES = ("mm", "em")


def builtin_configuration(name: str, k: int) -> AtomicUniformMeasure:
    """Atom layouts used by the simulation study, in the unit square.

    grid: a sqrt(k) x sqrt(k) lattice spanning [0.2, 0.8]^2 (k a perfect
    square); corners: k/4 atoms on each point of {0.2, 0.8}^2 (k a multiple
    of 4); u-shape: k atoms equally spaced along the three sides of a U with
    corners (0.2, 0.8), (0.2, 0.2), (0.8, 0.2), (0.8, 0.8).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if name == "grid":
        side = int(round(np.sqrt(k)))
        if side * side != k:
            raise ValueError("grid configuration requires a perfect-square k")
        coords = np.linspace(0.2, 0.8, side) if side > 1 else np.array([0.5])
        xx, yy = np.meshgrid(coords, coords)
        return AtomicUniformMeasure(np.column_stack([xx.ravel(), yy.ravel()]))
    if name == "corners":
        if k % 4 != 0:
            raise ValueError("corners configuration requires k divisible by 4")
        corners = np.array([[0.2, 0.2], [0.2, 0.8], [0.8, 0.2], [0.8, 0.8]])
        return AtomicUniformMeasure(np.repeat(corners, k // 4, axis=0))
    if name == "u-shape":
        if k < 2:
            raise ValueError("u-shape configuration requires k >= 2")
        waypoints = np.array([[0.2, 0.8], [0.2, 0.2], [0.8, 0.2], [0.8, 0.8]])
        seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
        total = seg.sum()
        stations = np.linspace(0.0, total, k)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        pts = []
        for s in stations:
            j = min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
            frac = (s - cum[j]) / seg[j]
            pts.append(waypoints[j] + frac * (waypoints[j + 1] - waypoints[j]))
        return AtomicUniformMeasure(np.array(pts))
    raise ValueError(f"unknown configuration '{name}'")


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: a truth, a kernel width, and the (t, m) sweep to run."""

    configuration: str = "grid"
    k: int = 4
    sigma: float = 0.05
    resolutions: tuple = (40,)
    t_values: tuple = (1e5,)
    replicates: int = 1
    seed: int = 0
    estimators: tuple = ("mm", "em")
    atoms: tuple | None = None  # for configuration == "custom"
    em_max_iterations: int = 50
    jobs: int | None = None

    def __post_init__(self):
        if self.configuration not in CONFIGURATION_NAMES:
            raise ValueError(f"configuration must be one of {CONFIGURATION_NAMES}")
        if self.configuration == "custom" and self.atoms is None:
            raise ValueError("custom configuration requires atoms")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.t_values or any(not t > 0 for t in self.t_values):
            raise ValueError("t values must be positive (inf allowed)")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")

    def truth(self) -> AtomicUniformMeasure:
        if self.configuration == "custom":
            return AtomicUniformMeasure(np.asarray(self.atoms, float))
        return builtin_configuration(self.configuration, self.k)


@dataclass
class RiskTable:
    """Aggregated results, one row per (estimator, t, m, sigma) cell."""

    rows: list = field(default_factory=list)

    RISK_COLUMNS = (
        "estimator", "configuration", "k", "sigma", "t", "m",
        "n", "n_fail", "mean_w1", "stderr_w1",
        "mean_w1_pessimistic", "stderr_w1_pessimistic",
    )
    TIMING_COLUMNS = ("estimator", "configuration", "k", "sigma", "t", "m",
                      "mean_time_s")

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, float):
            if np.isinf(value):
                return "inf"
            return repr(value)
        return str(value)

    def to_csv(self, path) -> None:
        """Deterministic risk columns only; byte-identical for identical runs."""
        with open(path, "w") as fh:
            fh.write(",".join(self.RISK_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(self._fmt(row[c]) for c in self.RISK_COLUMNS) + "\n")

    def timing_to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.TIMING_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(
                    ",".join(self._fmt(row[c]) for c in self.TIMING_COLUMNS) + "\n"
                )

    def summary_json(self, path) -> None:
        payload = []
        for row in self.rows:
            entry = dict(row)
            entry["t"] = "inf" if np.isinf(entry["t"]) else entry["t"]
            payload.append(entry)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def write_dat_files(self, directory, prefix: str = "risk") -> list:
        """Gnuplot-ready columns (t, mean_w1, stderr_w1) per estimator and m."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        keys = sorted({(r["estimator"], r["m"]) for r in self.rows})
        for est, m in keys:
            rows = [
                r for r in self.rows
                if r["estimator"] == est and r["m"] == m and np.isfinite(r["t"])
            ]
            rows.sort(key=lambda r: r["t"])
            path = os.path.join(directory, f"{prefix}_{est}_m{m}.dat")
            with open(path, "w") as fh:
                fh.write("# t mean_w1 stderr_w1\n")
                for r in rows:
                    fh.write(
                        f"{self._fmt(r['t'])} {self._fmt(r['mean_w1'])} "
                        f"{self._fmt(r['stderr_w1'])}\n"
                    )
            paths.append(path)
        return paths

    def lookup(self, estimator: str, t: float, m: int) -> dict:
        for row in self.rows:
            if (
                row["estimator"] == estimator
                and row["m"] == m
                and (row["t"] == t or (np.isinf(t) and np.isinf(row["t"])))
            ):
                return row
        raise KeyError(f"no row for ({estimator}, t={t}, m={m})")


def _fallback_measure(grid: BinGrid, k: int) -> AtomicUniformMeasure:
    return AtomicUniformMeasure(np.tile(grid.center(), (k, 1)))


def _run_replicate(payload: dict) -> dict:
    """One replicate of one cell: simulate, run the estimators, score."""
    spec: ExperimentSpec = payload["spec"]
    t, n_side, rep = payload["t"], payload["m_side"], payload["rep"]
    truth = spec.truth()
    k = truth.k
    kernel = GaussianKernel(sigma=spec.sigma, dim=2)
    dims = (n_side, n_side)
    grid = BinGrid([0.0, 0.0], [1.0, 1.0], dims)
    if np.isinf(t):
        image = noiseless(kernel, truth, grid)
    else:
        image = simulate(
            kernel, truth, grid, t,
            replicate_seed(spec.seed, payload["cell_index"], rep),
        )
    out = {}
    mm_est = None
    import warnings as _warnings

    for name in spec.estimators:
        start = time.perf_counter()
        try:
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore")
                if name == "mm":
                    est = mm_complex(image, kernel, k)
                    mm_est = est
                elif name == "em":
                    init = mm_est
                    if init is None:
                        init = mm_complex(image, kernel, k)
                    est, _ = run_em(
                        image, kernel, init,
                        EmConfig(max_iterations=spec.em_max_iterations),
                    )
                else:  # pragma: no cover - spec validation rejects earlier
                    raise ValueError(name)
            elapsed = time.perf_counter() - start
            out[name] = {
                "w1": wasserstein_p(est, truth, 1),
                "time": elapsed,
                "failed": False,
            }
        except (RootRecoveryError, ValueError, FloatingPointError) as exc:
            elapsed = time.perf_counter() - start
            fallback = _fallback_measure(grid, k)
            out[name] = {
                "w1": np.nan,
                "w1_fallback": wasserstein_p(fallback, truth, 1),
                "time": elapsed,
                "failed": True,
                "error": str(exc),
            }
    return out


def _aggregate_cell(spec: ExperimentSpec, t: float, n_side: int,
                    results: list) -> list:
    rows = []
    for name in spec.estimators:
        w1 = np.array([r[name]["w1"] for r in results], dtype=float)
        failed = np.array([r[name]["failed"] for r in results], dtype=bool)
        times = np.array([r[name]["time"] for r in results], dtype=float)
        ok = w1[~failed]
        pess = w1.copy()
        for i, r in enumerate(results):
            if failed[i]:
                pess[i] = r[name]["w1_fallback"]
        n_ok = int(ok.size)
        mean = float(ok.mean()) if n_ok else float("nan")
        stderr = float(ok.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else 0.0
        rows.append({
            "estimator": name,
            "configuration": spec.configuration,
            "k": spec.truth().k,
            "sigma": spec.sigma,
            "t": float(t),
            "m": n_side * n_side,
            "n": len(results),
            "n_fail": int(failed.sum()),
            "mean_w1": mean,
            "stderr_w1": stderr,
            "mean_w1_pessimistic": float(pess.mean()),
            "stderr_w1_pessimistic": (
                float(pess.std(ddof=1) / np.sqrt(len(pess))) if len(pess) > 1 else 0.0
            ),
            "mean_time_s": float(times.mean()),
            "w1_samples": [None if failed[i] else float(w1[i])
                           for i in range(len(results))],
        })
    return rows


def run_risk_experiment(spec: ExperimentSpec) -> RiskTable:
    """Sweep every (t, m) cell of the spec and aggregate replicate W_1 errors.

    Replicates run in a process pool when spec.jobs > 1; the reduction always
    consumes results in replicate order so means are bit-stable.  Noiseless
    cells (t = inf) are deterministic and computed once.
    """
    table = RiskTable()
    cells = [(t, n) for t in spec.t_values for n in spec.resolutions]
    jobs = spec.jobs or os.cpu_count() or 1
    for cell_index, (t, n_side) in enumerate(cells):
        reps = 1 if np.isinf(t) else spec.replicates
        payloads = [
            {"spec": spec, "t": t, "m_side": n_side, "rep": rep,
             "cell_index": cell_index}
            for rep in range(reps)
        ]
        if jobs > 1 and len(payloads) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_replicate, payloads))
        else:
            results = [_run_replicate(p) for p in payloads]
        if np.isinf(t) and spec.replicates > 1:
            results = results * spec.replicates  # deterministic cell, reuse
        table.rows.extend(_aggregate_cell(spec, t, n_side, results))
        logger.info("cell t=%s m=%d done", t, n_side * n_side)
    return table


def run_runtime_comparison(spec: ExperimentSpec) -> RiskTable:
    """Risk experiment variant whose report focuses on wall-clock times.

    Adds an informational mm_faster_than_em flag per cell; a violation is
    logged, never raised.
    """
    table = run_risk_experiment(spec)
    by_cell = {}
    for row in table.rows:
        by_cell.setdefault((row["t"], row["m"]), {})[row["estimator"]] = row
    for (t, m), per_est in by_cell.items():
        if "mm" in per_est and "em" in per_est:
            faster = per_est["mm"]["mean_time_s"] < per_est["em"]["mean_time_s"]
            per_est["mm"]["mm_faster_than_em"] = faster
            per_est["em"]["mm_faster_than_em"] = faster
            if not faster:
                logger.info(
                    "informational: MM slower than EM at t=%s m=%s", t, m
                )
    return table
