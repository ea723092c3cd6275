"""Empirical invariant measures, time averages and Dynkin audits from path ensembles."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .generator import GeneratorContext, apply_generator
from .grid import DensityField, Grid
from .model import Box, EnergyFunction
from .sde import PathEnsemble, simulate

DEFAULT_BURN_IN = 0.2
MAX_BURN_IN = 0.9


class ErgodicsError(ValueError):
    pass


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center, dtype=float), axis=-1) <= self.radius

    def bounding_box(self) -> Box:
        c = np.asarray(self.center, dtype=float)
        return Box(tuple(c - self.radius), tuple(c + self.radius))

    def to_dict(self) -> dict:
        return {"ball": {"center": list(self.center), "radius": self.radius}}


Region = Union[Box, Ball]


def _burn_in_index(n_records: int, burn_in: float) -> int:
    if not 0.0 <= burn_in <= MAX_BURN_IN:
        raise ErgodicsError(f"burn_in must lie in [0, {MAX_BURN_IN}]")
    return int(np.ceil(burn_in * (n_records - 1)))


# ---------------------------------------------------------------------------
# occupation histograms
# ---------------------------------------------------------------------------


@dataclass
class OccupationHistogram:
    """Pooled post-burn-in occupation counts on a box.

    ``mean`` and ``covariance`` are computed from the raw samples inside and
    outside the box; ``mean_se`` uses per-path means as independent batches.
    """

    box: Box
    bins: tuple
    counts: np.ndarray
    burn_in: float
    total: int
    outside: int
    mean: np.ndarray
    covariance: np.ndarray
    mean_se: np.ndarray
    n_paths_used: int
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return Grid(self.box, self.bins)

    @property
    def inside(self) -> int:
        return self.total - self.outside

    @property
    def outside_fraction(self) -> float:
        return self.outside / self.total if self.total else 0.0

    def density(self) -> DensityField:
        """Counts normalised to unit mass on the box."""
        g = self.grid
        vals = self.counts / (self.inside * g.cell_volume)
        return DensityField(g, vals, normalized=True, meta={"source": "histogram"})

    def bin_of(self, x) -> tuple:
        x = np.asarray(x, dtype=float)
        lo, h = np.array(self.box.lo), self.grid.spacing
        idx = np.floor((x - lo) / h).astype(int)
        return tuple(int(min(max(i, 0), b - 1)) for i, b in zip(idx, self.bins))

    def summary(self, reference=None) -> dict:
        out = {
            "box": self.box.to_dict(),
            "bins": list(self.bins),
            "burn_in": self.burn_in,
            "total_samples": self.total,
            "outside_fraction": self.outside_fraction,
            "n_paths_used": self.n_paths_used,
            "mean": self.mean.tolist(),
            "mean_se": self.mean_se.tolist(),
            "covariance": self.covariance.tolist(),
        }
        if reference is not None:
            tv, sup = density_distance(self, reference)
            out["tv_vs_reference"] = tv
            out["sup_vs_reference"] = sup
        return out


def _post_burn_in(ens: PathEnsemble, burn_in: float) -> np.ndarray:
    k0 = _burn_in_index(ens.states.shape[1], burn_in)
    return ens.states[~ens.diverged, k0:, :]


def occupation_measure(ens: PathEnsemble, box: Box, bins, burn_in: float = DEFAULT_BURN_IN) -> OccupationHistogram:
    """Histogram of post-burn-in states pooled over non-diverged paths."""
    if box.dim != ens.dim:
        raise ErgodicsError(f"box dim {box.dim} != state dim {ens.dim}")
    bins = tuple(int(b) for b in (np.broadcast_to(bins, (ens.dim,))))
    S = _post_burn_in(ens, burn_in)
    if S.shape[0] == 0:
        raise ErgodicsError("every path diverged; nothing to histogram")
    counts = np.zeros(bins, dtype=np.int64)
    rng = list(zip(box.lo, box.hi))
    lo, hi = np.array(box.lo), np.array(box.hi)
    for path in S:  # per-path integer counts; summation order is irrelevant
        c, _ = np.histogramdd(path, bins=bins, range=rng)
        counts += c.astype(np.int64)
    flat = S.reshape(-1, ens.dim)
    inside = np.all((flat >= lo) & (flat <= hi), axis=1)
    total = int(flat.shape[0])
    n_in = int(inside.sum())
    if n_in == 0:
        raise ErgodicsError("all occupation mass lies outside the box; enlarge the domain")
    path_means = S.mean(axis=1)
    se = path_means.std(axis=0, ddof=1) / np.sqrt(S.shape[0]) if S.shape[0] > 1 else np.full(ens.dim, np.inf)
    return OccupationHistogram(
        box=box,
        bins=bins,
        counts=counts,
        burn_in=float(burn_in),
        total=total,
        outside=total - n_in,
        mean=flat.mean(axis=0),
        covariance=np.atleast_2d(np.cov(flat, rowvar=False)),
        mean_se=se,
        n_paths_used=int(S.shape[0]),
    )


def density_distance(h: OccupationHistogram, reference) -> tuple:
    """``(total variation, sup norm)`` between ``h`` and a reference density.

    ``reference`` is a :class:`DensityField` on the same grid, another
    histogram with the same box and bins, or a callable density evaluated
    at bin centres.  Both sides are normalised on the box first.
    """
    grid = h.grid
    p = h.density().values
    if isinstance(reference, OccupationHistogram):
        if reference.bins != h.bins or reference.box != h.box:
            raise ErgodicsError("histograms have different grids")
        q = reference.density().values
    elif isinstance(reference, DensityField):
        if reference.grid.shape != grid.shape or reference.grid.box != grid.box:
            raise ErgodicsError("reference density grid does not match histogram bins")
        q = reference.values
    elif callable(reference):
        q = np.asarray(reference(grid.points()), dtype=float)
    else:
        raise ErgodicsError("unsupported reference type")
    mass = q.sum() * grid.cell_volume
    if not mass > 0:
        raise ErgodicsError("reference has no mass on the box")
    q = q / mass
    tv = 0.5 * float(np.sum(np.abs(p - q)) * grid.cell_volume)
    return tv, float(np.max(np.abs(p - q)))


def gaussian_density(mean, cov) -> Callable:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    inv = np.linalg.inv(cov)
    norm = 1.0 / np.sqrt((2.0 * np.pi) ** mean.size * np.linalg.det(cov))

    def pdf(x):
        d = np.asarray(x, dtype=float) - mean
        return norm * np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, inv, d))

    return pdf


def region_mass(density: Callable, region: Region, n_per_axis: int = 801) -> float:
    """Midpoint-rule mass of ``density`` over ``region`` (low dimension only)."""
    box = region.bounding_box() if isinstance(region, Ball) else region
    g = Grid(box, (n_per_axis,) * box.dim)
    P = g.points()
    vals = density(P) * region.contains(P)
    return g.integrate(vals)


# ---------------------------------------------------------------------------
# time averages
# ---------------------------------------------------------------------------


@dataclass
class TimeAverageSeries:
    times: np.ndarray
    values: np.ndarray
    region: dict

    @property
    def final(self) -> float:
        return float(self.values[-1])

    @property
    def positive(self) -> bool:
        return self.final > 0.0

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "values": self.values.tolist(), "final": self.final, "positive": self.positive, "region": self.region}


def time_average_convergence(ens: PathEnsemble, region: Region, checkpoints: Optional[Sequence[float]] = None) -> TimeAverageSeries:
    """Fraction of time spent in ``region`` over ``[0, T_k]``, averaged over paths.

    Diverged paths count as outside the region after divergence.
    """
    times = ens.times
    if checkpoints is None:
        checkpoints = np.linspace(0, ens.horizon, 11)[1:]
    checkpoints = np.asarray(checkpoints, dtype=float)
    if np.any(checkpoints <= 0) or np.any(checkpoints > ens.horizon + 1e-12):
        raise ErgodicsError("checkpoints must lie in (0, horizon]")
    inside = np.empty(ens.states.shape[:2], dtype=bool)
    for p in range(ens.n_paths):
        inside[p] = region.contains(ens.states[p])
        if ens.diverged[p]:
            k = ens.diverged_at[p] // ens.stride
            inside[p, k:] = False
    occ = inside.mean(axis=0)
    csum = np.cumsum(occ)
    idx = np.searchsorted(times, checkpoints - 1e-12 * ens.dt)
    idx = np.minimum(idx, len(times) - 1)
    vals = csum[idx] / (idx + 1)
    reg = region.to_dict() if isinstance(region, Ball) else {"box": region.to_dict()}
    return TimeAverageSeries(checkpoints, vals, reg)


# ---------------------------------------------------------------------------
# Dynkin audit
# ---------------------------------------------------------------------------


@dataclass
class DynkinResult:
    residual: float
    mc_error: float
    bias_bound: float
    bias_constant: float
    n_paths: int
    dt: float

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= self.mc_error + self.bias_bound

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "mc_error": self.mc_error,
            "bias_bound": self.bias_bound,
            "bias_constant": self.bias_constant,
            "n_paths": self.n_paths,
            "dt": self.dt,
            "passed": self.passed,
        }


def _dynkin_samples(ens: PathEnsemble, f: EnergyFunction, ctx: GeneratorContext) -> tuple:
    if ens.stride != 1:
        raise ErgodicsError("Dynkin audit needs every step recorded (stride 1)")
    keep = ~ens.diverged
    S = ens.states[keep]
    N = S.shape[1] - 1
    integral = np.zeros(S.shape[0])
    first = last = None
    for k in range(N + 1):
        Lf = apply_generator(ctx, f, S[:, k])
        if k == 0:
            first = Lf
        if k == N:
            last = Lf
        else:
            integral += Lf * ens.dt
    samples = f(S[:, -1]) - f(S[:, 0]) - integral
    return samples, first, last


def dynkin_residual(ens: PathEnsemble, f: EnergyFunction, ctx: GeneratorContext, coarse: Optional[PathEnsemble] = None) -> DynkinResult:
    """Sample mean of ``f(X_T) - f(x_0) - sum_k L f(x_k) dt`` with error bars.

    ``mc_error`` is three standard errors.  The discretisation bias is
    reported as ``C dt``: with a ``coarse`` ensemble at step ``2 dt`` the
    constant is fitted from the two residuals, otherwise it is the
    left/right Riemann-sum discrepancy of the time integral.
    """
    samples, first, last = _dynkin_samples(ens, f, ctx)
    n = samples.size
    res = float(samples.mean())
    mc = 3.0 * float(samples.std(ddof=1)) / np.sqrt(n) if n > 1 else float("inf")
    if coarse is not None:
        rc = float(_dynkin_samples(coarse, f, ctx)[0].mean())
        C = abs(rc - res) / ens.dt
    else:
        C = abs(float(np.mean(last - first)))
    return DynkinResult(res, mc, C * ens.dt, C, n, ens.dt)


# ---------------------------------------------------------------------------
# stationarity by restart
# ---------------------------------------------------------------------------


def restart_from_occupation(
    ens: PathEnsemble,
    model,
    control,
    horizon: float,
    n_paths: int,
    seed: int,
    burn_in: float = DEFAULT_BURN_IN,
) -> PathEnsemble:
    """Simulate ``n_paths`` fresh paths for ``horizon`` started from states
    resampled uniformly from the pooled post-burn-in occupation samples."""
    S = _post_burn_in(ens, burn_in).reshape(-1, ens.dim)
    rng = np.random.default_rng(seed)
    x0 = S[rng.integers(0, S.shape[0], size=n_paths)]
    n_steps = max(1, int(round(horizon / ens.dt)))
    return simulate(model, control, x0, ens.dt, n_steps, n_paths, seed, stride=n_steps)


def final_state_histogram(ens: PathEnsemble, box: Box, bins) -> OccupationHistogram:
    """Histogram of the terminal states only."""
    view = PathEnsemble(ens.dt, ens.n_steps, ens.states[:, -1:, :], ens.seed, ens.stride, ens.diverged_at)
    return occupation_measure(view, box, bins, burn_in=0.0)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def histogram_to_csv(h: OccupationHistogram, path) -> None:
    """Columns ``c1..cn, density`` for each bin centre."""
    dens = h.density()
    P = dens.grid.flat_points()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{i + 1}" for i in range(h.box.dim)] + ["density"])
        for p, v in zip(P, dens.values.ravel()):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def histogram_summary_json(h: OccupationHistogram, path, reference=None) -> dict:
    summary = h.summary(reference)
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
