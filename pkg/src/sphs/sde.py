"""Euler-Maruyama ensembles and linear-Gaussian tools."""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .generator import GeneratorContext
from .model import ControlLaw, ControlledSde, matvec

ENSEMBLE_MAGIC = b"SPHS"
FORMAT_VERSION = 1
_CHUNK_BUDGET = 1 << 21  # normals held in memory per block and chunk


class NotHurwitzError(ValueError):
    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        spec = ", ".join(f"{complex(v):.4g}" for v in self.eigenvalues)
        super().__init__(f"A is not Hurwitz; spectrum = [{spec}]")


@dataclass
class PathEnsemble:
    """Seeded batch of Euler-Maruyama paths.

    ``states[p, k]`` is path ``p`` at time ``k * stride * dt``.  Diverged paths
    are frozen at their last finite state; ``diverged_at`` holds the first
    step index that produced a non-finite state (``-1`` if none).
    """

    dt: float
    n_steps: int
    states: np.ndarray
    seed: int
    stride: int = 1
    diverged_at: Optional[np.ndarray] = None
    model_name: str = ""
    noise_streams: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.diverged_at is None:
            self.diverged_at = np.full(self.states.shape[0], -1, dtype=np.int64)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[1]) * self.stride * self.dt

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_at >= 0

    @property
    def divergent_fraction(self) -> float:
        return float(np.mean(self.diverged))

    @property
    def x0(self) -> np.ndarray:
        return self.states[:, 0, :]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1, :]


def path_generator(seed: int, path_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based substream for one path: Philox keyed by ``(seed, stream, path)``."""
    key_hi = (int(stream) << 40) | int(path_index)
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, key_hi]))


def _noise_streams(model: ControlledSde, streams) -> list:
    """List of ``(stream_id, column_slice)`` covering the noise columns."""
    if streams:
        return [(int(s), slice(int(a), int(b))) for s, a, b in streams]
    blocks = getattr(model, "noise_blocks", None)
    if blocks:
        return [(int(s), slice(int(a), int(b))) for s, a, b in blocks]
    return [(0, slice(0, model.d))]


def _simulate_block(model, control, x0, dt, n_steps, paths, seed, stride, streams):
    n, d = model.n, model.d
    P = len(paths)
    n_rec = n_steps // stride + 1
    out = np.empty((P, n_rec, n))
    x = np.array(np.broadcast_to(x0, (P, n)), dtype=float)
    if x0.ndim == 2:
        x = np.array(x0[paths], dtype=float)
    out[:, 0] = x
    gens = [[path_generator(seed, p, s) for (s, _) in streams] for p in paths]
    diverged_at = np.full(P, -1, dtype=np.int64)
    alive = np.ones(P, dtype=bool)
    sqdt = np.sqrt(dt)
    chunk = max(1, min(n_steps, _CHUNK_BUDGET // max(1, P * d)))
    ctx = GeneratorContext(model, control)
    k = 0
    rec = 1
    while k < n_steps:
        c = min(chunk, n_steps - k)
        xi = np.empty((P, c, d))
        for i, row in enumerate(gens):
            for g, (_, cols) in zip(row, streams):
                xi[i, :, cols] = g.standard_normal((c, cols.stop - cols.start))
        for j in range(c):
            drift = ctx.drift(x)
            noise = matvec(model.sigma(x), xi[:, j, :])
            x_new = x + drift * dt + noise * sqdt
            ok = np.all(np.isfinite(x_new), axis=1)
            if not np.all(ok[alive]):
                newly = alive & ~ok
                diverged_at[newly] = k + j + 1
                alive &= ok
            x = np.where(alive[:, None], x_new, x)
            if (k + j + 1) % stride == 0:
                out[:, rec] = x
                rec += 1
        k += c
    return out, diverged_at


def simulate(
    model: ControlledSde,
    control: Optional[ControlLaw],
    x0,
    dt: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    stride: int = 1,
    threads: int = 1,
    streams=None,
) -> PathEnsemble:
    """Euler-Maruyama ``x_{k+1} = x_k + drift(x_k) dt + sigma(x_k) sqrt(dt) xi_k``.

    Each path draws from its own Philox stream keyed by ``(seed, path)``, so
    results do not depend on ``threads`` or on block boundaries.  ``x0`` is a
    single state or one state per path.  ``streams`` optionally assigns noise
    columns to distinct stream ids as ``[(stream_id, start, stop), ...]``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be >= 1")
    if stride < 1 or n_steps % stride:
        raise ValueError("stride must divide n_steps")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape not in ((model.n,), (n_paths, model.n)):
        raise ValueError(f"x0 must have shape ({model.n},) or ({n_paths}, {model.n})")
    control = control if control is not None else ControlLaw.zero(model.m)
    st = _noise_streams(model, streams)
    threads = max(1, int(threads))
    blocks = [b for b in np.array_split(np.arange(n_paths), threads) if b.size]
    args = (model, control, x0, float(dt), int(n_steps))
    if len(blocks) == 1:
        results = [_simulate_block(*args, blocks[0], seed, stride, st)]
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            results = list(pool.map(lambda b: _simulate_block(*args, b, seed, stride, st), blocks))
    states = np.concatenate([r[0] for r in results], axis=0)
    div = np.concatenate([r[1] for r in results])
    return PathEnsemble(
        dt=float(dt),
        n_steps=int(n_steps),
        states=states,
        seed=int(seed),
        stride=int(stride),
        diverged_at=div,
        model_name=getattr(model, "name", ""),
        noise_streams=tuple((s, c.start, c.stop) for s, c in st),
    )


# ---------------------------------------------------------------------------
# linear systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearModelView:
    """``dX = A (X - x_e) dt + Sigma_map dW``."""

    A: np.ndarray
    Sigma_map: np.ndarray
    x_e: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        S = np.asarray(self.Sigma_map, dtype=float)
        S = S.reshape(A.shape[0], -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Sigma_map", S)
        xe = np.zeros(A.shape[0]) if self.x_e is None else np.asarray(self.x_e, dtype=float).ravel()
        object.__setattr__(self, "x_e", xe)

    @classmethod
    def from_model(cls, model: ControlledSde) -> "LinearModelView":
        if model.linear is None:
            raise ValueError("model is not declared linear with additive noise")
        A, xe = model.linear
        S = model.sigma(xe)
        return cls(A, np.array(S), xe)


def kalman_rank(A, Sigma, rtol: float = 1e-10) -> tuple:
    """Rank of ``[Sigma, A Sigma, ..., A^{n-1} Sigma]`` via SVD and the controllability verdict."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    S = np.asarray(Sigma, dtype=float).reshape(n, -1)
    blocks = [S]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    M = np.hstack(blocks)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, False
    rank = int(np.sum(sv > rtol * sv[0]))
    return rank, rank == n


def finite_horizon_covariance(lin: LinearModelView, t: float, n_steps: Optional[int] = None) -> np.ndarray:
    """``int_0^t e^{A(t-s)} Sigma Sigma^T e^{A^T(t-s)} ds`` by classical RK4 on
    ``P' = AP + PA^T + Sigma Sigma^T``, ``P(0) = 0``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    A = lin.A
    n = A.shape[0]
    Q = lin.Sigma_map @ lin.Sigma_map.T
    if t == 0:
        return np.zeros((n, n))
    if n_steps is None:
        # h * |A| <= 0.01 keeps the RK4 error near round-off
        n_steps = max(200, int(np.ceil(100.0 * t * max(1.0, np.linalg.norm(A, 2)))))
    h = float(t) / n_steps

    def rhs(P):
        return A @ P + P @ A.T + Q

    P = np.zeros((n, n))
    for _ in range(n_steps):
        k1 = rhs(P)
        k2 = rhs(P + 0.5 * h * k1)
        k3 = rhs(P + 0.5 * h * k2)
        k4 = rhs(P + h * k3)
        P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (P + P.T)


def stationary_covariance(lin: LinearModelView, tol: float = 1e-10) -> np.ndarray:
    """Solve ``A P + P A^T + Sigma Sigma^T = 0`` for Hurwitz ``A``."""
    A = lin.A
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= 0):
        raise NotHurwitzError(eig)
    Q = lin.Sigma_map @ lin.Sigma_map.T
    P = solve_continuous_lyapunov(A, -Q)
    P = 0.5 * (P + P.T)
    resid = np.max(np.abs(A @ P + P @ A.T + Q))
    if resid > tol * max(1.0, np.max(np.abs(Q))):
        raise ArithmeticError(f"Lyapunov residual {resid:.3e} above tolerance")
    return P


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def ensemble_to_csv(ens: PathEnsemble, path) -> None:
    """One row per (path, recorded step): ``path, step, t, x1..xn``."""
    t = ens.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "t"] + [f"x{i + 1}" for i in range(ens.dim)])
        for p in range(ens.n_paths):
            for k in range(ens.states.shape[1]):
                w.writerow([p, k * ens.stride, repr(float(t[k]))] + [repr(float(v)) for v in ens.states[p, k]])


def ensemble_from_csv(path, dt: float, seed: int = 0) -> PathEnsemble:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_paths = int(rows[:, 0].max()) + 1
    steps = np.unique(rows[:, 1]).astype(int)
    stride = int(steps[1] - steps[0]) if steps.size > 1 else 1
    states = rows[:, 3:].reshape(n_paths, steps.size, -1)
    return PathEnsemble(dt=dt, n_steps=int(steps[-1]), states=states, seed=seed, stride=stride)


_ENS_HEADER = struct.Struct("<4sIIIIIdQ")


def ensemble_to_binary(ens: PathEnsemble, path) -> None:
    """Little-endian layout: header ``magic, version, n_paths, n_records, dim,
    stride, dt, seed`` then ``diverged_at`` (int64 per path) then states
    (float64, path-major)."""
    with open(path, "wb") as fh:
        fh.write(
            _ENS_HEADER.pack(
                ENSEMBLE_MAGIC,
                FORMAT_VERSION,
                ens.n_paths,
                ens.states.shape[1],
                ens.dim,
                ens.stride,
                ens.dt,
                ens.seed & 0xFFFFFFFFFFFFFFFF,
            )
        )
        fh.write(np.asarray(ens.diverged_at, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ens.states, dtype="<f8").tobytes())


def ensemble_from_binary(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        head = fh.read(_ENS_HEADER.size)
        magic, version, n_paths, n_rec, dim, stride, dt, seed = _ENS_HEADER.unpack(head)
        if magic != ENSEMBLE_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported version {version}")
        div = np.frombuffer(fh.read(8 * n_paths), dtype="<i8").copy()
        states = np.frombuffer(fh.read(8 * n_paths * n_rec * dim), dtype="<f8").reshape(n_paths, n_rec, dim).copy()
    return PathEnsemble(dt=dt, n_steps=(n_rec - 1) * stride, states=states, seed=seed, stride=stride, diverged_at=div)
