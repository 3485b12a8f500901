"""Finite-difference solvers for the arbitrage-quantity Cauchy problems.

``solve_min_solution`` marches the degenerate parabolic equation

    dU/dtau = (1/2) sum_ij frak_a_ij(x) D2_ij U + sum_i bhat_i(x) D_i U,
    U(0, .) = 1,

explicitly on a truncated orthant box.  The Cauchy problem has the trivial
solution U = 1; the quantity of interest is the *smallest* nonnegative
solution, which equals the survival probability of the auxiliary diffusion.
Absorbing (zero Dirichlet) conditions on the inner truncation faces select
exactly that killed-diffusion solution; the outer faces carry a zero second
normal derivative (linear extrapolation), since no far-field condition is
available.  Enlarging the box can therefore only increase the solution at a
fixed query point, which the tests use as the numerical signature of
minimal-solution selection.

``solve_weight_equation`` solves the two-asset weight-space analogue

    dQ/dtau = (1/2) m^2 P_11(m) d2Q/dm2

on an interval of the simplex coordinate m = m_1, absorbing at both ends.

Time integration is explicit Euler with a per-solve stability certificate

    dt <= c / max_nodes( sum_ij |a_ij| / (dx_i dx_j) + sum_i |bhat_i| / dx_i )

with c = 0.9; the solver subdivides each output slice until the certificate
holds and refuses (StabilityViolation) only past a hard step budget.
"""

from __future__ import annotations

import csv
import gzip
import itertools
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ConfigInvalid,
    DomainError,
    ParamInvalid,
    StabilityViolation,
    UnsupportedDimension,
)
from .models import ModelSpec

_CFL = 0.9
_MAX_STEPS = 5_000_000
_LOG_FLOOR = 1e-12       # U floor before log-gradient division
_CLIP_FLAG = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Space-time box for the orthant solver (n in {1,2,3}).

    ``lower`` must be strictly positive: it is the inner truncation offset
    standing in for the orthant boundary.  ``d_tau`` is the *output* slice
    spacing; internal substeps are chosen by the stability certificate.
    """

    n: int
    lower: tuple
    upper: tuple
    points_per_axis: int
    d_tau: float
    horizon: float

    def __post_init__(self):
        if self.n not in (1, 2, 3):
            raise UnsupportedDimension(f"grids support n in 1..3, got {self.n}")
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != (self.n,) or hi.shape != (self.n,):
            raise ConfigInvalid("lower/upper must have one entry per axis")
        if np.any(lo <= 0) or np.any(hi <= lo):
            raise ConfigInvalid("need 0 < lower < upper componentwise")
        if self.points_per_axis < 16:
            raise ConfigInvalid("points_per_axis must be at least 16")
        if self.d_tau <= 0 or self.horizon <= 0:
            raise ConfigInvalid("d_tau and horizon must be positive")

    @classmethod
    def default_box(cls, x0, horizon: float, points_per_axis: int = None,
                    d_tau: float = None) -> "GridSpec":
        """Truncation offsets 1e-2 * x0 (inner) and 30 * x0 (outer)."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
        n = x0.shape[0]
        if points_per_axis is None:
            points_per_axis = {1: 401, 2: 161, 3: 25}[n]
        if d_tau is None:
            d_tau = horizon / 50.0
        return cls(n=n, lower=tuple(1e-2 * x0), upper=tuple(30.0 * x0),
                   points_per_axis=points_per_axis, d_tau=d_tau, horizon=horizon)

    @property
    def axes(self) -> list:
        return [np.linspace(self.lower[i], self.upper[i], self.points_per_axis)
                for i in range(self.n)]

    @property
    def deltas(self) -> np.ndarray:
        return np.array([(self.upper[i] - self.lower[i]) / (self.points_per_axis - 1)
                         for i in range(self.n)])

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "lower": list(self.lower),
            "upper": list(self.upper),
            "points_per_axis": self.points_per_axis,
            "d_tau": self.d_tau,
            "horizon": self.horizon,
        }


@dataclass(frozen=True)
class PdeSolution:
    """Solved slices U(tau_k, x) on the grid, with interpolating access."""

    grid: GridSpec
    taus: np.ndarray
    values: np.ndarray          # (n_slices, points, [points, [points]])
    kind: str                   # "orthant_U" | "simplex_Q"
    max_clip: float             # largest [0,1]-clip applied while marching

    @property
    def clipped_flag(self) -> bool:
        return self.max_clip > _CLIP_FLAG

    # -- interpolation ------------------------------------------------------

    def _locate(self, x: np.ndarray):
        axes = self.grid.axes
        n = self.grid.n
        idx, frac = [], []
        for i in range(n):
            ax = axes[i]
            tol = 1e-9 * (ax[-1] - ax[0])
            xi = x[..., i]
            if np.any(xi < ax[0] - tol) or np.any(xi > ax[-1] + tol):
                raise DomainError(
                    f"query coordinate {i} outside solved box [{ax[0]}, {ax[-1]}]"
                )
            t = np.clip((xi - ax[0]) / (ax[1] - ax[0]), 0.0, len(ax) - 1 - 1e-12)
            j = np.floor(t).astype(np.int64)
            idx.append(j)
            frac.append(t - j)
        return idx, frac

    def _interp_space(self, slab: np.ndarray, x: np.ndarray) -> np.ndarray:
        idx, frac = self._locate(x)
        n = self.grid.n
        out = np.zeros(x.shape[:-1])
        for corner in itertools.product((0, 1), repeat=n):
            w = np.ones(x.shape[:-1])
            gather = []
            for i, bit in enumerate(corner):
                w = w * (frac[i] if bit else (1.0 - frac[i]))
                gather.append(idx[i] + bit)
            out += w * slab[tuple(gather)]
        return out

    def _interp(self, tau: float, x: np.ndarray) -> np.ndarray:
        taus = self.taus
        tol = 1e-9 * max(1.0, taus[-1])
        if tau < -tol or tau > taus[-1] + tol:
            raise DomainError(f"tau {tau} outside solved range [0, {taus[-1]}]")
        tau = min(max(tau, 0.0), float(taus[-1]))
        j = int(np.searchsorted(taus, tau, side="right") - 1)
        j = min(j, len(taus) - 2) if len(taus) > 1 else 0
        if len(taus) == 1:
            return self._interp_space(self.values[0], x)
        w = (tau - taus[j]) / (taus[j + 1] - taus[j])
        lo = self._interp_space(self.values[j], x)
        hi = self._interp_space(self.values[j + 1], x)
        return (1.0 - w) * lo + w * hi

    def value_at(self, tau: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0:
            x = x[None]
        return self._interp(tau, x)

    def query(self, tau: float, x) -> dict:
        """Interpolated value and log-gradient at (tau, x).

        The gradient uses central differences of the interpolant with the
        grid spacing as step, falling back to one-sided differences where a
        central step would leave the box; the value is floored at 1e-12
        before the log-gradient division.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if x.ndim == 1:
            x = x[None, :]
        u = self._interp(tau, x)
        n = self.grid.n
        deltas = self.grid.deltas
        axes = self.grid.axes
        grad = np.empty_like(x)
        for i in range(n):
            h = deltas[i]
            xp = x.copy()
            xm = x.copy()
            hi_ok = x[..., i] + h <= axes[i][-1]
            lo_ok = x[..., i] - h >= axes[i][0]
            xp[..., i] = np.where(hi_ok, x[..., i] + h, x[..., i])
            xm[..., i] = np.where(lo_ok, x[..., i] - h, x[..., i])
            span = np.where(hi_ok, x[..., i] + h, x[..., i]) \
                - np.where(lo_ok, x[..., i] - h, x[..., i])
            up = self._interp(tau, xp)
            um = self._interp(tau, xm)
            grad[..., i] = (up - um) / span
        grad_log = grad / np.maximum(u, _LOG_FLOOR)[..., None]
        if squeeze:
            return {"value": float(u[0]), "grad_log": grad_log[0]}
        return {"value": u, "grad_log": grad_log}

    # -- persistence ----------------------------------------------------------

    def export(self, csv_path: str, header_path: str) -> None:
        """CSV rows (tau, x_1..x_n, U) plus a JSON header with the grid."""
        with open(header_path, "w") as fh:
            json.dump({"grid": self.grid.to_dict(), "kind": self.kind,
                       "max_clip": self.max_clip,
                       "taus": [float(t) for t in self.taus]}, fh, indent=2)
        opener = gzip.open if str(csv_path).endswith(".gz") else open
        mesh = np.stack(np.meshgrid(*self.grid.axes, indexing="ij"), axis=-1)
        flat = mesh.reshape(-1, self.grid.n)
        with opener(csv_path, "wt", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau"] + [f"x_{i+1}" for i in range(self.grid.n)] + ["U"])
            for k, tau in enumerate(self.taus):
                vals = self.values[k].reshape(-1)
                for row, v in zip(flat, vals):
                    writer.writerow([f"{tau:.12g}"] + [f"{c:.12g}" for c in row]
                                    + [f"{v:.17g}"])

    @classmethod
    def load(cls, csv_path: str, header_path: str) -> "PdeSolution":
        with open(header_path) as fh:
            head = json.load(fh)
        grid = GridSpec(**head["grid"])
        taus = np.asarray(head["taus"], dtype=np.float64)
        shape = (len(taus),) + (grid.points_per_axis,) * grid.n
        values = np.empty(shape)
        opener = gzip.open if str(csv_path).endswith(".gz") else open
        per_slice = grid.points_per_axis**grid.n
        with opener(csv_path, "rt", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            buf = np.array([float(r[-1]) for r in reader])
        if buf.size != per_slice * len(taus):
            raise ConfigInvalid("solution CSV does not match its header")
        for k in range(len(taus)):
            values[k] = buf[k * per_slice:(k + 1) * per_slice].reshape(shape[1:])
        return cls(grid=grid, taus=taus, values=values, kind=head["kind"],
                   max_clip=head["max_clip"])


# ---------------------------------------------------------------------------
# explicit marching kernel
# ---------------------------------------------------------------------------

def _stencil_terms(A: np.ndarray, B: np.ndarray, deltas: np.ndarray):
    """Precompute (coefficient, slicer) pairs for the interior update.

    The interior update is  sum_k coef_k * U[slicer_k]; quadratics are
    differenced exactly by these centered stencils.
    """
    n = B.shape[-1]
    core = tuple(slice(1, -1) for _ in range(n))

    def shifted(moves: dict) -> tuple:
        out = []
        for d in range(n):
            m = moves.get(d, 0)
            out.append(slice(2, None) if m > 0 else
                       slice(0, -2) if m < 0 else slice(1, -1))
        return tuple(out)

    terms = []
    center = None
    for i in range(n):
        c2 = 0.5 * A[core + (i, i)] / deltas[i]**2
        c1 = B[core + (i,)] / (2.0 * deltas[i])
        terms.append((c2 + c1, shifted({i: +1})))
        terms.append((c2 - c1, shifted({i: -1})))
        center = -2.0 * c2 if center is None else center - 2.0 * c2
    for i in range(n):
        for j in range(i + 1, n):
            cx = A[core + (i, j)] / (4.0 * deltas[i] * deltas[j])
            if not np.any(cx):
                continue
            terms.append((cx, shifted({i: +1, j: +1})))
            terms.append((cx, shifted({i: -1, j: -1})))
            terms.append((-cx, shifted({i: +1, j: -1})))
            terms.append((-cx, shifted({i: -1, j: +1})))
    return core, center, terms


def apply_generator(model: ModelSpec, grid: GridSpec, field: np.ndarray) -> np.ndarray:
    """One application of the interior spatial operator to ``field``.

    Exposed for verification: centered stencils differentiate quadratics
    exactly, so e.g. x_i x_j maps to a_ij(x) + bhat_i x_j + bhat_j x_i
    node-exactly on the interior.
    """
    A, B = _node_coefficients(model, grid)
    core, center, terms = _stencil_terms(A, B, grid.deltas)
    out = np.zeros_like(field)
    acc = center * field[core]
    for coef, sl in terms:
        acc += coef * field[sl]
    out[core] = acc
    return out


def _node_coefficients(model: ModelSpec, grid: GridSpec):
    mesh = np.stack(np.meshgrid(*grid.axes, indexing="ij"), axis=-1)
    A = model.frak_cov(mesh)
    B = model.aux_drift(mesh)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ConfigInvalid("model coefficients are not finite on the grid box")
    return A, B


def _march(A: np.ndarray, B: np.ndarray, grid: GridSpec, outer_bc: str):
    """Explicit Euler marching; returns (taus, slabs, max_clip)."""
    deltas = grid.deltas
    n = grid.n
    # certificate: per-node sum |a_ij|/(dx_i dx_j) + |bhat_i|/dx_i
    scale2 = np.abs(A) / (deltas[:, None] * deltas[None, :])
    scale1 = np.abs(B) / deltas
    denom = float((scale2.sum(axis=(-1, -2)) + scale1.sum(axis=-1)).max())
    if not np.isfinite(denom) or denom <= 0:
        raise StabilityViolation(f"stability certificate degenerate (denom={denom})")
    dt_stable = _CFL / denom

    n_out = max(1, math.ceil(grid.horizon / grid.d_tau - 1e-9))
    d_out = grid.horizon / n_out
    substeps = max(1, math.ceil(d_out / dt_stable))
    if substeps * n_out > _MAX_STEPS:
        raise StabilityViolation(
            f"stability requires {substeps * n_out} steps (> {_MAX_STEPS}); "
            "coarsen the grid or shorten the horizon"
        )
    dt = d_out / substeps

    core, center, terms = _stencil_terms(A, B, deltas)
    U = np.ones((grid.points_per_axis,) * n)
    slabs = [U.copy()]
    taus = [0.0]
    max_clip = 0.0

    def face(axis, idx):
        sl = [slice(None)] * n
        sl[axis] = idx
        return tuple(sl)

    outer_faces = [face(axis, -1) for axis in range(n)]

    def apply_bcs(W, prev_outer):
        # linear extrapolation on the outer faces, capped by the previous
        # value there: the exact solution is nonincreasing in tau, and the
        # raw extrapolation can overshoot at corners when the decay wave
        # arrives
        for axis in range(n):
            if outer_bc == "extrapolate":
                extrap = 2.0 * W[face(axis, -2)] - W[face(axis, -3)]
                W[outer_faces[axis]] = np.minimum(extrap, prev_outer[axis])
            else:
                W[outer_faces[axis]] = 0.0
        for axis in range(n):
            W[face(axis, 0)] = 0.0

    for _ in range(n_out):
        for _ in range(substeps):
            prev_outer = [np.array(U[f], copy=True) for f in outer_faces]
            acc = center * U[core]
            for coef, sl in terms:
                acc += coef * U[sl]
            U[core] += dt * acc
            apply_bcs(U, prev_outer)
            hi = U.max()
            lo = U.min()
            excess = max(hi - 1.0, -lo, 0.0)
            if excess > 0.0:
                max_clip = max(max_clip, float(excess))
                np.clip(U, 0.0, 1.0, out=U)
        slabs.append(U.copy())
        taus.append(taus[-1] + d_out)

    return np.asarray(taus), np.stack(slabs), max_clip


def solve_min_solution(model: ModelSpec, grid: GridSpec) -> PdeSolution:
    """Smallest nonnegative solution of the Cauchy problem on the box.

    Zero Dirichlet data on the inner faces absorbs the auxiliary diffusion at
    the truncation offset, which selects the minimal solution; the outer
    faces extrapolate linearly.
    """
    if model.n != grid.n:
        raise ConfigInvalid(f"grid dimension {grid.n} != model dimension {model.n}")
    if grid.n > 3:
        raise UnsupportedDimension("orthant solver supports n <= 3")
    A, B = _node_coefficients(model, grid)
    taus, slabs, max_clip = _march(A, B, grid, outer_bc="extrapolate")
    return PdeSolution(grid=grid, taus=taus, values=slabs, kind="orthant_U",
                       max_clip=max_clip)


def solve_weight_equation(model: ModelSpec, grid: GridSpec) -> PdeSolution:
    """Survival probability of the two-asset weight diffusion.

    Requires a model whose coefficients are functions of the weights alone
    and n = 2; the grid is one-dimensional in the first weight coordinate
    with absorption at both truncated endpoints.
    """
    if model.n != 2:
        raise UnsupportedDimension(
            f"weight-space solver supports n = 2 only, got n = {model.n}"
        )
    if not model.weight_form:
        raise ParamInvalid(
            "weight-space solver needs coefficients that are functions of the "
            "weights alone"
        )
    if grid.n != 1:
        raise ConfigInvalid("weight grid must be one-dimensional (in m_1)")
    if not (0.0 < grid.lower[0] < grid.upper[0] < 1.0):
        raise ConfigInvalid("weight grid must satisfy 0 < lower < upper < 1")
    m = grid.axes[0]
    state = np.stack([m, 1.0 - m], axis=-1)
    S = model.vol_fn(state)
    mixed = np.einsum("pi,pik->pk", state, S)
    tau1 = S[:, 0, :] - mixed
    p11 = np.einsum("pk,pk->p", tau1, tau1)
    A = (m**2 * p11)[:, None, None]
    B = np.zeros((len(m), 1))
    taus, slabs, max_clip = _march(A, B, grid, outer_bc="dirichlet0")
    return PdeSolution(grid=grid, taus=taus, values=slabs, kind="simplex_Q",
                       max_clip=max_clip)


def proposition2_diagnostic(sol: PdeSolution, delta: float = 0.01,
                            eps_one: float = 1e-6) -> dict:
    """All-horizons propagation check on the solved slices.

    If the solution drops below 1 - delta anywhere in the interior at some
    slice, it should sit below 1 - eps_one at *every* interior node of every
    positive slice.  Truncation can break this near the edges, so a failure
    is reported as a warning flag, not an error.  Interior means one node in
    from every face.
    """
    n = sol.grid.n
    trim = tuple(slice(1, -1) for _ in range(n))
    interior = sol.values[(slice(None),) + trim]
    if len(sol.taus) < 2:
        return {"premise": False, "all_horizons_arbitrage": False,
                "violated": False, "max_interior_by_slice": []}
    pos = interior[1:]
    premise = bool(pos.min() < 1.0 - delta)
    per_slice_max = pos.reshape(pos.shape[0], -1).max(axis=1)
    all_arb = bool(np.all(per_slice_max < 1.0 - eps_one))
    return {
        "premise": premise,
        "all_horizons_arbitrage": all_arb,
        "violated": bool(premise and not all_arb),
        "max_interior_by_slice": [float(v) for v in per_slice_max],
        "min_interior": float(pos.min()),
    }
