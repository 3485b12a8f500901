"""Market models: coefficient bundles and derived drift/deflator quantities.

A model is a bundle of local rate and volatility functions ``b_i(x)``,
``s_ik(x)`` on the open orthant, together with the potential ``H`` whose
gradient reproduces the drift through the covariance (the gradient-drift
consistency ``a(x) . grad H(x) = x-scaled rates``), and the killing rate
``k(x)`` entering the deflator exponential.

Derived quantities follow the scaled ("capitalization") convention:

    frak_b_i(x) = x_i b_i(x)          drift of the capitalization process
    frak_s_ik(x) = x_i s_ik(x)        volatility of the capitalization process
    frak_a_ij(x) = x_i x_j a_ij(x)    its covariance, a_ij = sum_k s_ik s_jk
    bhat_i(x) = sum_j frak_a_ij(x) / (x_1 + ... + x_n)   auxiliary drift

All coefficient callables are *batched*: they accept arrays of shape
``(..., n)`` and broadcast over leading axes.  This is what makes the path
engines fast, so custom models must follow the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    ExtensionUnavailable,
    ModelValidationError,
    NonPositiveState,
    ParamInvalid,
    SingularVolatility,
)

DET_FLOOR = 1e-12          # scale-free near-singularity threshold
KILL_RATE_FLOOR = -1e-9    # k(x) below this aborts model validation
_FD_STEP = 1e-5            # base step for numeric gradients


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Immutable bundle of model coefficient functions.

    ``rate_fn`` and ``vol_fn`` are the local rates b_i and volatilities s_ik
    on the open orthant.  ``frak_rate_fn`` / ``frak_vol_fn``, when given, are
    the continuous extensions of x_i b_i and x_i s_ik to the closed orthant;
    they are required for boundary (Fichera) evaluations.  ``grad_H`` is the
    analytic gradient of the potential when available; otherwise central
    differences are used.
    """

    name: str
    n: int
    rate_fn: Callable[[np.ndarray], np.ndarray]
    vol_fn: Callable[[np.ndarray], np.ndarray]
    deflator_H: Callable[[np.ndarray], np.ndarray]
    deflator_k: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    grad_H: Optional[Callable[[np.ndarray], np.ndarray]] = None
    frak_rate_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    frak_vol_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    frak_cov_div_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    weight_form: bool = False          # coefficients depend on weights only
    open_orthant_only: bool = False    # no continuous extension to the faces

    # -- scaled coefficients ------------------------------------------------

    def frak_drift(self, x: np.ndarray) -> np.ndarray:
        if self.frak_rate_fn is not None:
            return self.frak_rate_fn(x)
        return x * self.rate_fn(x)

    def frak_vol(self, x: np.ndarray) -> np.ndarray:
        if self.frak_vol_fn is not None:
            return self.frak_vol_fn(x)
        return x[..., :, None] * self.vol_fn(x)

    def frak_cov(self, x: np.ndarray) -> np.ndarray:
        fs = self.frak_vol(x)
        return np.einsum("...ik,...jk->...ij", fs, fs)

    def aux_drift(self, x: np.ndarray) -> np.ndarray:
        total = x.sum(axis=-1)
        return self.frak_cov(x).sum(axis=-1) / total[..., None]

    def grad_H_at(self, x: np.ndarray) -> np.ndarray:
        if self.grad_H is not None:
            return self.grad_H(x)
        return _numeric_gradient(self.deflator_H, x)

    def frak_cov_div(self, x: np.ndarray) -> np.ndarray:
        """Row sums of the covariance divergence, sum_j D_j frak_a_ij."""
        if self.frak_cov_div_fn is not None:
            return self.frak_cov_div_fn(x)
        return _numeric_cov_divergence(self.frak_cov, x)

    def with_params(self, **kwargs) -> "ModelSpec":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Coefficients:
    frak_b: np.ndarray
    frak_s: np.ndarray
    frak_a: np.ndarray
    theta: np.ndarray


@dataclass(frozen=True)
class ConditionReport:
    """Sampled check of the two classical sufficient arbitrage conditions.

    ``h_entropy`` is the infimum over samples of the normalized excess-variance
    statistic powering the entropy portfolio; ``h_blend`` the geometric-mean
    statistic powering the equal-weight blend.  Horizon bounds are the
    corresponding sufficient horizons 2 log(n)/h and 2 n^(1-1/n)/h.
    """

    n: int
    n_samples: int
    horizon: float
    h_entropy: float
    h_blend: float
    entropy_holds: bool
    blend_holds: bool
    entropy_horizon_bound: float
    blend_horizon_bound: float
    entropy_horizon_sufficient: bool
    blend_horizon_sufficient: bool
    h_entropy_samples: np.ndarray = field(repr=False, default=None)
    h_blend_samples: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_samples": self.n_samples,
            "horizon": self.horizon,
            "h_entropy": self.h_entropy,
            "h_blend": self.h_blend,
            "entropy_holds": self.entropy_holds,
            "blend_holds": self.blend_holds,
            "entropy_horizon_bound": self.entropy_horizon_bound,
            "blend_horizon_bound": self.blend_horizon_bound,
            "entropy_horizon_sufficient": self.entropy_horizon_sufficient,
            "blend_horizon_sufficient": self.blend_horizon_sufficient,
        }


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def _as_state(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != n:
        raise NonPositiveState(f"state has {x.shape[-1]} coordinates, model has {n}")
    return x

def require_open_orthant(x, n: int) -> np.ndarray:
    x = _as_state(x, n)
    if not np.all(x > 0.0):
        raise NonPositiveState(f"state must be strictly positive, got {x}")
    return x


def _require_nonnegative(x, n: int) -> np.ndarray:
    x = _as_state(x, n)
    if not np.all(x >= 0.0):
        raise NonPositiveState(f"state must be nonnegative, got {x}")
    return x


def _check_det_floor(s: np.ndarray) -> None:
    det = np.abs(np.linalg.det(s))
    row_norms = np.linalg.norm(s, axis=-1)
    floor = DET_FLOOR * np.prod(row_norms, axis=-1)
    if np.any(det < floor):
        raise SingularVolatility(
            f"volatility determinant {det} below scale-free floor {floor}"
        )


def _numeric_gradient(f: Callable, x: np.ndarray) -> np.ndarray:
    """Central differences, switching to second-order one-sided inward
    stencils where a central step would leave the open orthant."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.shape[-1]):
        h = np.maximum(_FD_STEP, _FD_STEP * np.abs(x[..., i]))
        interior = x[..., i] - h > 0.0
        hp = np.zeros_like(x)
        hp[..., i] = h
        f_p = f(x + hp)
        f_m = f(np.where(interior[..., None], x - hp, x))
        central = (f_p - f_m) / (2.0 * h)
        f_0 = f(x)
        f_pp = f(x + 2.0 * hp)
        one_sided = (-3.0 * f_0 + 4.0 * f_p - f_pp) / (2.0 * h)
        grad[..., i] = np.where(interior, central, one_sided)
    return grad


def _numeric_cov_divergence(cov: Callable, x: np.ndarray) -> np.ndarray:
    """sum_j D_j frak_a_ij by the same inward-shifted differences."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    out = np.zeros(x.shape, dtype=np.float64)
    for j in range(n):
        h = np.maximum(_FD_STEP, _FD_STEP * np.abs(x[..., j]))
        interior = x[..., j] - h > 0.0
        hp = np.zeros_like(x)
        hp[..., j] = h
        a_p = cov(x + hp)
        a_m = cov(np.where(interior[..., None], x - hp, x))
        central = (a_p - a_m) / (2.0 * h)[..., None, None]
        a_0 = cov(x)
        a_pp = cov(x + 2.0 * hp)
        one_sided = (-3.0 * a_0 + 4.0 * a_p - a_pp) / (2.0 * h)[..., None, None]
        dja = np.where(interior[..., None, None], central, one_sided)
        out += dja[..., :, j]
    return out


# ---------------------------------------------------------------------------
# spec operations
# ---------------------------------------------------------------------------

def coefficients(model: ModelSpec, x) -> Coefficients:
    """Scaled drift/volatility/covariance and the market price of risk.

    theta is assembled as frak_s'(x) . grad H(x); for the built-in models the
    gradient is analytic.
    """
    x = require_open_orthant(x, model.n)
    s = model.vol_fn(x)
    _check_det_floor(s)
    frak_s = x[..., :, None] * s
    frak_b = model.frak_drift(x)
    frak_a = np.einsum("...ik,...jk->...ij", frak_s, frak_s)
    theta = np.einsum("...ik,...i->...k", frak_s, model.grad_H_at(x))
    return Coefficients(frak_b=frak_b, frak_s=frak_s, frak_a=frak_a, theta=theta)


def auxiliary_drift(model: ModelSpec, x) -> np.ndarray:
    """Drift of the auxiliary diffusion: covariance row sums over total
    capitalization, x_i sum_j x_j a_ij(x) / (x_1 + ... + x_n)."""
    x = _require_nonnegative(x, model.n) if not model.open_orthant_only \
        else require_open_orthant(x, model.n)
    total = x.sum(axis=-1)
    if np.any(total <= 0.0):
        raise NonPositiveState("total capitalization must be positive")
    return model.aux_drift(x)


def fichera_drifts(model: ModelSpec, x) -> dict:
    """Boundary drifts of the market and auxiliary diffusions.

    f_i = frak_b_i - (1/2) sum_j D_j frak_a_ij, and f_hat_i with the
    auxiliary drift in place of frak_b_i.  Their sign on a face {x_i = 0}
    decides whether the respective diffusion can attain that face.
    """
    if model.open_orthant_only:
        raise ExtensionUnavailable(
            f"model {model.name!r} does not extend to the orthant boundary"
        )
    x = _require_nonnegative(x, model.n)
    div = model.frak_cov_div(x)
    f = model.frak_drift(x) - 0.5 * div
    total = x.sum(axis=-1)
    if np.any(total <= 0.0):
        # all terms vanish continuously at the origin
        f_hat = np.zeros_like(f)
        safe = np.where(total > 0.0, total, 1.0)
        bhat = model.frak_cov(x).sum(axis=-1) / safe[..., None]
        f_hat = np.where((total > 0.0)[..., None], bhat - 0.5 * div, 0.0)
    else:
        f_hat = model.aux_drift(x) - 0.5 * div
    return {"f": f, "f_hat": f_hat}


def deflator_terms(model: ModelSpec, x) -> dict:
    """Potential, killing rate and the deflator normalizer
    g(x) = exp(-H(x)) * (x_1 + ... + x_n)."""
    x = require_open_orthant(x, model.n)
    H = model.deflator_H(x)
    k = model.deflator_k(x)
    if np.any(np.asarray(k) < KILL_RATE_FLOOR):
        raise ModelValidationError(
            f"killing rate {np.min(k)} below floor {KILL_RATE_FLOOR}"
        )
    g = np.exp(-H) * x.sum(axis=-1)
    return {"H": H, "k": k, "g": g}


def check_arbitrage_conditions(model: ModelSpec, sample_points, horizon_T: float) -> ConditionReport:
    """Evaluate both classical sufficient conditions at the sample points.

    Reports the infimum h for each condition, whether it is positive across
    all samples, and the implied sufficient horizons compared to horizon_T.
    """
    pts = np.asarray(sample_points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.size == 0:
        raise ParamInvalid("sample_points must be nonempty")
    pts = require_open_orthant(pts, model.n)
    if horizon_T <= 0:
        raise ParamInvalid("horizon_T must be positive")

    s = model.vol_fn(pts)
    a = np.einsum("...ik,...jk->...ij", s, s)
    total = pts.sum(axis=-1)
    diag = np.einsum("...ii->...i", a)

    # excess-variance statistic, normalized by total capitalization squared
    lhs1 = total * np.einsum("...i,...i->...", pts, diag) \
        - np.einsum("...i,...ij,...j->...", pts, a, pts)
    h1 = lhs1 / total**2

    # geometric-mean statistic, normalized by total capitalization
    n = model.n
    geo = np.exp(np.log(pts).mean(axis=-1))
    lhs2 = geo * (diag.sum(axis=-1) - a.sum(axis=(-1, -2)) / n)
    h2 = lhs2 / total

    h_entropy = float(h1.min())
    h_blend = float(h2.min())
    tol = 1e-12
    ent_holds = h_entropy > tol
    blend_holds = h_blend > tol
    ent_bound = 2.0 * np.log(n) / h_entropy if ent_holds else np.inf
    blend_bound = 2.0 * n ** (1.0 - 1.0 / n) / h_blend if blend_holds else np.inf
    return ConditionReport(
        n=n,
        n_samples=pts.shape[0],
        horizon=float(horizon_T),
        h_entropy=h_entropy,
        h_blend=h_blend,
        entropy_holds=ent_holds,
        blend_holds=blend_holds,
        entropy_horizon_bound=float(ent_bound),
        blend_horizon_bound=float(blend_bound),
        entropy_horizon_sufficient=bool(ent_holds and horizon_T > ent_bound),
        blend_horizon_sufficient=bool(blend_holds and horizon_T > blend_bound),
        h_entropy_samples=h1,
        h_blend_samples=h2,
    )


def validate_model(model: ModelSpec, points, tol_residual: float = 1e-6) -> dict:
    """Spot-check the structural requirements at sampled orthant points.

    Checks the determinant floor, the killing-rate floor, and the relative
    residual of the gradient-drift consistency a(x) grad H = scaled rates.
    Reports; does not certify smoothness assumptions.
    """
    pts = require_open_orthant(np.asarray(points, dtype=np.float64), model.n)
    co = coefficients(model, pts)
    resid = np.einsum("...ij,...j->...i", co.frak_a, model.grad_H_at(pts)) - co.frak_b
    rel = np.linalg.norm(resid, axis=-1) / (1.0 + np.linalg.norm(co.frak_b, axis=-1))
    k = np.asarray(model.deflator_k(pts))
    eigs = np.linalg.eigvalsh(co.frak_a)
    report = {
        "n_points": int(pts.shape[0]),
        "max_gradient_drift_residual": float(rel.max()),
        "gradient_drift_ok": bool(rel.max() < tol_residual),
        "min_killing_rate": float(k.min()),
        "killing_rate_ok": bool(k.min() >= KILL_RATE_FLOOR),
        "min_cov_eigenvalue": float(eigs.min()),
        "cov_psd_ok": bool(eigs.min() >= -1e-10),
    }
    if k.min() < KILL_RATE_FLOOR:
        raise ModelValidationError(
            f"killing rate {k.min()} below floor {KILL_RATE_FLOOR} "
            f"for model {model.name!r}"
        )
    return report


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------

def bessel3() -> ModelSpec:
    """Single asset with rate 1/x^2 and volatility 1/x.

    The capitalization then solves dX = (1/X) dt + dW: a Bessel process in
    dimension three.  The potential is H(x) = log x with zero killing rate,
    so the deflator is 1/X and the deflated capitalization is constant along
    paths.  The auxiliary diffusion coincides with the market diffusion.
    """
    def rate(x):
        return 1.0 / x**2

    def vol(x):
        return (1.0 / x)[..., :, None]

    def H(x):
        return np.log(x[..., 0])

    def grad_H(x):
        return 1.0 / x

    def k(x):
        return np.zeros(x.shape[:-1])

    def frak_rate(x):
        return 1.0 / x

    def frak_vol(x):
        return np.ones(x.shape + (1,))

    return ModelSpec(
        name="bessel3",
        n=1,
        rate_fn=rate,
        vol_fn=vol,
        deflator_H=H,
        deflator_k=k,
        grad_H=grad_H,
        frak_rate_fn=frak_rate,
        frak_vol_fn=frak_vol,
        open_orthant_only=True,
    )


def volatility_stabilized(n: int = 2, zeta: float = 1.0) -> ModelSpec:
    """Volatility-stabilized market: rates (1+zeta)/(2 mu_i) and volatilities
    mu_i^(-1/2), mu_i = x_i / (x_1 + ... + x_n).

    Scaled quantities: frak_b_i = kappa * total, frak_s = diag(sqrt(x_i *
    total)) with kappa = (1+zeta)/2.  H(x) = kappa * sum log x_i and
    k(x) = (1 - zeta^2) * total * sum_j 1/(8 x_j) >= 0 for zeta in [0, 1].
    """
    if not (0.0 <= zeta <= 1.0):
        raise ParamInvalid(f"zeta must be in [0, 1], got {zeta}")
    if n < 2:
        raise ParamInvalid(f"volatility-stabilized model needs n >= 2, got {n}")
    kappa = 0.5 * (1.0 + zeta)

    def rate(x):
        return kappa * x.sum(axis=-1)[..., None] / x

    def vol(x):
        total = x.sum(axis=-1)
        d = np.sqrt(total[..., None] / x)
        out = np.zeros(x.shape + (n,))
        idx = np.arange(n)
        out[..., idx, idx] = d
        return out

    def H(x):
        return kappa * np.log(x).sum(axis=-1)

    def grad_H(x):
        return kappa / x

    def k(x):
        total = x.sum(axis=-1)
        return (1.0 - zeta**2) * total * (1.0 / (8.0 * x)).sum(axis=-1)

    def frak_rate(x):
        return kappa * np.repeat(x.sum(axis=-1)[..., None], n, axis=-1)

    def frak_vol(x):
        total = x.sum(axis=-1)
        d = np.sqrt(x * total[..., None])
        out = np.zeros(x.shape + (n,))
        idx = np.arange(n)
        out[..., idx, idx] = d
        return out

    def cov_div(x):
        # frak_a = diag(x_i * total): sum_j D_j frak_a_ij = total + x_i
        return x.sum(axis=-1)[..., None] + x

    return ModelSpec(
        name="volstab",
        n=n,
        rate_fn=rate,
        vol_fn=vol,
        deflator_H=H,
        deflator_k=k,
        params={"zeta": float(zeta), "kappa": kappa},
        grad_H=grad_H,
        frak_rate_fn=frak_rate,
        frak_vol_fn=frak_vol,
        frak_cov_div_fn=cov_div,
        weight_form=True,
    )


def constant_coefficient(name: str, b, sigma, H_linear=None) -> ModelSpec:
    """Constant-rate, constant-volatility model.

    The potential is H(x) = sum_j c_j log x_j with c = a^{-1} b (or the
    supplied ``H_linear`` coefficients), which makes the killing rate the
    constant (sum_i a_ii c_i - c' a c) / 2.  A killing rate below the floor
    rejects the model at construction.
    """
    b = np.asarray(b, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    n = b.shape[0]
    if sigma.shape != (n, n):
        raise ParamInvalid(f"sigma must be {n}x{n}, got {sigma.shape}")
    _check_det_floor(sigma)
    a = sigma @ sigma.T
    c = np.asarray(H_linear, dtype=np.float64) if H_linear is not None \
        else np.linalg.solve(a, b)
    if c.shape != (n,):
        raise ParamInvalid(f"H_linear must have {n} entries")
    k_const = 0.5 * float(np.sum(np.diag(a) * c) - c @ a @ c)
    if k_const < KILL_RATE_FLOOR:
        raise ModelValidationError(
            f"constant killing rate {k_const} < {KILL_RATE_FLOOR}; "
            "the deflator estimators require a killing rate bounded below by 0"
        )
    k_const = max(k_const, 0.0)

    def rate(x):
        return np.broadcast_to(b, x.shape).copy()

    def vol(x):
        return np.broadcast_to(sigma, x.shape + (n,)).copy()

    def H(x):
        return np.log(x) @ c

    def grad_H(x):
        return c / x

    def k(x):
        return np.full(x.shape[:-1], k_const)

    return ModelSpec(
        name=name,
        n=n,
        rate_fn=rate,
        vol_fn=vol,
        deflator_H=H,
        deflator_k=k,
        params={"k_const": k_const, "H_linear": tuple(float(v) for v in c)},
        grad_H=grad_H,
        weight_form=True,
    )


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "zeta": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "b": {"type": "array", "items": {"type": "number"}},
        "sigma": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}},
        },
        "H_linear": {"type": "array", "items": {"type": "number"}},
    },
}


def from_config(cfg: dict) -> ModelSpec:
    """Build a model from a config mapping.

    ``{"name": "bessel3"}`` and ``{"name": "volstab", "n": ..., "zeta": ...}``
    select the built-ins; any other name requires constant coefficients
    ``b`` (n reals) and ``sigma`` (n x n), with optional ``H_linear``.
    """
    import jsonschema

    try:
        jsonschema.validate(cfg, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ParamInvalid(f"invalid model config: {exc.message}") from exc
    name = cfg["name"]
    if name == "bessel3":
        return bessel3()
    if name == "volstab":
        return volatility_stabilized(n=cfg.get("n", 2), zeta=cfg.get("zeta", 1.0))
    if "b" not in cfg or "sigma" not in cfg:
        raise ParamInvalid(
            f"model {name!r} is not built in; constant-coefficient configs "
            "need 'b' and 'sigma'"
        )
    b = cfg["b"]
    sigma = cfg["sigma"]
    if "n" in cfg and cfg["n"] != len(b):
        raise ParamInvalid("config 'n' disagrees with len(b)")
    return constant_coefficient(name, b, sigma, H_linear=cfg.get("H_linear"))
