"""Parametric finite-support triggering kernels.

Every kernel factorizes as g(dx, dy, dt) = h(dx, dy) * f(dt) with the spatial
factor supported on [-wx, wx] x [-wy, wy] and the temporal factor on [0, wt].
Both factors are normalized to unit mass over their truncated support, using
closed-form constants where available (error functions for truncated
Gaussians, the exponential tail mass, the Kumaraswamy CDF) and a fixed-order
Gauss-Legendre quadrature for the box-truncated inverse power law.

Parameter gradients include the derivative of the truncation constant, so
they are exact gradients of the normalized density.  At support edges the
gradient is the one-sided interior limit; outside the support both value and
gradient are identically zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm as _truncnorm

from .errors import ParameterError, ValidationError

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _norm_pdf(u):
    return np.exp(-0.5 * u * u) / _SQRT2PI


def _tn_mass(m, sigma, lo, hi):
    """Mass of N(m, sigma^2) on [lo, hi], plus the standardized endpoints."""
    a = (lo - m) / sigma
    b = (hi - m) / sigma
    return float(ndtr(b) - ndtr(a)), a, b


class _TruncNorm1D:
    """One-dimensional Gaussian restricted to [lo, hi], unit mass."""

    def __init__(self, m, sigma, lo, hi):
        if sigma <= 0:
            raise ParameterError(f"sigma must be > 0, got {sigma}")
        self.m, self.sigma, self.lo, self.hi = m, sigma, lo, hi
        self.z, self.a, self.b = _tn_mass(m, sigma, lo, hi)
        if self.z <= 0:
            raise ParameterError(
                f"truncated Gaussian has vanishing mass on [{lo}, {hi}] "
                f"(m={m}, sigma={sigma})"
            )
        self._pa = _norm_pdf(self.a)
        self._pb = _norm_pdf(self.b)

    def pdf(self, x):
        u = (x - self.m) / self.sigma
        return _norm_pdf(u) / (self.sigma * self.z)

    def dlog_dm(self, x):
        u = (x - self.m) / self.sigma
        return u / self.sigma + (self._pb - self._pa) / (self.sigma * self.z)

    def dlog_dsigma(self, x):
        u = (x - self.m) / self.sigma
        return (u * u - 1.0) / self.sigma + (
            self.b * self._pb - self.a * self._pa
        ) / (self.sigma * self.z)

    def sample(self, rng, n):
        return _truncnorm.rvs(
            self.a, self.b, loc=self.m, scale=self.sigma, size=n, random_state=rng
        )


@dataclass(frozen=True)
class GaussianSpatial:
    """Isotropic truncated Gaussian on the box [-wx, wx] x [-wy, wy]."""

    m1: float
    m2: float
    sigma: float
    wx: float
    wy: float

    name = "tg"
    param_names = ("m1", "m2", "sigma")

    def __post_init__(self):
        if self.wx <= 0 or self.wy <= 0:
            raise ParameterError("spatial support lengths must be > 0")
        object.__setattr__(self, "_tx", _TruncNorm1D(self.m1, self.sigma, -self.wx, self.wx))
        object.__setattr__(self, "_ty", _TruncNorm1D(self.m2, self.sigma, -self.wy, self.wy))

    @classmethod
    def default(cls, wx, wy):
        return cls(0.0, 0.0, wx / 4.0, wx, wy)

    @property
    def params(self):
        return np.array([self.m1, self.m2, self.sigma])

    def with_params(self, vec):
        return replace(self, m1=float(vec[0]), m2=float(vec[1]), sigma=float(vec[2]))

    def bounds(self):
        smin = 0.01 * min(self.wx, self.wy)
        smax = 2.0 * max(self.wx, self.wy)
        return [(-self.wx, self.wx), (-self.wy, self.wy), (smin, smax)]

    def _inside(self, dx, dy):
        return (np.abs(dx) <= self.wx) & (np.abs(dy) <= self.wy)

    def density(self, dx, dy):
        dx, dy = np.asarray(dx, float), np.asarray(dy, float)
        val = self._tx.pdf(dx) * self._ty.pdf(dy)
        return np.where(self._inside(dx, dy), val, 0.0)

    def param_grad(self, dx, dy):
        dx, dy = np.asarray(dx, float), np.asarray(dy, float)
        val = self.density(dx, dy)
        g1 = val * self._tx.dlog_dm(dx)
        g2 = val * self._ty.dlog_dm(dy)
        gs = val * (self._tx.dlog_dsigma(dx) + self._ty.dlog_dsigma(dy))
        return np.stack(np.broadcast_arrays(g1, g2, gs))

    def sample(self, rng, n):
        return np.column_stack([self._tx.sample(rng, n), self._ty.sample(rng, n)])


@lru_cache(maxsize=32)
def _gl_axis(order, half_width):
    x, w = np.polynomial.legendre.leggauss(order)
    return x * half_width, w * half_width


_POW_QUAD_ORDER = 96


@dataclass(frozen=True)
class PowerLawSpatial:
    """Inverse power law (1 + r^2/d)^(-3/2) truncated to the spatial box.

    The box normalization constant has no convenient closed form; it is
    integrated once per parameter set with tensorized Gauss-Legendre nodes,
    and its parameter derivatives are integrated the same way so param_grad
    stays an exact gradient of the normalized density.
    """

    m1: float
    m2: float
    d: float
    wx: float
    wy: float

    name = "pow"
    param_names = ("m1", "m2", "d")

    def __post_init__(self):
        if self.d <= 0:
            raise ParameterError(f"power-law scale d must be > 0, got {self.d}")
        if self.wx <= 0 or self.wy <= 0:
            raise ParameterError("spatial support lengths must be > 0")
        xs, wsx = _gl_axis(_POW_QUAD_ORDER, self.wx)
        ys, wsy = _gl_axis(_POW_QUAD_ORDER, self.wy)
        gx, gy = xs[:, None], ys[None, :]
        ww = wsx[:, None] * wsy[None, :]
        rho = self._rho(gx, gy)
        z = float(np.sum(ww * rho))
        dz = np.array(
            [
                float(np.sum(ww * g))
                for g in self._rho_grad_parts(gx, gy, rho)
            ]
        )
        object.__setattr__(self, "_z", z)
        object.__setattr__(self, "_dz", dz)

    @classmethod
    def default(cls, wx, wy):
        return cls(0.0, 0.0, 0.25 * wx * wy, wx, wy)

    @property
    def params(self):
        return np.array([self.m1, self.m2, self.d])

    def with_params(self, vec):
        return replace(self, m1=float(vec[0]), m2=float(vec[1]), d=float(vec[2]))

    def bounds(self):
        area = self.wx * self.wy
        return [(-self.wx, self.wx), (-self.wy, self.wy), (1e-3 * area, 20.0 * area)]

    def _r2(self, dx, dy):
        return (dx - self.m1) ** 2 + (dy - self.m2) ** 2

    def _rho(self, dx, dy):
        return (1.0 + self._r2(dx, dy) / self.d) ** (-1.5)

    def _rho_grad_parts(self, dx, dy, rho):
        base = (1.0 + self._r2(dx, dy) / self.d) ** (-2.5)
        g_m1 = 3.0 * (dx - self.m1) / self.d * base
        g_m2 = 3.0 * (dy - self.m2) / self.d * base
        g_d = 1.5 * self._r2(dx, dy) / self.d**2 * base
        return g_m1, g_m2, g_d

    def _inside(self, dx, dy):
        return (np.abs(dx) <= self.wx) & (np.abs(dy) <= self.wy)

    def density(self, dx, dy):
        dx, dy = np.asarray(dx, float), np.asarray(dy, float)
        return np.where(self._inside(dx, dy), self._rho(dx, dy) / self._z, 0.0)

    def param_grad(self, dx, dy):
        dx, dy = np.asarray(dx, float), np.asarray(dy, float)
        inside = self._inside(dx, dy)
        rho = self._rho(dx, dy)
        parts = self._rho_grad_parts(dx, dy, rho)
        dens = rho / self._z
        grads = [
            np.where(inside, p / self._z - dens * dz_p / self._z, 0.0)
            for p, dz_p in zip(parts, self._dz)
        ]
        return np.stack(np.broadcast_arrays(*grads))

    def sample(self, rng, n):
        # draw from the untruncated radial law (closed-form inverse CDF),
        # reject outside the box
        out = np.empty((n, 2))
        filled = 0
        for _ in range(10000):
            if filled >= n:
                break
            m = max(64, 2 * (n - filled))
            u = rng.random(m)
            r = np.sqrt(self.d * ((1.0 - u) ** -2 - 1.0))
            ang = 2.0 * math.pi * rng.random(m)
            cand = np.column_stack(
                [self.m1 + r * np.cos(ang), self.m2 + r * np.sin(ang)]
            )
            keep = cand[self._inside(cand[:, 0], cand[:, 1])]
            take = min(len(keep), n - filled)
            out[filled : filled + take] = keep[:take]
            filled += take
        if filled < n:
            raise ParameterError(
                "power-law rejection sampler starved; support box carries "
                "almost no mass for these parameters"
            )
        return out


@dataclass(frozen=True)
class GaussianTemporal:
    """Truncated Gaussian on [0, wt]."""

    mt: float
    sigma_t: float
    wt: float

    name = "tg"
    param_names = ("mt", "sigma_t")

    def __post_init__(self):
        if self.wt <= 0:
            raise ParameterError("temporal support length must be > 0")
        object.__setattr__(self, "_tn", _TruncNorm1D(self.mt, self.sigma_t, 0.0, self.wt))

    @classmethod
    def default(cls, wt):
        return cls(wt / 2.0, wt / 4.0, wt)

    @property
    def params(self):
        return np.array([self.mt, self.sigma_t])

    def with_params(self, vec):
        return replace(self, mt=float(vec[0]), sigma_t=float(vec[1]))

    def bounds(self):
        return [(0.0, self.wt), (0.01 * self.wt, 2.0 * self.wt)]

    def _inside(self, dt):
        return (dt >= 0.0) & (dt <= self.wt)

    def density(self, dt):
        dt = np.asarray(dt, float)
        return np.where(self._inside(dt), self._tn.pdf(dt), 0.0)

    def param_grad(self, dt):
        dt = np.asarray(dt, float)
        val = self.density(dt)
        return np.stack(
            np.broadcast_arrays(val * self._tn.dlog_dm(dt), val * self._tn.dlog_dsigma(dt))
        )

    def sample(self, rng, n):
        return self._tn.sample(rng, n)


@dataclass(frozen=True)
class ExponentialTemporal:
    """Exponential decay restricted to [0, wt], renormalized to unit mass."""

    decay: float
    wt: float

    name = "exp"
    param_names = ("decay",)

    def __post_init__(self):
        if self.decay <= 0:
            raise ParameterError(f"decay must be > 0, got {self.decay}")
        if self.wt <= 0:
            raise ParameterError("temporal support length must be > 0")

    @classmethod
    def default(cls, wt):
        return cls(2.0 / wt, wt)

    @property
    def params(self):
        return np.array([self.decay])

    def with_params(self, vec):
        return replace(self, decay=float(vec[0]))

    def bounds(self):
        return [(0.05 / self.wt, 30.0 / self.wt)]

    @property
    def _mass(self):
        return -math.expm1(-self.decay * self.wt)

    def _inside(self, dt):
        return (dt >= 0.0) & (dt <= self.wt)

    def density(self, dt):
        dt = np.asarray(dt, float)
        val = self.decay * np.exp(-self.decay * dt) / self._mass
        return np.where(self._inside(dt), val, 0.0)

    def param_grad(self, dt):
        dt = np.asarray(dt, float)
        val = self.density(dt)
        c = self._mass
        dlog = 1.0 / self.decay - dt - self.wt * math.exp(-self.decay * self.wt) / c
        return (val * dlog)[None]

    def sample(self, rng, n):
        u = rng.random(n)
        return -np.log1p(-u * self._mass) / self.decay


@dataclass(frozen=True)
class KumaraswamyTemporal:
    """Kumaraswamy density on [0, wt] (time rescaled by the support length)."""

    a: float
    b: float
    wt: float

    name = "kum"
    param_names = ("a", "b")

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ParameterError(f"Kumaraswamy needs a, b > 0, got a={self.a}, b={self.b}")
        if self.wt <= 0:
            raise ParameterError("temporal support length must be > 0")

    @classmethod
    def default(cls, wt):
        return cls(1.5, 1.5, wt)

    @property
    def params(self):
        return np.array([self.a, self.b])

    def with_params(self, vec):
        return replace(self, a=float(vec[0]), b=float(vec[1]))

    def bounds(self):
        # b is kept above 1 so the density stays finite at the support edge
        return [(0.2, 25.0), (1.05, 25.0)]

    def _inside(self, dt):
        return (dt >= 0.0) & (dt <= self.wt)

    def density(self, dt):
        dt = np.asarray(dt, float)
        s = np.clip(dt / self.wt, 0.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = (self.a * self.b / self.wt) * s ** (self.a - 1.0) * (
                1.0 - s**self.a
            ) ** (self.b - 1.0)
        val = np.where(np.isfinite(val), val, np.inf)
        return np.where(self._inside(dt), val, 0.0)

    def param_grad(self, dt):
        dt = np.asarray(dt, float)
        val = self.density(dt)
        s = np.clip(dt / self.wt, 0.0, 1.0)
        interior = (s > 0.0) & (s < 1.0) & (val > 0.0) & np.isfinite(val)
        s_safe = np.where(interior, s, 0.5)
        sa = s_safe**self.a
        log_s = np.log(s_safe)
        dlog_a = 1.0 / self.a + log_s - (self.b - 1.0) * sa * log_s / (1.0 - sa)
        dlog_b = 1.0 / self.b + np.log(1.0 - sa)
        ga = np.where(interior, val * dlog_a, 0.0)
        gb = np.where(interior, val * dlog_b, 0.0)
        return np.stack(np.broadcast_arrays(ga, gb))

    def sample(self, rng, n):
        u = rng.random(n)
        return self.wt * (1.0 - (1.0 - u) ** (1.0 / self.b)) ** (1.0 / self.a)


SPATIAL_FAMILIES = {"tg": GaussianSpatial, "pow": PowerLawSpatial}
TEMPORAL_FAMILIES = {"tg": GaussianTemporal, "exp": ExponentialTemporal, "kum": KumaraswamyTemporal}


@dataclass(frozen=True)
class KernelModel:
    """Space-time separable triggering kernel g = h(dx, dy) * f(dt)."""

    spatial: GaussianSpatial | PowerLawSpatial
    temporal: GaussianTemporal | ExponentialTemporal | KumaraswamyTemporal

    @property
    def supports(self):
        return (self.spatial.wx, self.spatial.wy, self.temporal.wt)

    @property
    def param_names(self):
        return self.spatial.param_names + self.temporal.param_names

    @property
    def params(self):
        return np.concatenate([self.spatial.params, self.temporal.params])

    @property
    def n_params(self):
        return len(self.param_names)

    def bounds(self):
        return self.spatial.bounds() + self.temporal.bounds()

    def with_params(self, vec):
        ns = len(self.spatial.param_names)
        return KernelModel(
            self.spatial.with_params(vec[:ns]), self.temporal.with_params(vec[ns:])
        )

    def evaluate(self, dx, dy, dt):
        return self.spatial.density(dx, dy) * self.temporal.density(dt)

    def param_grad(self, dx, dy, dt):
        h = self.spatial.density(dx, dy)
        f = self.temporal.density(dt)
        gs = self.spatial.param_grad(dx, dy) * f
        gt = h * self.temporal.param_grad(dt)
        shape = np.broadcast_shapes(gs.shape[1:], gt.shape[1:])
        return np.concatenate(
            [np.broadcast_to(gs, (gs.shape[0],) + shape), np.broadcast_to(gt, (gt.shape[0],) + shape)]
        )

    def sample_offset(self, rng, size=None):
        n = 1 if size is None else int(size)
        xy = self.spatial.sample(rng, n)
        t = self.temporal.sample(rng, n)
        out = np.column_stack([xy, t])
        return out[0] if size is None else out


def make_spatial(name, wx, wy, params=None):
    cls = SPATIAL_FAMILIES.get(name)
    if cls is None:
        raise ParameterError(f"unknown spatial family {name!r}; choose from {sorted(SPATIAL_FAMILIES)}")
    base = cls.default(wx, wy)
    if params:
        return replace(base, **params)
    return base


def make_temporal(name, wt, params=None):
    cls = TEMPORAL_FAMILIES.get(name)
    if cls is None:
        raise ParameterError(f"unknown temporal family {name!r}; choose from {sorted(TEMPORAL_FAMILIES)}")
    base = cls.default(wt)
    if params:
        return replace(base, **params)
    return base


def make_kernel(spatial_name, temporal_name, supports, params=None):
    """Build a kernel from family names; `params` overrides family defaults."""
    wx, wy, wt = supports
    params = dict(params or {})
    sp_cls = SPATIAL_FAMILIES.get(spatial_name)
    tm_cls = TEMPORAL_FAMILIES.get(temporal_name)
    if sp_cls is None:
        raise ParameterError(f"unknown spatial family {spatial_name!r}")
    if tm_cls is None:
        raise ParameterError(f"unknown temporal family {temporal_name!r}")
    sp_kwargs = {k: params[k] for k in sp_cls.param_names if k in params}
    tm_kwargs = {k: params[k] for k in tm_cls.param_names if k in params}
    extra = set(params) - set(sp_cls.param_names) - set(tm_cls.param_names)
    if extra:
        raise ParameterError(f"unknown kernel parameters: {sorted(extra)}")
    return KernelModel(
        make_spatial(spatial_name, wx, wy, sp_kwargs),
        make_temporal(temporal_name, wt, tm_kwargs),
    )


def _check_supports(kernel: KernelModel, grid) -> None:
    got = kernel.supports
    want = (grid.wx, grid.wy, grid.wt)
    if any(abs(a - b) > 1e-9 for a, b in zip(got, want)):
        raise ValidationError(f"kernel supports {got} do not match grid supports {want}")


def grid_offsets(grid):
    """Offset coordinates at which kernels are sampled on the lag grid.

    Spatial offsets are centered, (idx - center) * step for idx = 1..L;
    temporal offsets start at one step (no zero lag), idx * step.
    """
    xs = (np.arange(1, grid.klen_x + 1) - grid.kmid_x) * grid.dx
    ys = (np.arange(1, grid.klen_y + 1) - grid.kmid_y) * grid.dy
    ts = np.arange(1, grid.klen_t + 1) * grid.dt
    return xs, ys, ts


def eval_on_grid(kernel: KernelModel, grid) -> np.ndarray:
    """Sample the kernel on the lag grid; shape (klen_x, klen_y, klen_t)."""
    _check_supports(kernel, grid)
    xs, ys, ts = grid_offsets(grid)
    return kernel.evaluate(xs[:, None, None], ys[None, :, None], ts[None, None, :])


def eval_grad_on_grid(kernel: KernelModel, grid) -> np.ndarray:
    """Per-parameter kernel gradients on the lag grid; shape (P, klen_x, klen_y, klen_t)."""
    _check_supports(kernel, grid)
    xs, ys, ts = grid_offsets(grid)
    return kernel.param_grad(xs[:, None, None], ys[None, :, None], ts[None, None, :])
