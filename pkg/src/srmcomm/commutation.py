"""Commutation functions: rotor angle and torque request -> squared coil currents.

A commutation function holds two nonnegative share functions, one producing
+1 Nm and one producing -1 Nm at each angle. A request ``T*`` is served with
``shares(phi) * T*`` when ``T* >= 0`` and ``shares_neg(phi) * |T*|`` otherwise,
so squared currents stay nonnegative for both torque signs.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .motor import TorqueGainModel

TSF_KINDS = ("sine", "cubic", "linear")
TWO_PI = 2.0 * math.pi


class CommutationFunction(ABC):
    """Interface shared by every commutation strategy.

    Angles are mechanical (rad); returned shares have units A^2/Nm and a
    trailing axis of length 3.
    """

    period: float

    @abstractmethod
    def eval_shares(self, phi):
        ...

    @abstractmethod
    def eval_shares_neg(self, phi):
        ...


def commute(f: CommutationFunction, phi, tstar):
    """Squared currents u for torque request ``tstar`` at angle ``phi``."""
    tstar = np.asarray(tstar, dtype=float)
    pos = f.eval_shares(phi) * np.maximum(tstar, 0.0)[..., None]
    neg = f.eval_shares_neg(phi) * np.maximum(-tstar, 0.0)[..., None]
    return pos + neg


def tsf_rise(kind: str, x):
    """Rising edge of a torque sharing function on [0, 1]."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)) or np.any(np.isnan(x)):
        raise ValueError("tsf_rise argument must lie in [0, 1]")
    if kind == "sine":
        return 0.5 - 0.5 * np.cos(np.pi * x)
    if kind == "cubic":
        return x * x * (3.0 - 2.0 * x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown TSF kind {kind!r}; expected one of {TSF_KINDS}")


def saturate(x, a: float):
    """Clamp ``x`` to [-a, a]."""
    if not a > 0:
        raise ValueError("saturation level must be positive")
    return np.clip(x, -a, a)


def _wrap_pi(x):
    return x - TWO_PI * np.floor((x + np.pi) / TWO_PI)


def _extremum_angle(model: TorqueGainModel, coil: int, sign: float, n_probe: int = 4096) -> float:
    """Electrical angle where ``sign * g_coil`` is maximal."""
    theta = np.arange(n_probe) * (TWO_PI / n_probe)
    vals = sign * model.eval_electrical(theta)[:, coil]
    i = int(np.argmax(vals))
    h = TWO_PI / n_probe
    res = minimize_scalar(lambda t: -sign * float(model.eval_electrical(t)[coil]),
                          bounds=(theta[i] - h, theta[i] + h), method="bounded",
                          options={"xatol": 1e-12})
    return float(res.x)


@dataclass(frozen=True)
class ConventionalTsf(CommutationFunction):
    """Torque-sharing-function commutation with saturated inverse gain.

    Coil 1's conduction window is centred on the peak of ``g_1`` (trough for
    negative torque); coils 2 and 3 use the same window shifted by 2*pi/3 and
    4*pi/3 electrical, so the three shares always sum to one. Each window is
    ``2*pi/3 + overlap`` wide, with ``overlap``-long rising and falling edges.
    """

    model: TorqueGainModel
    kind: str = "sine"
    overlap: float = math.pi / 6  # electrical rad
    saturation: float = 3.0  # A^2/Nm
    center: float = field(init=False)
    center_neg: float = field(init=False)

    def __post_init__(self):
        if self.kind not in TSF_KINDS:
            raise ValueError(f"unknown TSF kind {self.kind!r}; expected one of {TSF_KINDS}")
        if not 0 < self.overlap < TWO_PI / 3:
            raise ValueError("overlap must lie in (0, 2*pi/3) electrical rad")
        if not self.saturation > 0:
            raise ValueError("saturation level must be positive")
        object.__setattr__(self, "center", _extremum_angle(self.model, 0, 1.0))
        object.__setattr__(self, "center_neg", _extremum_angle(self.model, 0, -1.0))

    @property
    def period(self) -> float:
        return self.model.period

    def _window(self, theta, center):
        """Shares of the three coils for windows anchored at ``center``."""
        theta = np.asarray(theta, dtype=float)
        offsets = np.arange(3) * (TWO_PI / 3)
        d = np.abs(_wrap_pi(theta[..., None] - center - offsets))
        half_plateau = 0.5 * (TWO_PI / 3 - self.overlap)
        x = np.clip((half_plateau + self.overlap - d) / self.overlap, 0.0, 1.0)
        return tsf_rise(self.kind, x)

    def tsf_share(self, theta, coil: int):
        return self._window(theta, self.center)[..., coil]

    def eval_shares(self, phi):
        phi = np.asarray(phi, dtype=float)
        theta = self.model.n_teeth * phi
        g = self.model.eval_electrical(theta)
        with np.errstate(divide="ignore", over="ignore"):
            inv = saturate(1.0 / g, self.saturation)
        return np.maximum(self._window(theta, self.center) * inv, 0.0)

    def eval_shares_neg(self, phi):
        phi = np.asarray(phi, dtype=float)
        theta = self.model.n_teeth * phi
        g = self.model.eval_electrical(theta)
        with np.errstate(divide="ignore", over="ignore"):
            inv = saturate(-1.0 / g, self.saturation)
        return np.maximum(self._window(theta, self.center_neg) * inv, 0.0)


def eval_tsf_share(tsf: ConventionalTsf, theta, coil: int):
    """Share of ``coil`` (0-based) at electrical angle ``theta``, in [0, 1]."""
    return tsf.tsf_share(theta, coil)


def eval_conventional(tsf: ConventionalTsf, phi):
    return tsf.eval_shares(phi)


@dataclass(frozen=True)
class CommutationTable:
    """Optimal shares on a uniform electrical-angle grid covering one period."""

    theta: np.ndarray  # (N,) electrical rad, uniform, increasing
    values: np.ndarray  # (N, 3) A^2/Nm
    values_neg: np.ndarray | None = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if theta.ndim != 1 or len(theta) < 2:
            raise ValueError("table needs at least two grid angles")
        if values.shape != (len(theta), 3):
            raise ValueError(f"values must have shape ({len(theta)}, 3)")
        step = TWO_PI / len(theta)
        if np.any(np.diff(theta) <= 0) or np.max(np.abs(np.diff(theta) - step)) > 1e-9:
            raise ValueError("grid must be uniform with spacing 2*pi/N")
        if np.any(values < 0):
            raise ValueError("table values must be nonnegative")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "values", values)
        if self.values_neg is not None:
            neg = np.asarray(self.values_neg, dtype=float)
            if neg.shape != values.shape or np.any(neg < 0):
                raise ValueError("negative-torque table must match shape and be nonnegative")
            object.__setattr__(self, "values_neg", neg)


class TableCommutation(CommutationFunction):
    """Periodic piecewise-linear interpolation of a :class:`CommutationTable`.

    Exact at the grid angles; used to check sampled-data behaviour against the
    optimizer and as a reference alongside the smooth GP fit.
    """

    def __init__(self, table: CommutationTable, n_teeth: int):
        self.table = table
        self.n_teeth = int(n_teeth)
        self.period = TWO_PI / self.n_teeth

    def _interp(self, values, phi):
        th = self.table.theta
        n = len(th)
        pos = (self.n_teeth * np.asarray(phi, dtype=float) - th[0]) * (n / TWO_PI)
        base = np.floor(pos)
        frac = pos - base
        # snap round-off next to a grid point so the grid value is returned exactly
        near = np.abs(frac - np.round(frac)) < 1e-9
        base = np.where(near, np.round(pos), base)
        frac = np.where(near, 0.0, frac)
        i0 = np.mod(base, n).astype(int)
        i1 = (i0 + 1) % n
        return values[i0] * (1.0 - frac)[..., None] + values[i1] * frac[..., None]

    def eval_shares(self, phi):
        return self._interp(self.table.values, phi)

    def eval_shares_neg(self, phi):
        if self.table.values_neg is None:
            raise ValueError("table has no negative-torque values")
        return self._interp(self.table.values_neg, phi)


class NormalizedCommutation(CommutationFunction):
    """Rescale another commutation so that g(phi) . f(phi) = +-1 wherever possible.

    Angles where the wrapped function produces no torque of the requested sign
    are passed through unchanged.
    """

    def __init__(self, base: CommutationFunction, model: TorqueGainModel):
        self.base = base
        self.model = model
        self.period = base.period

    def _scale(self, shares, phi, sign):
        gain = sign * np.sum(self.model.eval_g(phi) * shares, axis=-1)
        ok = gain > 1e-12
        scale = np.where(ok, 1.0 / np.where(ok, gain, 1.0), 1.0)
        return shares * scale[..., None]

    def eval_shares(self, phi):
        return self._scale(self.base.eval_shares(phi), phi, 1.0)

    def eval_shares_neg(self, phi):
        return self._scale(self.base.eval_shares_neg(phi), phi, -1.0)
