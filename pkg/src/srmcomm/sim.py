"""Sampled-data simulation of the motor under digital position control.

The loop is: ideal sampler on the rotor angle, discrete controller producing a
torque request, commutation to squared currents, zero-order hold, and a
continuous double-integrator-with-friction plant integrated with fixed-step RK4.
Between samples the held currents meet a moving rotor, so the produced torque
``g(phi(t)) . u_k`` drifts away from the request; that drift is the torque
ripple the optimal commutation minimizes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .commutation import CommutationFunction
from .motor import TorqueGainModel

TWO_PI = 2.0 * math.pi
DIVERGENCE_LIMIT = 1e6  # rad

# Stock controller coefficients, and the same design with the rounded
# denominator restored to an exact integrator: z^2 - 1.0296 z + 0.0296 = (z - 1)(z - 0.0296).
STOCK_NUM = (6.72e5, -1.1e6, 4.51e5)
STOCK_DEN = (1.0, -1.03, 0.0296)
INTEGRATING_DEN = (1.0, -1.0296, 0.0296)


class InstabilityError(RuntimeError):
    pass


def wrap_relative(phi):
    """Relative angle phi - 2*pi*floor((phi + pi)/(2*pi)), in [-pi, pi)."""
    phi = np.asarray(phi, dtype=float)
    out = phi - TWO_PI * np.floor((phi + math.pi) / TWO_PI)
    # round-off in the subtraction can land exactly on +pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Plant:
    """Linear plant x' = A x + B T, y = C x; defaults realize 1/(s(s+1))."""

    A: tuple = ((0.0, 1.0), (0.0, -1.0))
    B: tuple = (0.0, 1.0)
    C: tuple = (1.0, 0.0)

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        if a.shape != (2, 2) or np.shape(self.B) != (2,) or np.shape(self.C) != (2,):
            raise ValueError("plant must be second order: A 2x2, B and C of length 2")

    def matrices(self):
        return np.asarray(self.A, float), np.asarray(self.B, float), np.asarray(self.C, float)


class DiscreteController:
    """Direct-form difference equation of C(z) = num(z)/den(z), both in powers of 1/z."""

    def __init__(self, num=STOCK_NUM, den=STOCK_DEN):
        num = [float(c) for c in num]
        den = [float(c) for c in den]
        if not den or den[0] == 0:
            raise ValueError("leading denominator coefficient must be nonzero")
        lead = den[0]
        self.num = [c / lead for c in num]
        self.den = [c / lead for c in den]
        self.reset()

    @classmethod
    def stock(cls):
        return cls(STOCK_NUM, STOCK_DEN)

    @classmethod
    def integrating(cls):
        return cls(STOCK_NUM, INTEGRATING_DEN)

    def reset(self):
        self._e = [0.0] * len(self.num)
        self._y = [0.0] * (len(self.den) - 1)

    def step(self, e_k: float) -> float:
        self._e = [float(e_k)] + self._e[:-1]
        y = sum(b * e for b, e in zip(self.num, self._e))
        y -= sum(a * v for a, v in zip(self.den[1:], self._y))
        if self._y:
            self._y = [y] + self._y[:-1]
        return y


def controller_step(controller: DiscreteController, e_k: float) -> float:
    return controller.step(e_k)


@dataclass(frozen=True)
class ReferenceProfile:
    """Constant acceleration over ``accel_teeth``, then constant velocity over ``const_teeth``."""

    velocity: float  # rad/s
    period: float  # tooth pitch, rad
    accel_teeth: float = 5.0
    const_teeth: float = 15.0

    def __post_init__(self):
        if not (self.velocity > 0 and self.period > 0):
            raise ValueError("velocity and tooth pitch must be positive")

    @classmethod
    def from_teeth_per_s(cls, teeth_per_s: float, period: float, **kw):
        return cls(teeth_per_s * period, period, **kw)

    @property
    def accel(self) -> float:
        return self.velocity ** 2 / (2.0 * self.accel_teeth * self.period)

    @property
    def t_accel(self) -> float:
        return 2.0 * self.accel_teeth * self.period / self.velocity

    @property
    def t_end(self) -> float:
        return self.t_accel + self.const_teeth * self.period / self.velocity

    def __call__(self, t: float):
        if t < 0:
            raise ValueError("reference time must be nonnegative")
        d_acc = self.accel_teeth * self.period
        if t < self.t_accel:
            return 0.5 * self.accel * t * t, self.accel * t
        if t < self.t_end:
            return d_acc + self.velocity * (t - self.t_accel), self.velocity
        return d_acc + self.const_teeth * self.period, 0.0


def reference(profile: ReferenceProfile, t: float):
    return profile(t)


class _HeldTorque:
    """g(phi) . u for fixed u, collapsed to one sine/cosine pair per harmonic order."""

    def __init__(self, model: TorqueGainModel):
        coil, order, amp, phase = model.series()
        self.n_teeth = float(model.n_teeth)
        self.orders = sorted(set(int(o) for o in order))
        self.sin_w = []  # per order: 3-vector weighting sin(o*n*phi)
        self.cos_w = []
        for o in self.orders:
            ws, wc = [0.0] * 3, [0.0] * 3
            for c, oo, a, ph in zip(coil, order, amp, phase):
                if oo == o:
                    ws[c] += a * math.cos(ph)
                    wc[c] += a * math.sin(ph)
            self.sin_w.append(ws)
            self.cos_w.append(wc)

    def coefficients(self, u):
        return [(o * self.n_teeth,
                 sum(w * x for w, x in zip(ws, u)),
                 sum(w * x for w, x in zip(wc, u)))
                for o, ws, wc in zip(self.orders, self.sin_w, self.cos_w)]


def _torque_fn(coeffs):
    if len(coeffs) == 1:
        (k, s, c), = coeffs
        return lambda phi: s * math.sin(k * phi) + c * math.cos(k * phi)
    return lambda phi: sum(s * math.sin(k * phi) + c * math.cos(k * phi) for k, s, c in coeffs)


def _shares(commutation: CommutationFunction, phi: float, tstar: float):
    if tstar >= 0:
        return [float(v) * tstar for v in commutation.eval_shares(phi)]
    return [float(v) * -tstar for v in commutation.eval_shares_neg(phi)]


@dataclass
class SimResult:
    """Substep and sample-instant series of one run plus the metric window."""

    ts: float
    m_sim: int
    period: float
    t: np.ndarray
    phi: np.ndarray  # displacement from the start angle
    r: np.ndarray
    torque: np.ndarray
    tstar: np.ndarray
    u: np.ndarray  # (n, 3), held values
    sample_phi: np.ndarray
    sample_r: np.ndarray
    sample_tstar: np.ndarray
    sample_torque: np.ndarray  # produced torque right after each sample
    sample_u: np.ndarray
    window: tuple = (0.0, 0.0)  # metric window [start, end] in s
    phi_start: float = 0.0
    profile: ReferenceProfile | None = None

    @property
    def e(self):
        return self.r - self.phi


def _rk4_interval(x1, x2, h, m, tq, a, b):
    """Advance ``m`` RK4 steps; returns final state and the per-step states."""
    (a11, a12), (a21, a22) = a
    b1, b2 = b
    p1, p2 = [], []
    for _ in range(m):
        t1 = tq(x1)
        k11, k12 = a11 * x1 + a12 * x2 + b1 * t1, a21 * x1 + a22 * x2 + b2 * t1
        y1, y2 = x1 + 0.5 * h * k11, x2 + 0.5 * h * k12
        t2 = tq(y1)
        k21, k22 = a11 * y1 + a12 * y2 + b1 * t2, a21 * y1 + a22 * y2 + b2 * t2
        y1, y2 = x1 + 0.5 * h * k21, x2 + 0.5 * h * k22
        t3 = tq(y1)
        k31, k32 = a11 * y1 + a12 * y2 + b1 * t3, a21 * y1 + a22 * y2 + b2 * t3
        y1, y2 = x1 + h * k31, x2 + h * k32
        t4 = tq(y1)
        k41, k42 = a11 * y1 + a12 * y2 + b1 * t4, a21 * y1 + a22 * y2 + b2 * t4
        x1 += h / 6.0 * (k11 + 2.0 * k21 + 2.0 * k31 + k41)
        x2 += h / 6.0 * (k12 + 2.0 * k22 + 2.0 * k32 + k42)
        p1.append(x1)
        p2.append(x2)
    return x1, x2, p1


def _simulate(model, commutation, n_samples, request, m_sim, ts, plant, phi_start, reference_fn,
              window=(0.0, 0.0), profile=None):
    """Shared sampled-data loop; ``request(k, phi_k, r_k)`` returns the torque request."""
    if m_sim < 1 or int(m_sim) != m_sim:
        raise ValueError("m_sim must be a positive integer")
    a, b, c = plant.matrices()
    if c[1] != 0 or c[0] != 1:
        raise ValueError("the rotor angle must be the first state")
    a = tuple(tuple(float(v) for v in row) for row in a)
    b = tuple(float(v) for v in b)
    held = _HeldTorque(model)
    h = ts / m_sim
    x1 = x2 = 0.0
    phis = [0.0]
    s_phi, s_r, s_tstar, s_torque, s_u = [], [], [], [], []
    for k in range(n_samples):
        rk = reference_fn(k * ts)
        tstar = request(k, x1, rk)
        u = _shares(commutation, phi_start + x1, tstar)
        tq = _torque_fn(held.coefficients(u))
        # the integrator works on the displacement; shift into absolute angle for g
        shifted = (lambda f: (lambda y: f(phi_start + y)))(tq)
        s_phi.append(x1)
        s_r.append(rk)
        s_tstar.append(tstar)
        s_torque.append(shifted(x1))
        s_u.append(u)
        x1, x2, p1 = _rk4_interval(x1, x2, h, m_sim, shifted, a, b)
        if not (abs(x1) <= DIVERGENCE_LIMIT and math.isfinite(x2)):
            raise InstabilityError(f"rotor angle diverged at sample {k} (|phi| > {DIVERGENCE_LIMIT:g} rad)")
        phis.extend(p1)

    n = n_samples * m_sim + 1
    t = np.arange(n) * h
    phi = np.array(phis)
    k_of = np.minimum(np.arange(n) // m_sim, n_samples - 1)
    s_u = np.array(s_u, dtype=float).reshape(n_samples, 3)
    s_tstar = np.array(s_tstar)
    u = s_u[k_of]
    g = model.eval_g(phi_start + phi)
    torque = np.sum(g * u, axis=-1)
    r = np.array([reference_fn(ti) for ti in t])
    return SimResult(ts, int(m_sim), model.period, t, phi, r, torque, s_tstar[k_of], u,
                     np.array(s_phi), np.array(s_r), s_tstar, np.array(s_torque), s_u,
                     window=window, phi_start=phi_start, profile=profile)


def default_start_angle(model: TorqueGainModel, theta0: float = -math.pi) -> float:
    """Rotor angle aligned with the first optimization grid point."""
    return theta0 / model.n_teeth


def run_closed_loop(model: TorqueGainModel, commutation: CommutationFunction,
                    controller: DiscreteController, profile: ReferenceProfile,
                    m_sim: int = 20, ts: float = 1e-3, plant: Plant | None = None,
                    phi_start: float | None = None) -> SimResult:
    """Closed-loop run over the whole reference profile.

    The rotor starts at rest at ``phi_start`` (default: aligned with grid angle
    theta_0); positions in the result are displacements from it.
    """
    plant = Plant() if plant is None else plant
    phi_start = default_start_angle(model) if phi_start is None else phi_start
    controller.reset()
    n_samples = int(math.ceil(profile.t_end / ts - 1e-9))
    window = (profile.t_end - profile.period / profile.velocity, profile.t_end)
    ref = lambda t: profile(t)[0]
    return _simulate(model, commutation, n_samples,
                     lambda k, phi, r: controller.step(r - phi),
                     m_sim, ts, plant, phi_start, ref, window, profile)


def run_feedforward(model: TorqueGainModel, commutation: CommutationFunction, tstar,
                    m_sim: int = 20, ts: float = 1e-3, plant: Plant | None = None,
                    phi_start: float | None = None) -> SimResult:
    """Apply a fixed torque-request sequence without feedback."""
    plant = Plant() if plant is None else plant
    phi_start = default_start_angle(model) if phi_start is None else phi_start
    tstar = [float(v) for v in tstar]
    return _simulate(model, commutation, len(tstar), lambda k, phi, r: tstar[k],
                     m_sim, ts, plant, phi_start, lambda t: 0.0)


def open_loop_ripple(model: TorqueGainModel, commutation: CommutationFunction, v: float,
                     ts: float, m: int, n_samples: int = 150, target: float = 1.0,
                     phi_start: float | None = None):
    """Relative ripple sign*g(phi(t)) . f(phi(kT_s)) - 1 at constant velocity.

    Evaluated on the n_samples*m + 1 subsample grid t_i = i*T_s/m with
    k = i // m, so the last entry holds the start of the next sample.
    """
    phi_start = default_start_angle(model) if phi_start is None else phi_start
    if target not in (1.0, -1.0):
        raise ValueError("target must be +1 or -1")
    i = np.arange(n_samples * m + 1)
    k = i // m
    phi_t = phi_start + v * (i * (ts / m))
    phi_k = phi_start + v * (k * ts)
    shares = commutation.eval_shares(phi_k) if target > 0 else commutation.eval_shares_neg(phi_k)
    return target * np.sum(model.eval_g(phi_t) * shares, axis=-1) - 1.0


def _window_samples(t, y, t0, t1):
    """Samples of ``y`` on [t0, t1] with linearly interpolated endpoints."""
    inside = (t > t0) & (t < t1)
    tt = np.concatenate([[t0], t[inside], [t1]])
    yy = np.concatenate([[np.interp(t0, t, y)], y[inside], [np.interp(t1, t, y)]])
    return tt, yy


def window_rms(t, y, t0, t1) -> float:
    """Trapezoid RMS of ``y`` over [t0, t1]."""
    if not (t0 >= t[0] - 1e-12 and t1 <= t[-1] + 1e-12 and t1 > t0):
        raise ValueError("metric window not covered by the series")
    tt, yy = _window_samples(t, y, t0, t1)
    return math.sqrt(float(np.trapezoid(yy * yy, tt)) / (t1 - t0))


@dataclass
class Metrics:
    rms_error: float  # rad, over the metric window
    rms_torque_ripple: float  # Nm, over the metric window
    rel_ripple_norm: float  # ||T - T*||_2 / ||T*||_2 on window substeps
    energy: float  # sum_k ||u_k||_1 T_s over the whole run, A^2 s
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"rms_error": self.rms_error, "rms_torque_ripple": self.rms_torque_ripple,
                "rel_ripple_norm": self.rel_ripple_norm, "energy": self.energy, **self.extra}


def _error_rms(result: SimResult, t0, t1) -> float:
    """RMS position error over [t0, t1].

    The reference has a slope kink at the end of the profile, so the window
    endpoints use the exact reference minus the (smooth) interpolated angle
    instead of interpolating e itself.
    """
    if result.profile is None:
        return window_rms(result.t, result.e, t0, t1)
    tt, phi = _window_samples(result.t, result.phi, t0, t1)
    inside = (result.t > t0) & (result.t < t1)
    r = np.concatenate([[result.profile(t0)[0]], result.r[inside], [result.profile(t1)[0]]])
    e = r - phi
    return math.sqrt(float(np.trapezoid(e * e, tt)) / (t1 - t0))


def metrics(result: SimResult) -> Metrics:
    t0, t1 = result.window
    if len(result.t) < 2 or t1 - t0 <= 0 or t1 > result.t[-1] + 1e-12 or t0 < result.t[0] - 1e-12:
        raise ValueError("series shorter than one tooth of constant velocity")
    et = result.torque - result.tstar
    inside = (result.t >= t0) & (result.t <= t1)
    ref_norm = float(np.linalg.norm(result.tstar[inside]))
    rel = float(np.linalg.norm(et[inside])) / ref_norm if ref_norm > 0 else 0.0
    return Metrics(_error_rms(result, t0, t1),
                   window_rms(result.t, et, t0, t1),
                   rel,
                   float(np.sum(np.abs(result.sample_u)) * result.ts))


def write_result_csv(result: SimResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "r", "phi", "e", "Tstar", "T", "u1", "u2", "u3"])
        for row in zip(result.t, result.r, result.phi, result.e, result.tstar, result.torque,
                       *result.u.T):
            w.writerow([format(float(v), ".17g") for v in row])


def format_metrics(m: Metrics) -> str:
    return "".join(f"{k} = {v:.17g}\n" for k, v in m.as_dict().items())
