"""Torque-gain model of a three-phase switched reluctance motor.

Neglecting saturation, coil ``c`` produces a torque ``g_c(phi) * i_c**2`` where
``g_c = 0.5 dL_c/dphi``. Each ``g_c`` is stored as a harmonic series in the
electrical angle ``theta = n_teeth * phi``::

    g_c(phi) = sum_h  amplitude_h * sin(order_h * n_teeth * phi + phase_h)

so every term is exactly periodic in the tooth pitch ``p = 2*pi/n_teeth``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

N_COILS = 3
DEFAULT_G_MIN = 1e-3
PROBE_POINTS = 4096


class ModelError(ValueError):
    """Raised for malformed torque-gain models or model files."""


@dataclass(frozen=True)
class MotorGeometry:
    n_teeth: int

    def __post_init__(self):
        if isinstance(self.n_teeth, bool) or int(self.n_teeth) != self.n_teeth or self.n_teeth < 1:
            raise ModelError(f"n_teeth must be a positive integer, got {self.n_teeth!r}")
        object.__setattr__(self, "n_teeth", int(self.n_teeth))

    @property
    def spatial_period(self) -> float:
        """Tooth pitch p = 2*pi/n_teeth (rad)."""
        return 2.0 * math.pi / self.n_teeth


@dataclass(frozen=True)
class Harmonic:
    order: int
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if isinstance(self.order, bool) or int(self.order) != self.order or self.order < 1:
            raise ModelError(f"harmonic order must be a positive integer, got {self.order!r}")
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "amplitude", float(self.amplitude))
        object.__setattr__(self, "phase", float(self.phase))


@dataclass(frozen=True)
class TorqueGainModel:
    """Per-coil torque per squared current, g_c(phi) in Nm/A^2."""

    geometry: MotorGeometry
    coils: tuple  # three tuples of Harmonic
    _orders: np.ndarray = field(init=False, repr=False, compare=False)
    _amps: np.ndarray = field(init=False, repr=False, compare=False)
    _phases: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        coils = tuple(tuple(h if isinstance(h, Harmonic) else Harmonic(*h) for h in c) for c in self.coils)
        if len(coils) != N_COILS:
            raise ModelError(f"expected {N_COILS} coils, got {len(coils)}")
        object.__setattr__(self, "coils", coils)
        # pad to a dense (coil, term) layout so evaluation is one vectorized call
        width = max(1, max(len(c) for c in coils))
        orders = np.ones((N_COILS, width))
        amps = np.zeros((N_COILS, width))
        phases = np.zeros((N_COILS, width))
        for ci, c in enumerate(coils):
            for hi, h in enumerate(c):
                orders[ci, hi] = h.order
                amps[ci, hi] = h.amplitude
                phases[ci, hi] = h.phase
        object.__setattr__(self, "_orders", orders)
        object.__setattr__(self, "_amps", amps)
        object.__setattr__(self, "_phases", phases)

    @property
    def n_teeth(self) -> int:
        return self.geometry.n_teeth

    @property
    def period(self) -> float:
        return self.geometry.spatial_period

    def eval_electrical(self, theta):
        """g at electrical angle(s) ``theta``; returns shape ``theta.shape + (3,)``."""
        theta = np.asarray(theta, dtype=float)
        arg = theta[..., None, None] * self._orders + self._phases
        return np.sum(self._amps * np.sin(arg), axis=-1)

    def eval_g(self, phi):
        """[g_1(phi), g_2(phi), g_3(phi)] at mechanical angle(s) ``phi``."""
        return self.eval_electrical(self.n_teeth * np.asarray(phi, dtype=float))

    def torque(self, phi, u):
        """Rotor torque sum_c g_c(phi) u_c for squared currents ``u >= 0``."""
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise ValueError("squared currents must be nonnegative")
        return np.sum(self.eval_g(phi) * u, axis=-1)

    def series(self):
        """Flat (coil, order, amplitude, phase) arrays of all nonzero terms."""
        out = [(ci, h.order, h.amplitude, h.phase) for ci, c in enumerate(self.coils) for h in c]
        if not out:
            return (np.zeros(0, int),) * 2 + (np.zeros(0),) * 2
        ci, order, amp, ph = zip(*out)
        return np.array(ci), np.array(order), np.array(amp), np.array(ph)


def eval_g(model: TorqueGainModel, phi):
    return model.eval_g(phi)


def torque(model: TorqueGainModel, phi, u):
    return model.torque(phi, u)


@dataclass
class ValidationReport:
    passed: bool
    periodicity_residual: float
    positive_margin: float  # min over probe grid of max_c g_c
    negative_margin: float  # min over probe grid of -min_c g_c
    g_min: float
    failures: list = field(default_factory=list)


def validate_model(model: TorqueGainModel, g_min: float = DEFAULT_G_MIN,
                   n_probe: int = PROBE_POINTS) -> ValidationReport:
    """Check periodicity and that both torque signs are producible at every angle."""
    p = model.period
    phi = np.arange(n_probe) * (p / n_probe)
    g = model.eval_g(phi)
    resid = float(np.max(np.abs(g - model.eval_g(phi + p))))
    pos = float(np.min(np.max(g, axis=1)))
    neg = float(np.min(-np.min(g, axis=1)))
    failures = []
    if resid > 1e-12:
        failures.append(f"periodicity residual {resid:.3g} exceeds 1e-12")
    if pos < g_min:
        i = int(np.argmin(np.max(g, axis=1)))
        failures.append(f"positive torque coverage fails at phi={phi[i]:.6g} rad "
                        f"(max_c g_c = {pos:.3g} < {g_min:.3g})")
    if neg < g_min:
        i = int(np.argmin(-np.min(g, axis=1)))
        failures.append(f"negative torque coverage fails at phi={phi[i]:.6g} rad "
                        f"(min_c g_c = {-neg:.3g} > {-g_min:.3g})")
    return ValidationReport(not failures, resid, pos, neg, g_min, failures)


_MODEL_KEYS = {"n_teeth", "coils"}
_COIL_KEYS = {"harmonics"}
_HARMONIC_KEYS = {"order", "amplitude", "phase"}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ModelError(f"{where}: expected a mapping, got {type(obj).__name__}")
    unknown = set(obj) - allowed
    if unknown:
        raise ModelError(f"{where}: unknown field(s) {sorted(unknown)}")


def model_from_dict(data: dict) -> TorqueGainModel:
    _check_keys(data, _MODEL_KEYS, "model")
    if "n_teeth" not in data or "coils" not in data:
        raise ModelError("model: 'n_teeth' and 'coils' are required")
    coils = []
    for ci, coil in enumerate(data["coils"]):
        _check_keys(coil, _COIL_KEYS, f"coils[{ci}]")
        terms = []
        for hi, h in enumerate(coil.get("harmonics", [])):
            _check_keys(h, _HARMONIC_KEYS, f"coils[{ci}].harmonics[{hi}]")
            try:
                terms.append(Harmonic(h["order"], h["amplitude"], h.get("phase", 0.0)))
            except KeyError as exc:
                raise ModelError(f"coils[{ci}].harmonics[{hi}]: missing field {exc}") from None
        coils.append(tuple(terms))
    return TorqueGainModel(MotorGeometry(data["n_teeth"]), tuple(coils))


def model_to_dict(model: TorqueGainModel) -> dict:
    return {
        "n_teeth": model.n_teeth,
        "coils": [{"harmonics": [{"order": h.order, "amplitude": h.amplitude, "phase": h.phase}
                                 for h in c]} for c in model.coils],
    }


def load_model(path) -> TorqueGainModel:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return model_from_dict(data)


def default_model() -> TorqueGainModel:
    text = resources.files("srmcomm").joinpath("data/default_motor.yaml").read_text()
    return model_from_dict(yaml.safe_load(text))


def default_model_path() -> Path:
    return Path(str(resources.files("srmcomm").joinpath("data/default_motor.yaml")))
