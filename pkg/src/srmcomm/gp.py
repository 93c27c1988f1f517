"""Continuous periodic commutation functions by Gaussian process regression.

Each coil's optimal shares are interpolated with a Matern kernel evaluated on
angles warped onto the unit circle, ``x = [sin(2*pi*phi/p), cos(2*pi*phi/p)]``,
which makes every fitted function exactly p-periodic. Kernel hyperparameters
(length-scale, signal and noise variance) maximize the log marginal likelihood.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .commutation import CommutationFunction, CommutationTable

log = logging.getLogger(__name__)

FORMAT_TAG = "srmcomm-gp"
FORMAT_VERSION = 1
LOG_BOUNDS = (math.log(1e-10), math.log(1e10))
MU_CANDIDATES = (0, 1, 2, 3)
# predictions sum weights that cancel heavily (sum |k_i alpha_i| ~ 1e4 for
# near-noiseless targets), so they are accumulated in extended precision
_EXT = np.longdouble
_PI_EXT = _EXT("3.14159265358979323846264338327950288")


class IllConditionedError(np.linalg.LinAlgError):
    pass


class GpFormatError(ValueError):
    pass


class UnsupportedVersionError(GpFormatError):
    pass


@dataclass(frozen=True)
class MaternSpec:
    length_scale: float
    signal_variance: float
    mu: int = 3

    def __post_init__(self):
        if int(self.mu) != self.mu or self.mu < 0:
            raise ValueError("mu must be a nonnegative integer")
        if not (self.length_scale > 0 and self.signal_variance > 0):
            raise ValueError("length_scale and signal_variance must be positive")
        object.__setattr__(self, "mu", int(self.mu))


@dataclass(frozen=True)
class Hyperparams:
    mu: int
    length_scale: float
    signal_variance: float
    noise_variance: float

    @property
    def spec(self) -> MaternSpec:
        return MaternSpec(self.length_scale, self.signal_variance, self.mu)


def warp(phi, period: float):
    """Map angles onto the unit circle with period ``period``; shape (..., 2)."""
    if not period > 0:
        raise ValueError("period must be positive")
    a = (2.0 * math.pi / period) * np.asarray(phi, dtype=float)
    return np.stack([np.sin(a), np.cos(a)], axis=-1)


def _matern_coeffs(mu: int):
    """Polynomial coefficients as exact (numerator, denominator) pairs."""
    return [(math.factorial(mu) * math.factorial(mu + i),
             math.factorial(2 * mu) * math.factorial(i) * math.factorial(mu - i))
            for i in range(mu + 1)]


def matern_profile(rho, mu: int):
    """Unit-variance Matern-(mu + 1/2) correlation at scaled distance ``rho``.

    Evaluated in the floating type of ``rho`` (float64 unless extended).
    """
    rho = np.asarray(rho)
    rho = rho.astype(np.result_type(rho.dtype, np.float64), copy=False)
    ftype = rho.dtype.type
    s = np.sqrt(ftype(2 * mu + 1))
    z = 2 * s * rho
    poly = np.zeros_like(rho)
    for i, (num, den) in enumerate(_matern_coeffs(mu)):
        poly = poly + (ftype(num) / ftype(den)) * z ** (mu - i)
    return np.exp(-s * rho) * poly


def matern(x, xp, spec: MaternSpec):
    """Kernel value between warped points ``x`` and ``xp``."""
    rho = np.linalg.norm(np.asarray(x, float) - np.asarray(xp, float), axis=-1) / spec.length_scale
    return spec.signal_variance * matern_profile(rho, spec.mu)


def _warp_ext(phi, period: float):
    """warp in extended precision (see CoilGp.predict)."""
    a = (2 * _PI_EXT / _EXT(period)) * np.asarray(phi, dtype=_EXT)
    return np.stack([np.sin(a), np.cos(a)], axis=-1)


def _distances(xa, xb):
    d2 = np.sum((xa[:, None, :] - xb[None, :, :]) ** 2, axis=-1)
    return np.sqrt(d2)


def gram(angles, spec: MaternSpec, period: float):
    """Gramian of the warped Matern kernel over ``angles``."""
    x = warp(np.atleast_1d(angles), period)
    k = spec.signal_variance * matern_profile(_distances(x, x) / spec.length_scale, spec.mu)
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, spec.signal_variance)
    return k


def _factor(k, noise: float, signal_variance: float):
    """Cholesky factor of K + noise*I with jitter escalation on failure."""
    n = k.shape[0]
    jitter = 0.0
    while True:
        try:
            return scipy.linalg.cho_factor(k + (noise + jitter) * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-12 * signal_variance if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-6 * signal_variance * (1 + 1e-9):
                cond = np.linalg.cond(k + noise * np.eye(n))
                raise IllConditionedError(
                    f"kernel matrix not positive definite (condition estimate {cond:.3g})") from None


def fit_weights(targets, k, noise: float, signal_variance: float | None = None):
    """Weights alpha solving (K + noise*I) alpha = targets."""
    if not noise > 0:
        raise ValueError("noise variance must be positive")
    k = np.atleast_2d(np.asarray(k, dtype=float))
    sv = float(np.max(np.diag(k))) if signal_variance is None else signal_variance
    return scipy.linalg.cho_solve(_factor(k, noise, sv), np.asarray(targets, dtype=float))


def _log_marginal_from_gram(targets, k, noise, signal_variance):
    cf = _factor(k, noise, signal_variance)
    alpha = scipy.linalg.cho_solve(cf, targets)
    n = len(targets)
    return (-0.5 * float(targets @ alpha) - float(np.sum(np.log(np.diag(cf[0]))))
            - 0.5 * n * math.log(2.0 * math.pi))


def log_marginal(targets, angles, theta: Hyperparams, period: float) -> float:
    """Log marginal likelihood of ``targets`` at ``angles`` under ``theta``."""
    targets = np.asarray(targets, dtype=float)
    k = gram(angles, theta.spec, period)
    return _log_marginal_from_gram(targets, k, theta.noise_variance, theta.signal_variance)


DEFAULT_START_FACTORS = ((0.1, 1.0, 10.0), (0.1, 1.0, 10.0), (1e-6, 1e-4, 1e-2))


def start_grid(targets, angles, period: float, factors=DEFAULT_START_FACTORS):
    """Grid of (length-scale, signal variance, noise variance) starts.

    Length-scales are multiples of the mean warped spacing, variances multiples
    of the target variance; ``factors`` holds the three multiplier lists.
    """
    x = warp(np.sort(np.mod(np.asarray(angles, float), period)), period)
    spacing = float(np.mean(np.linalg.norm(np.roll(x, -1, axis=0) - x, axis=1)))
    var = float(np.var(targets))
    if var <= 0:
        var = max(float(np.mean(np.square(targets))), 1e-12)
    f_ls, f_sf, f_sn = factors
    return [(ls * spacing, sf * var, sn * var) for ls in f_ls for sf in f_sf for sn in f_sn]


@dataclass
class HyperparamResult:
    theta: Hyperparams
    log_marginal: float
    start_values: list
    evaluations: int


def _uniform_cycle(angles, period: float) -> bool:
    """True when ``angles`` step by exactly period/N around one full period."""
    n = len(angles)
    step = np.diff(angles)
    return n >= 2 and bool(np.all(np.abs(step - period / n) <= 1e-9 * period))


def _circulant_nll(targets, period: float, mu: int):
    """Negative log marginal likelihood for a uniform cyclic grid, via FFT.

    The Gramian of equally spaced points on the circle is circulant, so its
    eigenvalues are the DFT of its first row; this is exact, not an approximation.
    """
    n = len(targets)
    chord = 2.0 * np.abs(np.sin(np.pi * np.arange(n) / n))
    power = np.abs(np.fft.fft(targets)) ** 2
    const = 0.5 * n * math.log(2.0 * math.pi)

    def nll(ls, sf, sn):
        row = sf * matern_profile(chord / ls, mu)
        eig = np.fft.fft(row).real + sn
        if np.min(eig) <= 0:
            return np.inf
        return 0.5 * float(np.sum(power / eig)) / n + 0.5 * float(np.sum(np.log(eig))) + const

    return nll


def _dense_nll(targets, angles, period: float, mu: int):
    x = warp(angles, period)
    dist = _distances(x, x)

    def nll(ls, sf, sn):
        k = sf * matern_profile(dist / ls, mu)
        np.fill_diagonal(k, sf)
        try:
            return -_log_marginal_from_gram(targets, k, sn, sf)
        except np.linalg.LinAlgError:
            return np.inf

    return nll


def optimize_hyperparams(targets, angles, period: float, mu: int = 3, starts=None,
                         xatol: float = 1e-8, maxfev: int = 2000) -> HyperparamResult:
    """Maximize the log marginal likelihood over log length-scale and variances.

    Deterministic Nelder-Mead in log-space from each start; ``mu`` stays fixed.
    """
    targets = np.asarray(targets, dtype=float)
    angles = np.asarray(angles, dtype=float)
    if len(targets) < 3:
        raise ValueError("need at least 3 training points")
    if _uniform_cycle(angles, period):
        base = _circulant_nll(targets, period, mu)
    else:
        base = _dense_nll(targets, angles, period, mu)

    def nll(z):
        return base(*np.exp(np.clip(z, *LOG_BOUNDS)))

    starts = start_grid(targets, angles, period) if starts is None else starts
    best_z, best_f = None, np.inf
    start_values = []
    nfev = 0
    for s in starts:
        z0 = np.log(np.asarray(s, dtype=float))
        f0 = nll(z0)
        start_values.append(-f0)
        if not np.isfinite(f0):
            continue
        simplex = np.vstack([z0, z0 + np.eye(3)])
        res = minimize(nll, z0, method="Nelder-Mead", bounds=[LOG_BOUNDS] * 3,
                       options={"initial_simplex": simplex, "xatol": xatol, "fatol": np.inf,
                                "maxfev": maxfev})
        nfev += res.nfev
        z, f = (res.x, res.fun) if res.fun <= f0 else (z0, f0)
        if f < best_f:
            best_z, best_f = z, f
    if best_z is None:
        raise IllConditionedError("kernel factorization failed at every start point")
    ls, sf, sn = (float(v) for v in np.exp(np.clip(best_z, *LOG_BOUNDS)))
    theta = Hyperparams(mu, ls, sf, sn)
    # report the value through the same Cholesky route used for the weights
    value = log_marginal(targets, angles, theta, period)
    log.debug("hyperparameters: mu=%d l=%.4g sf2=%.4g sn2=%.4g logml=%.6g (%d evals)",
              mu, ls, sf, sn, value, nfev)
    return HyperparamResult(theta, value, start_values, nfev)


def select_hyperparams(targets, angles, period: float, mu="auto", starts=None) -> HyperparamResult:
    """Hyperparameters for a fixed ``mu`` or, with ``mu="auto"``, the evidence-best mu in 0..3."""
    if mu != "auto":
        return optimize_hyperparams(targets, angles, period, mu=int(mu), starts=starts)
    best = None
    for m in MU_CANDIDATES:
        try:
            res = optimize_hyperparams(targets, angles, period, mu=m, starts=starts)
        except np.linalg.LinAlgError:
            continue
        if best is None or res.log_marginal > best.log_marginal:
            best = res
    if best is None:
        raise IllConditionedError("kernel factorization failed for every smoothness index")
    return best


@dataclass(frozen=True)
class CoilGp:
    """Fitted GP mean for one coil: f(phi) = k(phi, angles) @ weights."""

    period: float
    spec: MaternSpec
    noise_variance: float
    angles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if angles.shape != weights.shape or angles.ndim != 1:
            raise ValueError("angles and weights must be 1-D of equal length")
        if not self.noise_variance > 0:
            raise ValueError("noise variance must be positive")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_xtrain", _warp_ext(angles, self.period))
        object.__setattr__(self, "_wext", weights.astype(_EXT))

    def predict(self, phi):
        phi = np.asarray(phi, dtype=float)
        x = _warp_ext(phi.ravel(), self.period)
        rho = _distances(x, self._xtrain) / _EXT(self.spec.length_scale)
        k = _EXT(self.spec.signal_variance) * matern_profile(rho, self.spec.mu)
        return (k @ self._wext).astype(float).reshape(phi.shape)


def predict(gp: CoilGp, phi):
    return gp.predict(phi)


def clamp_shares(values):
    """Negative GP dips clamped to zero."""
    return np.maximum(values, 0.0)


def fit_coil(angles, targets, period: float, mu="auto", start_factors=DEFAULT_START_FACTORS) -> tuple:
    """Optimize hyperparameters and fit weights; returns (CoilGp, HyperparamResult)."""
    angles = np.asarray(angles, dtype=float)
    targets = np.asarray(targets, dtype=float)
    starts = start_grid(targets, angles, period, start_factors)
    hp = select_hyperparams(targets, angles, period, mu=mu, starts=starts)
    theta = hp.theta
    k = gram(angles, theta.spec, period)
    alpha = fit_weights(targets, k, theta.noise_variance, theta.signal_variance)
    return CoilGp(period, theta.spec, theta.noise_variance, angles, alpha), hp


@dataclass
class FitDiagnostics:
    """Per-coil fit quality, indexed [sign][coil] with sign 0 = positive torque."""

    hyperparams: list = field(default_factory=list)
    log_marginal: list = field(default_factory=list)
    max_fit_error: list = field(default_factory=list)  # max |f(theta_i) - F*_i|
    max_target: list = field(default_factory=list)
    min_prediction: list = field(default_factory=list)  # most negative value on a dense probe
    clamped: list = field(default_factory=list)  # whether clamping exceeded 1e-6 max F*


class GpCommutation(CommutationFunction):
    """Commutation built from three positive-torque and three negative-torque coil GPs."""

    def __init__(self, coils, coils_neg=None, n_teeth: int | None = None):
        self.coils = tuple(coils)
        self.coils_neg = tuple(coils_neg) if coils_neg is not None else None
        if len(self.coils) != 3 or (self.coils_neg is not None and len(self.coils_neg) != 3):
            raise ValueError("need three coil GPs per torque sign")
        self.period = self.coils[0].period
        self.n_teeth = n_teeth if n_teeth is not None else round(2 * math.pi / self.period)

    def raw_shares(self, phi, negative: bool = False):
        coils = self.coils_neg if negative else self.coils
        if coils is None:
            raise ValueError("no negative-torque GPs fitted")
        return np.stack([c.predict(phi) for c in coils], axis=-1)

    def eval_shares(self, phi):
        return clamp_shares(self.raw_shares(phi))

    def eval_shares_neg(self, phi):
        return clamp_shares(self.raw_shares(phi, negative=True))


def fit_commutation(table: CommutationTable, n_teeth: int, mu="auto",
                    start_factors=DEFAULT_START_FACTORS, n_probe: int = 4096):
    """Fit coil GPs through a commutation table; returns (GpCommutation, FitDiagnostics)."""
    period = 2.0 * math.pi / n_teeth
    angles = table.theta / n_teeth
    probe = np.arange(n_probe) * (period / n_probe)
    diag = FitDiagnostics()
    fitted = []
    for values in (table.values, table.values_neg):
        if values is None:
            fitted.append(None)
            continue
        coils, hps, lmls, errs, tops, mins, clamps = [], [], [], [], [], [], []
        for c in range(3):
            gp, hp = fit_coil(angles, values[:, c], period, mu=mu, start_factors=start_factors)
            coils.append(gp)
            hps.append(hp.theta)
            errs.append(float(np.max(np.abs(gp.predict(angles) - values[:, c]))))
            top = float(np.max(np.abs(values[:, c])))
            tops.append(top)
            lowest = float(np.min(gp.predict(probe)))
            mins.append(lowest)
            clamped = -lowest > 1e-6 * top
            clamps.append(clamped)
            if clamped:
                log.info("coil %d GP dips to %.3g below zero; clamped to 0", c + 1, lowest)
            lmls.append(hp.log_marginal)
        fitted.append(coils)
        diag.hyperparams.append(hps)
        diag.log_marginal.append(lmls)
        diag.max_fit_error.append(errs)
        diag.max_target.append(tops)
        diag.min_prediction.append(mins)
        diag.clamped.append(clamps)
    return GpCommutation(fitted[0], fitted[1], n_teeth=n_teeth), diag


def _fmt(x) -> str:
    return format(float(x), ".17g")


def format_gp(gp: GpCommutation) -> str:
    """Versioned text form of a fitted commutation; numbers round-trip exactly."""
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION}", f"n_teeth = {gp.n_teeth}", f"period = {_fmt(gp.period)}"]
    for label, coils in (("pos", gp.coils), ("neg", gp.coils_neg)):
        if coils is None:
            continue
        for c, coil in enumerate(coils, start=1):
            lines += [
                f"[{label} {c}]",
                f"mu = {coil.spec.mu}",
                f"length_scale = {_fmt(coil.spec.length_scale)}",
                f"signal_variance = {_fmt(coil.spec.signal_variance)}",
                f"noise_variance = {_fmt(coil.noise_variance)}",
                "angles = " + " ".join(_fmt(a) for a in coil.angles),
                "weights = " + " ".join(_fmt(w) for w in coil.weights),
            ]
    return "\n".join(lines) + "\n"


def save_gp(gp: GpCommutation, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_gp(gp))


_COIL_FIELDS = ("mu", "length_scale", "signal_variance", "noise_variance", "angles", "weights")


def load_gp(path) -> GpCommutation:
    with open(path) as fh:
        return parse_gp(fh.read(), str(path))


def parse_gp(text: str, path: str = "<gp>") -> GpCommutation:
    """Inverse of :func:`format_gp`; errors name the line or missing section."""
    raw = text.splitlines()
    if not raw:
        raise GpFormatError(f"{path}: empty file")
    head = raw[0].split()
    if len(head) != 2 or head[0] != FORMAT_TAG:
        raise GpFormatError(f"{path}:1: expected header '{FORMAT_TAG} <version>'")
    try:
        version = int(head[1])
    except ValueError:
        raise GpFormatError(f"{path}:1: malformed version {head[1]!r}") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}:1: unsupported format version {version} "
                                      f"(this build reads version {FORMAT_VERSION})")
    header, sections = {}, {}
    current = header
    lines_of = {}
    for lineno, line in enumerate(raw[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name in sections:
                raise GpFormatError(f"{path}:{lineno}: duplicate section [{name}]")
            current = sections[name] = {}
            lines_of[name] = lineno
            continue
        if "=" not in line:
            raise GpFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        current[key] = (value, lineno)

    def number(store, key, where, cast=float):
        if key not in store:
            raise GpFormatError(f"{path}: {where} missing field '{key}'")
        value, lineno = store[key]
        try:
            return cast(value)
        except ValueError:
            raise GpFormatError(f"{path}:{lineno}: malformed value for '{key}'") from None

    n_teeth = number(header, "n_teeth", "header", int)
    period = number(header, "period", "header")

    def coil(name):
        if name not in sections:
            raise GpFormatError(f"{path}: missing section [{name}]")
        sec = sections[name]
        unknown = set(sec) - set(_COIL_FIELDS)
        if unknown:
            raise GpFormatError(f"{path}:{lines_of[name]}: unknown field(s) {sorted(unknown)} "
                                f"in [{name}]")
        vec = {}
        for key in ("angles", "weights"):
            if key not in sec:
                raise GpFormatError(f"{path}: section [{name}] missing field '{key}'")
            value, lineno = sec[key]
            try:
                vec[key] = np.array([float(t) for t in value.split()])
            except ValueError:
                raise GpFormatError(f"{path}:{lineno}: malformed number in '{key}'") from None
        if len(vec["angles"]) != len(vec["weights"]):
            raise GpFormatError(f"{path}: section [{name}] has {len(vec['angles'])} angles but "
                                f"{len(vec['weights'])} weights")
        spec = MaternSpec(number(sec, "length_scale", f"[{name}]"),
                          number(sec, "signal_variance", f"[{name}]"),
                          number(sec, "mu", f"[{name}]", int))
        return CoilGp(period, spec, number(sec, "noise_variance", f"[{name}]"),
                      vec["angles"], vec["weights"])

    pos = [coil(f"pos {c}") for c in (1, 2, 3)]
    neg = None
    if any(name.startswith("neg") for name in sections):
        neg = [coil(f"neg {c}") for c in (1, 2, 3)]
    return GpCommutation(pos, neg, n_teeth=n_teeth)
