"""Optimal commutation table: power versus sampling-induced torque ripple.

The design variables are the shares ``F[k] = f(theta_k)`` on ``N`` grid angles.
At the nominal velocity each control sample advances exactly one grid point,
so the relative torque ripple on a subsample grid is linear in ``F``::

    e[k*M + j] = g(theta_k + 2*pi*j/(N*M)) . F[k] - target

plus one wrap-around row at ``t = N*Ts``. The program

    min  sum(F) + beta * ||A F - target||_2
    s.t. g(theta_k) . F[k] = target,  F >= 0

is solved exactly. Every ripple row touches a single grid point, so the only
coupling between grid points is the scalar ``s = ||A F - target||``. Writing
``||r|| = min_s (||r||^2 / (2 s) + s / 2)`` splits the problem, for fixed ``s``,
into ``N`` independent three-variable QPs over a polygon; those are solved in
closed form by enumerating the active nonnegativity constraints. The optimal
``s`` is the unique root of ``s - ||r(F(s))||``, found by Brent's method.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from .motor import TorqueGainModel, validate_model, ModelError

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# free-coordinate sets of the three nonnegativity constraints (empty set is never feasible)
_FACES = ((0, 1, 2), (0, 1), (0, 2), (1, 2), (0,), (1,), (2,))


class InfeasibleError(ValueError):
    """No nonnegative shares produce the requested torque at some angle."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


def build_grid(n: int, period: float = TWO_PI) -> np.ndarray:
    """``n`` uniform angles -pi + period*i/n (electrical when period = 2*pi)."""
    if n < 2:
        raise ValueError("grid needs at least 2 points")
    return -math.pi + period * np.arange(n) / n


def nominal_velocity(n_teeth: int, n: int, ts: float) -> float:
    """Velocity (rad/s) at which one control sample advances one grid point."""
    return TWO_PI / (n_teeth * n * ts)


@dataclass(frozen=True)
class RippleProblem:
    model: TorqueGainModel
    n_grid: int
    n_sub: int
    beta: float
    ts: float
    velocity: float
    theta: np.ndarray  # (N,) electrical grid
    gains: np.ndarray  # (N, M, 3): g at subsample angles, row (k, j)
    wrap_gain: np.ndarray  # (3,): final row at t = N*Ts, applied to F[0]
    target: float = 1.0

    @property
    def n_rows(self) -> int:
        return self.n_grid * self.n_sub + 1

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense subsample matrix A, shape (N*M + 1, 3N); F is flattened row-major."""
        n, m = self.n_grid, self.n_sub
        a = np.zeros((n * m + 1, 3 * n))
        for k in range(n):
            a[k * m:(k + 1) * m, 3 * k:3 * k + 3] = self.gains[k]
        a[-1, 0:3] = self.wrap_gain
        return a

    def residual(self, values) -> np.ndarray:
        """Relative ripple vector A F - target."""
        values = np.asarray(values, dtype=float).reshape(self.n_grid, 3)
        r = np.einsum("kjc,kc->kj", self.gains, values).ravel() - self.target
        return np.append(r, self.wrap_gain @ values[0] - self.target)

    def with_target(self, target: float) -> "RippleProblem":
        return replace(self, target=float(target))

    def with_beta(self, beta: float) -> "RippleProblem":
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        return replace(self, beta=float(beta))

    def objective(self, values) -> float:
        values = np.asarray(values, dtype=float)
        return float(values.sum() + self.beta * np.linalg.norm(self.residual(values)))


def assemble(model: TorqueGainModel, n: int, m: int, beta: float, ts: float,
             target: float = 1.0, grid_offset: float = -math.pi) -> RippleProblem:
    """Build the ripple program for ``n`` grid points and ``m`` subsamples per sample.

    ``grid_offset`` is the electrical angle of the first grid point.
    """
    if n < 2 or m < 1:
        raise ValueError("need n >= 2 and m >= 1")
    if beta < 0 or not ts > 0:
        raise ValueError("need beta >= 0 and ts > 0")
    if target not in (1.0, -1.0):
        raise ValueError("target must be +1 or -1")
    report = validate_model(model)
    if not report.passed:
        raise ModelError("; ".join(report.failures))
    theta = grid_offset + TWO_PI * np.arange(n) / n
    step = TWO_PI / n
    sub = theta[:, None] + step * np.arange(m)[None, :] / m
    gains = model.eval_electrical(sub)
    wrap = model.eval_electrical(grid_offset + TWO_PI)
    v = nominal_velocity(model.n_teeth, n, ts)
    return RippleProblem(model, n, m, float(beta), float(ts), v, theta, gains, wrap, float(target))


def per_point_lp(g, target: float = 1.0) -> np.ndarray:
    """Cheapest nonnegative shares with g . f = target (closed form).

    All effort goes on the coil with the largest gain of the requested sign;
    ties go to the lowest coil index. Accepts a single 3-vector or a stack.
    """
    g = np.asarray(g, dtype=float)
    score = g * np.sign(target)
    best = np.argmax(score, axis=-1)
    top = np.take_along_axis(score, best[..., None], axis=-1)[..., 0]
    if np.any(top <= 0):
        raise InfeasibleError("no coil produces torque of the requested sign")
    f = np.zeros_like(g)
    np.put_along_axis(f, best[..., None], (target / np.take_along_axis(g, best[..., None], -1)), -1)
    return f


def _point_qps(h, q, g, target):
    """Batched  min 0.5 f'Hf + q'f  s.t.  g.f = target, f >= 0.

    Every face of the nonnegative orthant is tried; on each face the KKT system
    of the equality-constrained QP is solved (pseudo-inverse, so singular faces
    still give a candidate) and the cheapest feasible candidate wins. The
    optimum is a KKT point of the face holding it in its relative interior, so
    the minimum over faces is exact.
    """
    n = g.shape[0]
    best = np.zeros((n, 3))
    best_val = np.full(n, np.inf)
    for face in _FACES:
        idx = list(face)
        k = len(idx)
        kkt = np.zeros((n, k + 1, k + 1))
        kkt[:, :k, :k] = h[:, idx][:, :, idx]
        kkt[:, :k, k] = g[:, idx]
        kkt[:, k, :k] = g[:, idx]
        rhs = np.concatenate([-q[:, idx], np.full((n, 1), target)], axis=1)
        sol = np.einsum("nij,nj->ni", np.linalg.pinv(kkt, rcond=1e-13), rhs)
        f = np.zeros((n, 3))
        f[:, idx] = sol[:, :k]
        scale = np.maximum(1.0, np.abs(f).max(axis=1))
        ok = np.all(f >= -1e-12 * scale[:, None], axis=1)
        f = np.maximum(f, 0.0)
        ok &= np.abs(np.sum(g * f, axis=1) - target) <= 1e-11 * scale
        val = 0.5 * np.einsum("ni,nij,nj->n", f, h, f) + np.sum(q * f, axis=1)
        take = ok & (val < best_val)
        best[take] = f[take]
        best_val[take] = val[take]
    if not np.all(np.isfinite(best_val)):
        raise InfeasibleError("per-point feasible set is empty at some grid angle")
    return best


def project_feasible(y, g, target: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``y`` onto {f >= 0, g . f = target}."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    single = y.ndim == 1
    y2, g2 = np.atleast_2d(y), np.atleast_2d(g)
    if np.any(np.max(g2 * np.sign(target), axis=1) <= 0):
        raise InfeasibleError("no coil produces torque of the requested sign")
    h = np.broadcast_to(np.eye(3), (len(y2), 3, 3))
    f = _point_qps(h, -y2, g2, target)
    return f[0] if single else f


@dataclass
class RippleSolution:
    values: np.ndarray  # (N, 3) optimal shares F*
    objective: float
    power: float  # sum(F)
    ripple: float  # ||A F - target||_2
    equality_residual: float
    kkt_residual: float  # relative KKT stationarity residual at F*
    iterations: int
    target: float
    history: list = field(default_factory=list)


class _Split:
    """Per-point QPs of the split problem for a given ripple level ``s``."""

    def __init__(self, problem: RippleProblem):
        self.p = problem
        g = problem.gains
        ata = np.einsum("kji,kjl->kil", g, g)
        atb = problem.target * g.sum(axis=1)
        ata[0] += np.outer(problem.wrap_gain, problem.wrap_gain)
        atb[0] += problem.target * problem.wrap_gain
        self.ata, self.atb = ata, atb
        self.g0 = problem.model.eval_electrical(problem.theta)

    def shares(self, s):
        w = self.p.beta / s
        # divide the objective by max(1, w) to keep the KKT systems well scaled
        d = max(1.0, w)
        return _point_qps((w / d) * self.ata, 1.0 / d - (w / d) * self.atb, self.g0, self.p.target)

    def gap(self, s):
        """s - ||r(F(s))||; negative below the optimal ripple level, positive above."""
        return s - float(np.linalg.norm(self.p.residual(self.shares(s))))


def _zero_ripple(problem: RippleProblem) -> float:
    return 1e-12 * math.sqrt(problem.n_rows)


def _diagnostics(problem: RippleProblem, values):
    """Equality residual, ripple norm and relative KKT stationarity residual.

    At each grid point the multiplier of the equality is fitted on the free
    coordinates; the residual collects the stationarity error there and any
    negative reduced gradient on coordinates held at zero, relative to the
    gradient scale.
    """
    g0 = problem.model.eval_electrical(problem.theta)
    eq = float(np.max(np.abs(np.sum(g0 * values, axis=1) - problem.target)))
    r = problem.residual(values)
    rn = float(np.linalg.norm(r))
    grad = np.ones_like(values)
    # a round-off-level residual means the norm sits at its kink; 0 is then a valid subgradient
    if problem.beta > 0 and rn > _zero_ripple(problem):
        grad = grad + problem.beta * (problem.matrix.T @ r).reshape(-1, 3) / rn
    free = values > 1e-12 * max(1.0, float(values.max()))
    gf = np.where(free, g0, 0.0)
    denom = np.sum(gf * gf, axis=1)
    lam = -np.sum(gf * grad, axis=1) / np.where(denom > 0, denom, 1.0)
    reduced = grad + lam[:, None] * g0
    viol = np.where(free, np.abs(reduced), np.maximum(-reduced, 0.0))
    scale = np.maximum(1.0, np.abs(grad).max(axis=1))
    kkt = float(np.max(viol / scale[:, None]))
    return eq, rn, kkt


def solve(problem: RippleProblem, warm_start: RippleSolution | None = None,
          kkt_tol: float = 1e-8, eq_tol: float = 1e-10, maxiter: int = 200) -> RippleSolution:
    """Globally optimal shares for ``problem``.

    ``warm_start`` (a previous solution, e.g. for a neighbouring beta) seeds the
    bracket search for the optimal ripple level.
    """
    g0 = problem.model.eval_electrical(problem.theta)
    lp = per_point_lp(g0, problem.target)
    history = []
    iters = 0
    if problem.beta == 0:
        values = lp
    else:
        split = _Split(problem)
        s_lp = float(np.linalg.norm(problem.residual(lp)))
        if s_lp <= _zero_ripple(problem):
            values = lp  # no ripple to trade against power
        else:
            s0 = warm_start.ripple if warm_start is not None and warm_start.ripple > 0 else s_lp
            s0 = min(s0, s_lp)
            lo = hi = s0
            glo = ghi = split.gap(s0)
            iters += 1
            # gap(s) >= s - s_lp, so this stops by 2 * s_lp
            while ghi < 0:
                hi = max(hi * 4.0, 2.0 * s_lp)
                ghi = split.gap(hi)
                iters += 1
            floor = 1e-14 * s_lp
            while glo >= 0 and lo > floor:
                hi, ghi = lo, glo
                lo = max(lo / 4.0, floor)
                glo = split.gap(lo)
                iters += 1
            if glo >= 0:
                s_star = lo  # ripple can be driven to ~0
            elif ghi == 0:
                s_star = hi
            else:
                s_star, res = brentq(split.gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                                     maxiter=maxiter, full_output=True, disp=False)
                iters += res.iterations
                if not res.converged:
                    best = split.shares(s_star)
                    raise ConvergenceError(f"ripple level search did not converge after {maxiter} "
                                           f"iterations", best=best)
            values = split.shares(s_star)
            history.append(s_star)
    eq, rn, kkt = _diagnostics(problem, values)
    sol = RippleSolution(values, float(values.sum() + problem.beta * rn), float(values.sum()), rn,
                         eq, kkt, iters, problem.target, history)
    if eq > eq_tol or kkt > kkt_tol:
        raise ConvergenceError(f"solution fails optimality checks: equality residual {eq:.3g}, "
                               f"KKT residual {kkt:.3g}", best=sol)
    log.debug("solved N=%d M=%d beta=%g target=%+g: power=%.6g ripple=%.6g iters=%d",
              problem.n_grid, problem.n_sub, problem.beta, problem.target, sol.power, rn, iters)
    return sol


TABLE_TAG = "srmcomm-table"
TABLE_VERSION = 1
TABLE_HEADER = "theta_e,f1,f2,f3"


class TableFormatError(ValueError):
    pass


def table_metadata(problem: RippleProblem, solution: RippleSolution) -> dict:
    return {"n_grid": problem.n_grid, "n_sub": problem.n_sub, "beta": problem.beta,
            "ts": problem.ts, "velocity": problem.velocity, "target": problem.target,
            "power": solution.power, "ripple": solution.ripple,
            "equality_residual": solution.equality_residual,
            "kkt_residual": solution.kkt_residual}


def _num(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else format(float(x), ".17g")


def format_table(theta, values, meta: dict | None = None) -> str:
    """CSV text of a share table; 17 significant digits round-trip exactly."""
    lines = [f"# {TABLE_TAG} {TABLE_VERSION}"]
    lines += [f"# {k} = {_num(v)}" for k, v in (meta or {}).items()]
    lines.append(TABLE_HEADER)
    for th, row in zip(theta, np.asarray(values, dtype=float)):
        lines.append(",".join(_num(x) for x in (th, *row)))
    return "\n".join(lines) + "\n"


def parse_table(text: str):
    """Inverse of :func:`format_table`; returns (theta, values, meta)."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {TABLE_TAG} "):
        raise TableFormatError(f"line 1: expected '# {TABLE_TAG} <version>' header")
    try:
        version = int(lines[0].split()[2])
    except (IndexError, ValueError):
        raise TableFormatError("line 1: malformed version tag") from None
    if version != TABLE_VERSION:
        raise TableFormatError(f"line 1: unsupported table version {version} (expected {TABLE_VERSION})")
    meta, rows, header_seen = {}, [], False
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].partition("=")
            if not sep:
                raise TableFormatError(f"line {no}: metadata must read '# key = value'")
            val = val.strip()
            try:
                meta[key.strip()] = int(val) if val.lstrip("-").isdigit() else float(val)
            except ValueError:
                raise TableFormatError(f"line {no}: bad metadata value {val!r}") from None
            continue
        if not header_seen:
            if line.strip() != TABLE_HEADER:
                raise TableFormatError(f"line {no}: expected header '{TABLE_HEADER}'")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise TableFormatError(f"line {no}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise TableFormatError(f"line {no}: non-numeric field") from None
    if not header_seen or not rows:
        raise TableFormatError("table has no data rows")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1:], meta


def save_table(path, theta, values, meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(format_table(theta, values, meta))


def load_table(path):
    with open(path) as fh:
        return parse_table(fh.read())
