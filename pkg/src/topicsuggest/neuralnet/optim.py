"""Adam and limited-memory BFGS (with an orthant-wise mode for L1 penalties)."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# Adam

@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.997
    eps: float = 1e-5
    l2: float = 0.001


@dataclass
class OptimState:
    config: AdamConfig = field(default_factory=AdamConfig)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimState) -> None:
    """In-place Adam update; the L2 term is added to each gradient first."""
    cfg = state.config
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    corr1 = 1.0 - cfg.beta1 ** t
    corr2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if cfg.l2:
            g = g + cfg.l2 * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)


# ----------------------------------------------------------------------
# L-BFGS

@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 500
    gtol: float = 1e-6
    ftol: float = 1e-12
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 40


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    n_iter: int
    converged: bool
    message: str
    history: list = field(default_factory=list)


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(s_hist, y_hist))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2)
    return t if np.isfinite(t) else None


def _strong_wolfe(fun, x, f0, g0, d, cfg, step0):
    """Bracketing line search for the strong Wolfe conditions."""
    dg0 = g0 @ d
    prev_a, prev_f, prev_dg = 0.0, f0, dg0
    a = step0
    best = (f0, 0.0, g0)
    for k in range(cfg.max_linesearch):
        f, g = fun(x + a * d)
        dg = g @ d
        if f < best[0]:
            best = (f, a, g)
        if f > f0 + cfg.c1 * a * dg0 or (k > 0 and f >= prev_f):
            return _zoom(fun, x, f0, dg0, d, cfg, prev_a, prev_f, prev_dg, a, f, dg, best)
        if abs(dg) <= -cfg.c2 * dg0:
            return a, f, g, True
        if dg >= 0:
            return _zoom(fun, x, f0, dg0, d, cfg, a, f, dg, prev_a, prev_f, prev_dg, best)
        prev_a, prev_f, prev_dg = a, f, dg
        a *= 2.0
    f, a, g = best
    return a, f, g, False


def _zoom(fun, x, f0, dg0, d, cfg, lo, flo, dglo, hi, fhi, dghi, best):
    for _ in range(cfg.max_linesearch):
        a = _cubic_min(lo, flo, dglo, hi, fhi, dghi)
        lo_b, hi_b = min(lo, hi), max(lo, hi)
        width = hi_b - lo_b
        if a is None or not (lo_b + 0.1 * width <= a <= hi_b - 0.1 * width):
            a = 0.5 * (lo + hi)
        f, g = fun(x + a * d)
        dg = g @ d
        if f < best[0]:
            best = (f, a, g)
        if f > f0 + cfg.c1 * a * dg0 or f >= flo:
            hi, fhi, dghi = a, f, dg
        else:
            if abs(dg) <= -cfg.c2 * dg0:
                return a, f, g, True
            if dg * (hi - lo) >= 0:
                hi, fhi, dghi = lo, flo, dglo
            lo, flo, dglo = a, f, dg
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    f, a, g = best
    return a, f, g, a > 0


def _pseudo_gradient(x, g, l1):
    """Minimum-norm subgradient of f + sum(l1 * |x|)."""
    pg = g + l1 * np.sign(x)
    at_zero = x == 0
    right = g + l1
    left = g - l1
    pg = np.where(at_zero & (left > 0), left, pg)
    pg = np.where(at_zero & (right < 0), right, pg)
    pg = np.where(at_zero & (left <= 0) & (right >= 0), 0.0, pg)
    return pg


def lbfgs_minimize(fun, x0, config: LbfgsConfig | None = None, l1=0.0) -> LbfgsResult:
    """Minimize ``fun(x) -> (f, grad)`` plus an optional ``sum(l1 * |x|)``.

    ``l1`` may be a scalar or a per-coordinate array (zeros leave coordinates
    unpenalized). With any positive entry the orthant-wise variant runs: the
    quasi-Newton direction is built from the pseudo-gradient, constrained to
    its orthant, and trial points are projected back onto it.
    """
    cfg = config or LbfgsConfig()
    x = np.array(x0, dtype=float)
    l1 = np.broadcast_to(np.asarray(l1, dtype=float), x.shape)
    owl = bool(np.any(l1 > 0))
    f, g = fun(x)
    F = f + float(l1 @ np.abs(x)) if owl else f
    s_hist: deque = deque(maxlen=cfg.memory)
    y_hist: deque = deque(maxlen=cfg.memory)
    history = [F]
    message = "max iterations reached"
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        pg = _pseudo_gradient(x, g, l1) if owl else g
        gnorm = float(np.linalg.norm(pg))
        if gnorm <= cfg.gtol:
            converged, message = True, "gradient tolerance reached"
            it -= 1
            break
        d = -_two_loop(pg, s_hist, y_hist)
        if owl:
            d = np.where(d * pg < 0, d, 0.0)
        if d @ pg >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -pg
        step0 = 1.0 if s_hist else min(1.0, 1.0 / gnorm)
        if owl:
            orthant = np.where(x != 0, np.sign(x), -np.sign(pg))
            a = step0
            ok = False
            for _ in range(cfg.max_linesearch):
                xn = x + a * d
                xn = np.where(np.sign(xn) == orthant, xn, 0.0)
                fn, gn = fun(xn)
                Fn = fn + float(l1 @ np.abs(xn))
                if Fn <= F + cfg.c1 * (pg @ (xn - x)):
                    ok = True
                    break
                a *= 0.5
        else:
            a, fn, gn, ok = _strong_wolfe(fun, x, f, g, d, cfg, step0)
            xn = x + a * d
            Fn = fn
        if not ok or Fn > F:
            message = "line search failed"
            break
        s = xn - x
        y = gn - g
        if s @ y > 1e-12 * (y @ y):
            s_hist.append(s)
            y_hist.append(y)
        rel = (F - Fn) / max(abs(F), abs(Fn), 1.0)
        x, f, g, F = xn, fn, gn, Fn
        history.append(F)
        if rel <= cfg.ftol:
            converged, message = True, "function tolerance reached"
            break
    pg = _pseudo_gradient(x, g, l1) if owl else g
    gnorm = float(np.linalg.norm(pg))
    if not converged:
        log.warning("L-BFGS stopped: %s (|g|=%.3g)", message, gnorm)
    return LbfgsResult(x=x, f=F, grad_norm=gnorm, n_iter=it, converged=converged, message=message, history=history)
