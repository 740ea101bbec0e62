"""Fixed-step co-simulation of plant and observer, signal generation,
analytic error prediction, and trajectory export.

The integrator is the classical fourth-order Runge-Kutta scheme on a
uniform grid (two runs that are compared pointwise need identical grids,
which rules out adaptive stepping).  Ground-truth faults and disturbances
are injected as explicit time signals; the exo-system remains a design-time
object, so estimation error is always measured against the injected truth.

Scenario file format (sections, ``#`` comments)::

    [scenario]   t_end = ..., h = ...          (h optional)
    [init]       <state> = value lines (default 0); plus either
                 e0 = v1[, v2 ...]   observer starts at T(x0) + e0, or
                 xi0 = v1[, v2 ...]  explicit observer initial state
    [signals]    <symbol> = constant(c) | step(t0, a) |
                 ramp(t0, slope[, offset]) | sine(a, omega[, phase]) |
                 piecewise(t1, v1, t2, v2, ...)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import scipy.linalg

from .expr import Expr, bind, diff, evaluate, free_symbols, simplify, subst
from .model import (ModelError, ModelFormatError, PlantModel, split_sections)
from .design import ObserverRealization

__all__ = [
    "Signal", "ConstantSignal", "StepSignal", "RampSignal", "SinusoidSignal",
    "PiecewiseSignal", "Scenario", "Trajectory", "SimulationError",
    "eval_signal", "parse_signal", "load_scenario", "integrate_rk4",
    "make_rhs", "simulate", "predict_error", "export_csv", "default_step",
]


class SimulationError(ModelError):
    """Integration failure (domain violation, dimension mismatch)."""


# --------------------------------------------------------------------------
# signals

@dataclass(frozen=True)
class ConstantSignal:
    value: float


@dataclass(frozen=True)
class StepSignal:
    t0: float
    amplitude: float


@dataclass(frozen=True)
class RampSignal:
    """Zero before t0, then offset + slope*(t - t0)."""
    t0: float
    slope: float
    offset: float = 0.0


@dataclass(frozen=True)
class SinusoidSignal:
    amplitude: float
    omega: float
    phase: float = 0.0


@dataclass(frozen=True)
class PiecewiseSignal:
    """Zero before the first breakpoint, then hold the last passed value."""
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        times = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("piecewise breakpoint times must be strictly increasing")


Signal = Union[ConstantSignal, StepSignal, RampSignal, SinusoidSignal, PiecewiseSignal]


def eval_signal(s: Signal, t: float) -> float:
    if isinstance(s, ConstantSignal):
        return s.value
    if isinstance(s, StepSignal):
        return s.amplitude if t >= s.t0 else 0.0
    if isinstance(s, RampSignal):
        return s.offset + s.slope * (t - s.t0) if t >= s.t0 else 0.0
    if isinstance(s, SinusoidSignal):
        return s.amplitude * math.sin(s.omega * t + s.phase)
    if isinstance(s, PiecewiseSignal):
        value = 0.0
        for tk, vk in s.points:
            if t < tk:
                break
            value = vk
        return value
    raise TypeError(f"not a signal: {s!r}")


_SIGNAL_RE = re.compile(r"([a-z]+)\s*\((.*)\)\Z")


def parse_signal(text: str) -> Signal:
    text = text.strip()
    m = _SIGNAL_RE.match(text)
    if m is None:
        try:
            return ConstantSignal(float(text))
        except ValueError:
            raise ModelFormatError(f"bad signal {text!r}") from None
    kind, argtext = m.group(1), m.group(2)
    try:
        args = [float(a) for a in argtext.split(",")] if argtext.strip() else []
    except ValueError:
        raise ModelFormatError(f"bad signal arguments in {text!r}") from None
    try:
        if kind == "constant":
            return ConstantSignal(*args)
        if kind == "step":
            return StepSignal(*args)
        if kind == "ramp":
            return RampSignal(*args)
        if kind == "sine":
            return SinusoidSignal(*args)
        if kind == "piecewise":
            if len(args) % 2:
                raise TypeError
            return PiecewiseSignal(tuple(zip(args[::2], args[1::2])))
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad signal {text!r}: {exc}") from None
    raise ModelFormatError(f"unknown signal kind '{kind}'")


# --------------------------------------------------------------------------
# scenarios

@dataclass
class Scenario:
    t_end: float
    h: float | None = None
    x0: dict[str, float] = field(default_factory=dict)
    e0: tuple[float, ...] | None = None
    xi0: tuple[float, ...] | None = None
    signals: dict[str, Signal] = field(default_factory=dict)


def load_scenario(path) -> Scenario:
    path = Path(path)
    secs = split_sections(path.read_text(), source=path.name)
    if "scenario" not in secs:
        raise ModelFormatError(f"{path.name}: missing [scenario] section")
    header = {}
    for lineno, line in secs["scenario"]:
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
    if "t_end" not in header:
        raise ModelFormatError(f"{path.name}: [scenario] must set t_end")
    t_end = float(header["t_end"])
    h = float(header["h"]) if "h" in header else None
    if h is not None and h <= 0.0:
        raise ModelFormatError(f"{path.name}: step size h must be positive")

    x0: dict[str, float] = {}
    e0 = xi0 = None
    for lineno, line in secs.get("init", []):
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "e0":
            e0 = tuple(float(v) for v in value.split(","))
        elif key == "xi0":
            xi0 = tuple(float(v) for v in value.split(","))
        else:
            x0[key] = float(value)
    signals = {}
    for lineno, line in secs.get("signals", []):
        key, _, value = line.partition("=")
        signals[key.strip()] = parse_signal(value)
    return Scenario(t_end=t_end, h=h, x0=x0, e0=e0, xi0=xi0, signals=signals)


# --------------------------------------------------------------------------
# integration

def integrate_rk4(rhs: Callable[[float, np.ndarray], np.ndarray],
                  x0: Sequence[float], t_end: float, h: float):
    """Classical RK4 on a uniform grid; a final shorter step lands exactly
    on t_end when it is not a multiple of h.  Returns (t, X)."""
    if h <= 0.0:
        raise ValueError("step size must be positive")
    x = np.asarray(x0, dtype=float).copy()
    n_full = int(math.floor(t_end / h + 1e-9))
    times = [k * h for k in range(n_full + 1)]
    if times[-1] < t_end - 1e-9 * max(1.0, t_end):
        times.append(t_end)
    out = np.empty((len(times), x.size))
    out[0] = x
    for k in range(1, len(times)):
        t = times[k - 1]
        dt = times[k] - t
        try:
            k1 = rhs(t, x)
            k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
            k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
            k4 = rhs(t + dt, x + dt * k3)
        except (ArithmeticError, ValueError, ModelError) as exc:
            raise SimulationError(f"rhs evaluation failed at t = {t:g}: {exc}") from None
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = x
    return np.array(times), out


def make_rhs(model: PlantModel, signals: Mapping[str, Signal]):
    """Bind the model dynamics (parameters folded) to a fast rhs callable.

    Every disturbance/fault symbol is driven by its signal, defaulting to
    constant zero.  Returns (rhs, inputs_of_t) where inputs_of_t(t) gives
    the injected input values in declaration order.
    """
    inputs = model.input_symbols()
    sigs = [signals.get(s, ConstantSignal(0.0)) for s in inputs]
    slots = {s: i for i, s in enumerate(model.states + inputs)}
    fns = [bind(simplify(subst(d, model.params)), slots) for d in model.dynamics]

    def inputs_of_t(t: float) -> list[float]:
        return [eval_signal(s, t) for s in sigs]

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        vals = [*x, *inputs_of_t(t)]
        return np.array([f(vals) for f in fns])

    return rhs, inputs_of_t


def default_step(model: PlantModel, observer: ObserverRealization,
                 x0: Mapping[str, float]) -> float:
    """Default step size: fastest time constant among the observer poles
    and the plant linearized at the initial state, divided by 50."""
    zeros = {s: 0.0 for s in model.input_symbols()}
    folded = {**model.params, **zeros}
    fexprs = [simplify(subst(d, folded)) for d in model.dynamics]
    env = {s: float(x0.get(s, 0.0)) for s in model.states}
    jac = np.array([[evaluate(simplify(diff(fk, s)), env) for s in model.states]
                    for fk in fexprs])
    rates = [abs(l.real) for l in np.linalg.eigvals(jac)]
    rates += [abs(l.real) for l in np.linalg.eigvals(observer.A)]
    fastest = max(r for r in rates if r > 0.0)
    return 1.0 / (50.0 * fastest)


# --------------------------------------------------------------------------
# plant + observer co-simulation

@dataclass
class Trajectory:
    """Uniform-grid time series of a co-simulation run."""
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    z: np.ndarray
    zhat: np.ndarray
    states: tuple[str, ...]
    fhat: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def err(self) -> np.ndarray:
        return self.zhat - self.z


def _observer_init(model: PlantModel, observer: ObserverRealization,
                   scenario: Scenario, x0: np.ndarray) -> np.ndarray:
    if scenario.xi0 is not None:
        xi0 = np.asarray(scenario.xi0, dtype=float)
        if xi0.shape != (observer.v,):
            raise SimulationError(f"xi0 must have {observer.v} entries")
        return xi0
    e0 = np.zeros(observer.v) if scenario.e0 is None else np.asarray(scenario.e0, float)
    if e0.shape == ():
        e0 = np.full(observer.v, float(e0))
    if e0.shape != (observer.v,):
        raise SimulationError(f"e0 must have {observer.v} entries")
    env = {**model.params, **dict(zip(model.states, x0))}
    # design-time symbols outside the plant (e.g. exo-system states) sit at
    # their pre-fault value of zero
    for t_expr in observer.T:
        for s in free_symbols(t_expr):
            if s not in env:
                env[s] = 0.0
    t_at_x0 = np.array([evaluate(t_expr, env) for t_expr in observer.T])
    return t_at_x0 + e0


def simulate(model: PlantModel, observer: ObserverRealization,
             scenario: Scenario, truth: Signal | None = None) -> Trajectory:
    """Co-integrate the plant (driven by the scenario signals) and the
    observer (driven only by the measured outputs); record the functional,
    its estimate, and the estimation error on the shared grid.

    ``truth`` overrides the recorded reference z (for fault estimation the
    reference is the injected fault signal, not the model functional).
    """
    if observer.p != model.p:
        raise SimulationError(
            f"observer expects {observer.p} outputs, model has {model.p}")
    n, v = model.n, observer.v
    unknown = set(scenario.x0) - set(model.states)
    if unknown:
        raise SimulationError(f"initial state for unknown symbols: {sorted(unknown)}")
    x0 = np.array([scenario.x0.get(s, 0.0) for s in model.states])
    xi0 = _observer_init(model, observer, scenario, x0)
    h = scenario.h if scenario.h is not None else default_step(model, observer, scenario.x0)

    inputs = model.input_symbols()
    sigs = [scenario.signals.get(s, ConstantSignal(0.0)) for s in inputs]
    slots = {s: i for i, s in enumerate(model.states + inputs)}
    fns_dyn = [bind(simplify(subst(d, model.params)), slots) for d in model.dynamics]
    out_fns = [bind(simplify(subst(o, model.params)), slots) for o in model.outputs]
    z_fn = bind(simplify(subst(model.functional, model.params)), slots)
    A, B, C, D = observer.A, observer.B, observer.C, observer.D

    def inputs_of_t(t: float) -> list[float]:
        return [eval_signal(s, t) for s in sigs]

    def rhs(t: float, s: np.ndarray) -> np.ndarray:
        x, xi = s[:n], s[n:]
        vals = [*x, *inputs_of_t(t)]
        dx = [f(vals) for f in fns_dyn]
        y = np.array([g(vals) for g in out_fns])
        dxi = A @ xi + B @ y
        return np.concatenate([dx, dxi])

    t, S = integrate_rk4(rhs, np.concatenate([x0, xi0]), scenario.t_end, h)

    N = t.size
    y = np.empty((N, model.p))
    z = np.empty(N)
    for k in range(N):
        vals = [*S[k, :n], *inputs_of_t(t[k])]
        y[k] = [g(vals) for g in out_fns]
        z[k] = eval_signal(truth, float(t[k])) if truth is not None else z_fn(vals)
    zhat = (S[:, n:] @ C[0]) + (y @ D[0])
    return Trajectory(t=t, x=S[:, :n], xi=S[:, n:], y=y, z=z, zhat=zhat,
                      states=model.states)


def predict_error(observer: ObserverRealization, e0, t) -> np.ndarray:
    """Analytic estimation error C exp(A t) e0 on the given time grid.

    Scalar observers use the plain exponential; otherwise a uniform grid is
    advanced by one dense matrix exponential per step, and arbitrary grids
    fall back to one exponential per point.
    """
    e0 = np.atleast_1d(np.asarray(e0, dtype=float))
    if e0.shape != (observer.v,):
        raise ValueError(f"e0 must have {observer.v} entries")
    t = np.asarray(t, dtype=float)
    C = observer.C[0]
    if observer.v == 1:
        return C[0] * e0[0] * np.exp(observer.A[0, 0] * t)
    out = np.empty(t.size)
    steps = np.diff(t)
    if t.size > 1 and np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        prop = scipy.linalg.expm(observer.A * steps[0])
        e = scipy.linalg.expm(observer.A * t[0]) @ e0
        for k in range(t.size):
            out[k] = C @ e
            e = prop @ e
        return out
    for k, tk in enumerate(t):
        out[k] = C @ (scipy.linalg.expm(observer.A * tk) @ e0)
    return out


def export_csv(traj: Trajectory, path) -> None:
    """Write the trajectory with full double precision, one row per grid
    point: t, x1.., y1.., z, zhat, err, then any fault estimates."""
    n = traj.x.shape[1]
    p = traj.y.shape[1]
    fault_names = sorted(traj.fhat)
    header = (["t"] + [f"x{i}" for i in range(1, n + 1)]
              + [f"y{j}" for j in range(1, p + 1)] + ["z", "zhat", "err"]
              + [f"fhat_{f}" for f in fault_names])
    err = traj.err
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(traj.t.size):
            row = [traj.t[k], *traj.x[k], *traj.y[k], traj.z[k], traj.zhat[k], err[k]]
            row += [traj.fhat[f][k] for f in fault_names]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
