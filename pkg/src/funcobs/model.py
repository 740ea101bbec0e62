"""Plant models and their structural decomposition.

A model declares states, bound parameters, dynamics, measured outputs, a
scalar functional to estimate, and the names of unknown disturbance and
fault inputs.  Dynamics and outputs must be affine in each disturbance and
fault symbol; the affine structure (drift, input columns, feedthrough) is
recovered by symbolic differentiation instead of being entered by hand,
so it cannot go out of sync with the declared equations.

Model file format (sections in any order, ``#`` starts a comment)::

    [states]        whitespace-separated state symbols
    [params]        name = value
    [dynamics]      one line per state, declaration order: <state>' = expr
    [outputs]       y1 = expr, y2 = expr, ...
    [functional]    z = expr            (states and params only)
    [disturbances]  symbols (optional)
    [faults]        symbols (optional)
    [box]           state = lo .. hi    (sampling ranges, optional)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .expr import (Add, Constant, EvalError, Expr, Mul, ParseError, Sub, Var,
                   VectorField, diff, eval_many, evaluate, free_symbols,
                   parse, simplify, subst, to_text, FUNCTIONS)

__all__ = [
    "PlantModel", "ExtractedStructure", "OperatingPoint", "ExoSystem",
    "AugmentedModel", "ModelError", "ModelFormatError", "NonAffineError",
    "SteadyStateError", "load_model", "parse_model", "save_model",
    "model_to_text", "split_sections", "extract_structure",
    "find_steady_state", "to_deviation_form", "make_exosystem",
    "augment_with_exosystem",
]


class ModelError(Exception):
    """Base class for model-layer errors."""


class ModelFormatError(ModelError):
    """Malformed model or scenario file."""


class NonAffineError(ModelError):
    def __init__(self, equation: str, symbol: str):
        super().__init__(f"{equation} is not affine in '{symbol}'")
        self.symbol = symbol


class SteadyStateError(ModelError):
    """Newton iteration failed to locate an equilibrium."""


_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_']*\Z")
_SECTION_RE = re.compile(r"\[([a-z]+)\]\Z")


def split_sections(text: str, source: str = "<string>") -> dict[str, list[tuple[int, str]]]:
    """Split sectioned text into {section: [(line_no, content), ...]}."""
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1)
            sections.setdefault(current, [])
            continue
        if current is None:
            raise ModelFormatError(f"{source}:{lineno}: content before first section header")
        sections[current].append((lineno, line))
    return sections


def _key_value(line: str, lineno: int, source: str) -> tuple[str, str]:
    if "=" not in line:
        raise ModelFormatError(f"{source}:{lineno}: expected 'name = value', got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), value.strip()


@dataclass(frozen=True)
class PlantModel:
    """Nonlinear plant with unknown disturbance and fault inputs.

    Dynamics and outputs may reference the disturbance/fault symbols but
    must be affine in each of them (checked on load).
    """
    states: tuple[str, ...]
    params: dict[str, float]
    dynamics: tuple[Expr, ...]
    outputs: tuple[Expr, ...]
    functional: Expr
    disturbances: tuple[str, ...] = ()
    faults: tuple[str, ...] = ()
    box: dict[str, tuple[float, float]] = field(default_factory=dict)
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def p(self) -> int:
        return len(self.outputs)

    @property
    def m(self) -> int:
        return len(self.disturbances)

    @property
    def n_faults(self) -> int:
        return len(self.faults)

    def default_box(self) -> dict[str, tuple[float, float]]:
        """Sampling box: declared ranges, [-1, 1] for undeclared states."""
        return {s: self.box.get(s, (-1.0, 1.0)) for s in self.states}

    def input_symbols(self) -> tuple[str, ...]:
        return self.disturbances + self.faults


@dataclass(frozen=True)
class ExtractedStructure:
    """Affine decomposition of a plant: drift, input columns, feedthrough.

    ``E``/``G`` hold one column (tuple of n expressions) per disturbance/
    fault; ``K``/``J`` hold the corresponding output feedthrough columns.
    """
    F: VectorField
    E: tuple[tuple[Expr, ...], ...]
    G: tuple[tuple[Expr, ...], ...]
    H: tuple[Expr, ...]
    K: tuple[tuple[Expr, ...], ...]
    J: tuple[tuple[Expr, ...], ...]
    q: Expr
    states: tuple[str, ...]
    params: dict[str, float]
    box: dict[str, tuple[float, float]]
    disturbances: tuple[str, ...]
    faults: tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def p(self) -> int:
        return len(self.H)

    @property
    def m(self) -> int:
        return len(self.E)


@dataclass(frozen=True)
class OperatingPoint:
    """Equilibrium of the undisturbed plant."""
    states: tuple[str, ...]
    values: np.ndarray
    residual: float

    def env(self) -> dict[str, float]:
        return dict(zip(self.states, map(float, self.values)))


@dataclass(frozen=True, eq=False)
class ExoSystem:
    """Autonomous linear generator of a persistent fault signal."""
    R: np.ndarray
    Q: np.ndarray
    kind: str

    @property
    def n_states(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True)
class AugmentedModel:
    """Plant in cascade with a fault exo-system.

    The selected fault is replaced everywhere by the exo-system output;
    remaining faults are reclassified as disturbances; the functional to
    estimate becomes the exo-system output itself.
    """
    model: PlantModel
    fault: str
    exo: ExoSystem
    exo_states: tuple[str, ...]


# --------------------------------------------------------------------------
# loading and saving

def parse_model(text: str, source: str = "<string>") -> PlantModel:
    secs = split_sections(text, source)
    for required in ("states", "dynamics", "outputs", "functional"):
        if required not in secs:
            raise ModelFormatError(f"{source}: missing [{required}] section")

    def tokens(section: str) -> list[tuple[int, str]]:
        out = []
        for lineno, line in secs.get(section, []):
            out.extend((lineno, t) for t in line.replace(",", " ").split())
        return out

    def check_symbol(name: str, lineno: int, seen: set):
        if not _IDENT_RE.match(name):
            raise ModelFormatError(f"{source}:{lineno}: invalid symbol name {name!r}")
        if name in FUNCTIONS:
            raise ModelFormatError(f"{source}:{lineno}: '{name}' is a reserved function name")
        if name in seen:
            raise ModelFormatError(f"{source}:{lineno}: duplicate symbol '{name}'")
        seen.add(name)

    seen: set[str] = set()
    states = []
    for lineno, t in tokens("states"):
        check_symbol(t, lineno, seen)
        states.append(t)
    if not states:
        raise ModelFormatError(f"{source}: [states] is empty")

    params: dict[str, float] = {}
    for lineno, line in secs.get("params", []):
        key, value = _key_value(line, lineno, source)
        check_symbol(key, lineno, seen)
        try:
            params[key] = float(value)
        except ValueError:
            raise ModelFormatError(f"{source}:{lineno}: bad numeric value {value!r}") from None

    disturbances = []
    for lineno, t in tokens("disturbances"):
        check_symbol(t, lineno, seen)
        disturbances.append(t)
    faults = []
    for lineno, t in tokens("faults"):
        check_symbol(t, lineno, seen)
        faults.append(t)

    all_symbols = seen
    state_symbols = set(states) | set(params)

    def parse_expr(txt: str, lineno: int, symbols) -> Expr:
        try:
            return parse(txt, symbols)
        except ParseError as exc:
            raise ModelFormatError(f"{source}:{lineno}: {exc}") from None

    dyn_lines = secs["dynamics"]
    if len(dyn_lines) != len(states):
        raise ModelFormatError(
            f"{source}: [dynamics] has {len(dyn_lines)} equations for {len(states)} states")
    dynamics = []
    for (lineno, line), state in zip(dyn_lines, states):
        key, value = _key_value(line, lineno, source)
        if key != state + "'":
            raise ModelFormatError(
                f"{source}:{lineno}: expected equation for {state + chr(39)!r}, got {key!r}"
                " (dynamics must follow state declaration order)")
        dynamics.append(parse_expr(value, lineno, all_symbols))

    outputs = []
    for idx, (lineno, line) in enumerate(secs["outputs"], 1):
        key, value = _key_value(line, lineno, source)
        if key != f"y{idx}":
            raise ModelFormatError(f"{source}:{lineno}: expected 'y{idx} = ...', got {key!r}")
        outputs.append(parse_expr(value, lineno, all_symbols))
    if not outputs:
        raise ModelFormatError(f"{source}: [outputs] is empty")

    func_lines = secs["functional"]
    if len(func_lines) != 1:
        raise ModelFormatError(f"{source}: [functional] must hold exactly one 'z = ...' line")
    lineno, line = func_lines[0]
    key, value = _key_value(line, lineno, source)
    if key != "z":
        raise ModelFormatError(f"{source}:{lineno}: expected 'z = ...', got {key!r}")
    functional = parse_expr(value, lineno, state_symbols)

    box: dict[str, tuple[float, float]] = {}
    for lineno, line in secs.get("box", []):
        key, value = _key_value(line, lineno, source)
        if key not in states:
            raise ModelFormatError(f"{source}:{lineno}: box entry for unknown state '{key}'")
        parts = value.split("..")
        if len(parts) != 2:
            raise ModelFormatError(f"{source}:{lineno}: expected 'state = lo .. hi'")
        try:
            lo, hi = float(parts[0]), float(parts[1])
        except ValueError:
            raise ModelFormatError(f"{source}:{lineno}: bad box bounds {value!r}") from None
        if not lo < hi:
            raise ModelFormatError(f"{source}:{lineno}: box bounds must satisfy lo < hi")
        box[key] = (lo, hi)

    m = PlantModel(states=tuple(states), params=params, dynamics=tuple(dynamics),
                   outputs=tuple(outputs), functional=functional,
                   disturbances=tuple(disturbances), faults=tuple(faults),
                   box=box, name=source)
    _check_affinity(m)
    return m


def load_model(path) -> PlantModel:
    path = Path(path)
    return parse_model(path.read_text(), source=path.name)


def model_to_text(m: PlantModel) -> str:
    lines = []
    if m.name:
        lines.append(f"# {m.name}")
    lines.append("[states]")
    lines.append(" ".join(m.states))
    if m.params:
        lines.append("")
        lines.append("[params]")
        for k, v in m.params.items():
            lines.append(f"{k} = {v!r}")
    lines.append("")
    lines.append("[dynamics]")
    for s, d in zip(m.states, m.dynamics):
        lines.append(f"{s}' = {to_text(d)}")
    lines.append("")
    lines.append("[outputs]")
    for i, o in enumerate(m.outputs, 1):
        lines.append(f"y{i} = {to_text(o)}")
    lines.append("")
    lines.append("[functional]")
    lines.append(f"z = {to_text(m.functional)}")
    if m.disturbances:
        lines.append("")
        lines.append("[disturbances]")
        lines.append(" ".join(m.disturbances))
    if m.faults:
        lines.append("")
        lines.append("[faults]")
        lines.append(" ".join(m.faults))
    if m.box:
        lines.append("")
        lines.append("[box]")
        for k, (lo, hi) in m.box.items():
            lines.append(f"{k} = {lo!r} .. {hi!r}")
    return "\n".join(lines) + "\n"


def save_model(m: PlantModel, path) -> None:
    Path(path).write_text(model_to_text(m))


def _check_affinity(m: PlantModel, n_samples: int = 40, seed: int = 0) -> None:
    """Reject dynamics/outputs that are not affine in every disturbance and
    fault symbol: all second partials (including mixed ones) over those
    symbols must vanish identically, checked by sampled evaluation."""
    inputs = m.input_symbols()
    if not inputs:
        return
    rng = np.random.default_rng(seed)
    env: dict = dict(m.params)
    for s, (lo, hi) in m.default_box().items():
        env[s] = rng.uniform(lo, hi, n_samples)
    for w in inputs:
        env[w] = rng.uniform(-1.0, 1.0, n_samples)
    labels = [f"dynamics equation for '{s}'" for s in m.states]
    labels += [f"output y{j}" for j in range(1, m.p + 1)]
    for label, e in zip(labels, list(m.dynamics) + list(m.outputs)):
        syms = free_symbols(e)
        for i, a in enumerate(inputs):
            if a not in syms:
                continue
            da = simplify(diff(e, a))
            for b in inputs[i:]:
                d2 = simplify(diff(da, b))
                if d2 == Constant(0.0):
                    continue
                vals = np.broadcast_to(
                    np.asarray(eval_many(d2, env), dtype=float), (n_samples,))
                scale = 1.0 + np.max(np.abs(np.broadcast_to(
                    np.asarray(eval_many(e, env), dtype=float), (n_samples,))))
                if not np.isfinite(vals).all() or np.max(np.abs(vals)) > 1e-9 * scale:
                    raise NonAffineError(label, a if a == b else f"{a}*{b}")


# --------------------------------------------------------------------------
# structure extraction

def extract_structure(m: PlantModel) -> ExtractedStructure:
    """Recover drift, input columns and feedthrough by differentiating the
    declared equations with respect to each disturbance/fault symbol and
    setting all of those symbols to zero afterwards."""
    zeros = {s: 0.0 for s in m.input_symbols()}

    def strip(e: Expr) -> Expr:
        return simplify(subst(e, zeros))

    def column(exprs: Sequence[Expr], sym: str) -> tuple[Expr, ...]:
        return tuple(strip(diff(e, sym)) for e in exprs)

    return ExtractedStructure(
        F=VectorField(m.states, tuple(strip(d) for d in m.dynamics)),
        E=tuple(column(m.dynamics, w) for w in m.disturbances),
        G=tuple(column(m.dynamics, f) for f in m.faults),
        H=tuple(strip(o) for o in m.outputs),
        K=tuple(column(m.outputs, w) for w in m.disturbances),
        J=tuple(column(m.outputs, f) for f in m.faults),
        q=m.functional,
        states=m.states,
        params=dict(m.params),
        box=m.default_box(),
        disturbances=m.disturbances,
        faults=m.faults,
    )


# --------------------------------------------------------------------------
# steady state and deviation coordinates

def find_steady_state(m: PlantModel, guess: Sequence[float],
                      tol: float = 1e-10, max_iter: int = 100) -> OperatingPoint:
    """Damped Newton iteration on the undisturbed drift, with the exact
    symbolic Jacobian.  Steps are halved while the residual increases."""
    zeros = {s: 0.0 for s in m.input_symbols()}
    folded = {**m.params, **zeros}
    fexprs = [simplify(subst(d, folded)) for d in m.dynamics]
    jac = [[simplify(diff(fk, s)) for s in m.states] for fk in fexprs]

    x = np.asarray(guess, dtype=float).copy()
    if x.shape != (m.n,):
        raise ValueError(f"guess must have {m.n} entries")

    def residual(vec: np.ndarray) -> np.ndarray:
        env = dict(zip(m.states, vec))
        return np.array([evaluate(f, env) for f in fexprs])

    r = residual(x)
    res = float(np.max(np.abs(r)))
    for _ in range(max_iter):
        if res <= tol:
            return OperatingPoint(m.states, x, res)
        env = dict(zip(m.states, x))
        jmat = np.array([[evaluate(jkl, env) for jkl in row] for row in jac])
        try:
            step = np.linalg.solve(jmat, -r)
        except np.linalg.LinAlgError:
            raise SteadyStateError(
                f"singular Jacobian at x = {x.tolist()} (residual {res:.3e})") from None
        lam = 1.0
        while True:
            x_new = x + lam * step
            r_new = residual(x_new)
            res_new = float(np.max(np.abs(r_new)))
            if res_new < res or lam < 1e-10:
                break
            lam *= 0.5
        if res_new >= res:
            raise SteadyStateError(
                f"no progress from x = {x.tolist()} (residual {res:.3e})")
        x, r, res = x_new, r_new, res_new
    if res <= tol:
        return OperatingPoint(m.states, x, res)
    raise SteadyStateError(f"did not converge in {max_iter} iterations (residual {res:.3e})")


def to_deviation_form(m: PlantModel, op: OperatingPoint, suffix: str = "'") -> PlantModel:
    """Translate state axes so the operating point sits at the origin.

    New states are the old names with ``suffix`` appended; dynamics become
    the original field evaluated at (deviation + operating point); outputs
    and the functional are shifted by their operating-point values so they
    vanish at the origin.
    """
    if op.states != m.states:
        raise ValueError("operating point states do not match the model")
    new_states = tuple(s + suffix for s in m.states)
    taken = set(m.states) | set(m.params) | set(m.input_symbols())
    for s in new_states:
        if s in taken:
            raise ModelError(f"deviation symbol '{s}' collides with an existing symbol")
    shift = {old: Add(Var(new), Constant(float(v)))
             for old, new, v in zip(m.states, new_states, op.values)}
    base_env = {**m.params, **op.env(), **{s: 0.0 for s in m.input_symbols()}}

    def shifted(e: Expr, recenter: bool) -> Expr:
        out = simplify(subst(e, shift))
        if recenter:
            c = evaluate(e, base_env)
            if c != 0.0:
                out = simplify(Sub(out, Constant(c)))
        return out

    new_box = {}
    for s, new, v in zip(m.states, new_states, op.values):
        if s in m.box:
            lo, hi = m.box[s]
            new_box[new] = (lo - float(v), hi - float(v))
    return PlantModel(
        states=new_states,
        params=dict(m.params),
        dynamics=tuple(shifted(d, recenter=False) for d in m.dynamics),
        outputs=tuple(shifted(o, recenter=True) for o in m.outputs),
        functional=shifted(m.functional, recenter=True),
        disturbances=m.disturbances,
        faults=m.faults,
        box=new_box,
        name=(m.name + " (deviation)") if m.name else "deviation",
    )


# --------------------------------------------------------------------------
# exo-systems and augmentation

def make_exosystem(kind: str, omega: float | None = None,
                   R=None, Q=None) -> ExoSystem:
    """Named fault generators: step, ramp, sine(omega), or custom (R, Q)."""
    if kind == "step":
        return ExoSystem(np.zeros((1, 1)), np.array([1.0]), "step")
    if kind == "ramp":
        return ExoSystem(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([1.0, 0.0]), "ramp")
    if kind == "sine":
        if omega is None or omega == 0.0:
            raise ModelError("sine exo-system requires a nonzero omega")
        w = float(omega)
        return ExoSystem(np.array([[0.0, w], [-w, 0.0]]), np.array([1.0, 0.0]), "sine")
    if kind == "custom":
        if R is None or Q is None:
            raise ModelError("custom exo-system requires R and Q")
        R = np.atleast_2d(np.asarray(R, dtype=float))
        Q = np.atleast_1d(np.asarray(Q, dtype=float)).ravel()
        if R.shape[0] != R.shape[1] or Q.shape[0] != R.shape[0]:
            raise ModelError("custom exo-system needs square R and a matching Q row")
        if not np.any(Q):
            raise ModelError("exo-system output row Q must be nonzero")
        return ExoSystem(R, Q, "custom")
    raise ModelError(f"unknown exo-system kind '{kind}'")


def _linear_combination(coeffs: Sequence[float], names: Sequence[str]) -> Expr:
    terms: list[Expr] = []
    for c, name in zip(coeffs, names):
        c = float(c)
        if c == 0.0:
            continue
        terms.append(Var(name) if c == 1.0 else Mul(Constant(c), Var(name)))
    if not terms:
        return Constant(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = Add(acc, t)
    return acc


def augment_with_exosystem(m: PlantModel, fault: str, exo: ExoSystem,
                           exo_prefix: str = "xo") -> AugmentedModel:
    """Cascade the plant with a fault generator.

    The selected fault symbol is replaced by the exo-system output wherever
    it appears; every other fault symbol becomes a disturbance; the
    functional to estimate becomes the exo-system output.
    """
    if fault not in m.faults:
        raise ModelError(f"unknown fault symbol '{fault}'")
    exo_states = tuple(f"{exo_prefix}{i}" for i in range(1, exo.n_states + 1))
    taken = set(m.states) | set(m.params) | set(m.input_symbols())
    for s in exo_states:
        if s in taken:
            raise ModelError(f"exo-system state '{s}' collides with an existing symbol")

    fault_expr = _linear_combination(exo.Q, exo_states)
    mapping = {fault: fault_expr}
    dynamics = [simplify(subst(d, mapping)) for d in m.dynamics]
    dynamics += [_linear_combination(exo.R[k], exo_states) for k in range(exo.n_states)]
    outputs = tuple(simplify(subst(o, mapping)) for o in m.outputs)
    remaining = tuple(f for f in m.faults if f != fault)

    plant = PlantModel(
        states=m.states + exo_states,
        params=dict(m.params),
        dynamics=tuple(dynamics),
        outputs=outputs,
        functional=fault_expr,
        disturbances=m.disturbances + remaining,
        faults=(),
        box=dict(m.box),
        name=f"{m.name} [{fault}: {exo.kind}]" if m.name else f"[{fault}: {exo.kind}]",
    )
    return AugmentedModel(model=plant, fault=fault, exo=exo, exo_states=exo_states)
