"""Functional observer design with eigenvalue assignment and disturbance
decoupling.

The observer has linear dynamics driven by the measured outputs,

    d(xi)/dt = A xi + B y,      zhat = C xi + D y,

and estimates the scalar functional z = q(x) through a transformation map
T(x) satisfying  dT/dx . F = A T + B H  and  q = C T + D H.  Existence at a
requested eigenvalue set reduces to a set of identities that are *linear*
in the unknown output-combination rows beta_0 ... beta_v; those identities
are assembled symbolically (via Lie derivatives of the outputs and the
functional), sampled on a box, and solved as a least-squares system.  The
minimum-norm solution is returned together with the dimension of the
solution space: rank deficiency is not an error, it means a whole family of
valid observers exists.

Disturbance decoupling adds, per disturbance channel, one identity per
derivative order plus a feedthrough annihilation row; a design that passes
them has an estimation error completely unaffected by the unknown inputs.
For fault estimation the same machinery runs on the exo-system-augmented
plant, whose extracted structure already carries the cascade drift and the
fault feedthrough.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .expr import (Constant, Expr, Mul, ParseError, Var, VectorField, diff,
                   eval_many, lie, parse, simplify, to_text)
from .model import (AugmentedModel, ExoSystem, ExtractedStructure, ModelError,
                    PlantModel, augment_with_exosystem, extract_structure,
                    load_model, split_sections)

__all__ = [
    "DesignSpec", "AlphaCoeffs", "ConditionRow", "ConditionSystem",
    "BetaSolution", "ObserverRealization", "ConditionReport", "DesignResult",
    "alphas_from_eigenvalues", "companion_matrix", "assemble_conditions",
    "solve_betas", "construct_observer", "verify_conditions",
    "design_end_to_end", "save_observer", "load_observer",
]


@dataclass(frozen=True)
class DesignSpec:
    """Design inputs: observer order, assigned eigenvalues, sampling setup.

    Eigenvalues are inputs chosen by the user (they are never decision
    variables); the set must be closed under conjugation with all real
    parts negative.  ``n_samples`` defaults to 20 unknowns' worth of
    sample points; ``box`` overrides the model's sampling box per state.
    """
    order: int = 1
    eigenvalues: tuple = (-1.0,)
    n_samples: int | None = None
    box: Mapping[str, tuple[float, float]] | None = None
    tol: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class AlphaCoeffs:
    """Monic characteristic polynomial coefficients a_1 ... a_v."""
    values: tuple[float, ...]

    @property
    def v(self) -> int:
        return len(self.values)


def alphas_from_eigenvalues(eigenvalues) -> AlphaCoeffs:
    """Real monic polynomial with the requested roots, by convolution of
    linear factors (real roots) and quadratic factors (conjugate pairs)."""
    eigs = [complex(x) for x in eigenvalues]
    if not eigs:
        raise ValueError("at least one eigenvalue is required")
    for lam in eigs:
        if lam.real >= 0.0:
            raise ValueError(f"eigenvalue {lam} does not have negative real part")
    reals = [lam.real for lam in eigs if lam.imag == 0.0]
    complexes = [lam for lam in eigs if lam.imag != 0.0]
    poly = np.array([1.0])
    for lam in reals:
        poly = np.convolve(poly, [1.0, -lam])
    while complexes:
        lam = complexes.pop(0)
        conj_idx = None
        for i, mu in enumerate(complexes):
            if abs(mu - lam.conjugate()) <= 1e-12 * (1.0 + abs(lam)):
                conj_idx = i
                break
        if conj_idx is None:
            raise ValueError(f"eigenvalue set is not closed under conjugation: {lam}")
        complexes.pop(conj_idx)
        poly = np.convolve(poly, [1.0, -2.0 * lam.real, abs(lam) ** 2])
    return AlphaCoeffs(tuple(float(c) for c in poly[1:]))


def companion_matrix(alphas: AlphaCoeffs) -> np.ndarray:
    """Companion realization: subdiagonal of ones, last column -a_{v-i}."""
    v = alphas.v
    A = np.zeros((v, v))
    for i in range(1, v):
        A[i, i - 1] = 1.0
    for i in range(v):
        A[i, v - 1] = -alphas.values[v - 1 - i]
    return A


# --------------------------------------------------------------------------
# condition assembly

@dataclass(frozen=True)
class ConditionRow:
    """One scalar identity, linear in the unknown rows: sum over (l, j) of
    coeffs[(l, j)] * beta_{l j} must equal ``known`` for every state."""
    label: str
    known: Expr
    coeffs: dict[tuple[int, int], Expr]


@dataclass(frozen=True)
class ConditionSystem:
    rows: tuple[ConditionRow, ...]
    v: int
    p: int
    states: tuple[str, ...]
    params: dict[str, float]
    box: dict[str, tuple[float, float]]
    fault_mode: bool = False

    @property
    def n_unknowns(self) -> int:
        return (self.v + 1) * self.p


def _alpha_values(alphas) -> tuple[float, ...]:
    if isinstance(alphas, AlphaCoeffs):
        return alphas.values
    return tuple(float(a) for a in alphas)


def _weighted_sum(chain: Sequence[Expr], weights: Sequence[float]) -> Expr:
    """chain[0] + weights[0]*chain[1] + weights[1]*chain[2] + ..."""
    acc = chain[0]
    for w, e in zip(weights, chain[1:]):
        if w == 0.0:
            continue
        acc = acc + Mul(Constant(w), e)
    return simplify(acc)


def assemble_conditions(struct: ExtractedStructure, v: int, alphas,
                        decouple: bool = True,
                        fault_mode: bool = False) -> ConditionSystem:
    """Build every design identity as a row linear in the unknown rows.

    The base row matches the order-v derivative chain of the functional
    against the same chain of the outputs.  With decoupling, each
    disturbance channel adds one row per order (mixing the channel
    derivative of the output chain with the feedthrough) plus one direct
    feedthrough annihilation row.  For a fault-augmented plant the
    extracted structure already contains the cascade drift and fault
    feedthrough, so the same assembly applies; ``fault_mode`` is recorded
    for provenance.
    """
    avals = _alpha_values(alphas)
    if len(avals) != v:
        raise ValueError(f"expected {v} polynomial coefficients, got {len(avals)}")
    F = struct.F
    p = struct.p

    LH: list[list[Expr]] = [list(struct.H)]
    Lq: list[Expr] = [simplify(struct.q)]
    for k in range(1, v + 1):
        LH.append([lie(h, F, 1) for h in LH[k - 1]])
        Lq.append(lie(Lq[k - 1], F, 1))

    rows: list[ConditionRow] = []
    # known side: L^v q + a_1 L^{v-1} q + ... + a_v q
    known_a = _weighted_sum([Lq[v - k] for k in range(v + 1)], avals)
    coeffs_a = {(l, j): LH[v - l][j] for l in range(v + 1) for j in range(p)}
    rows.append(ConditionRow("chain", known_a, coeffs_a))

    if decouple:
        for i, wname in enumerate(struct.disturbances):
            Ei = VectorField(struct.states, struct.E[i])
            LE_LH = [[lie(e, Ei, 1) for e in LH[k]] for k in range(v)]
            LE_Lq = [lie(Lq[k], Ei, 1) for k in range(v)]
            for kappa in range(1, v + 1):
                mi = v - kappa
                known = _weighted_sum([LE_Lq[mi - k] for k in range(mi + 1)], avals)
                coeffs: dict[tuple[int, int], Expr] = {}
                for l in range(mi + 1):
                    for j in range(p):
                        coeffs[(l, j)] = LE_LH[mi - l][j]
                for j in range(p):
                    coeffs[(mi + 1, j)] = struct.K[i][j]
                rows.append(ConditionRow(f"decoupling[{wname}][{kappa}]", known, coeffs))
            rows.append(ConditionRow(
                f"feedthrough[{wname}]", Constant(0.0),
                {(0, j): struct.K[i][j] for j in range(p)}))

    return ConditionSystem(rows=tuple(rows), v=v, p=p, states=struct.states,
                           params=dict(struct.params), box=dict(struct.box),
                           fault_mode=fault_mode)


# --------------------------------------------------------------------------
# sampled least-squares solve

@dataclass(frozen=True)
class BetaSolution:
    """Minimum-norm sampled least-squares solution for the unknown rows.

    ``feasible`` compares the residual on fresh verification samples
    against the tolerance; an infeasible outcome is returned, not raised.
    ``nullspace_dim`` > 0 means a family of valid observers exists and the
    minimum-norm member was picked.
    """
    betas: np.ndarray
    training_residual: float
    verification_residual: float
    nullspace_dim: int
    feasible: bool
    tol: float
    rhs_scale: float


def _sample_env(system: ConditionSystem, spec: DesignSpec, rng, n: int) -> dict:
    box = dict(system.box)
    if spec.box:
        box.update(spec.box)
    env: dict = dict(system.params)
    for s in system.states:
        lo, hi = box.get(s, (-1.0, 1.0))
        env[s] = rng.uniform(lo, hi, n)
    return env


def _stack(system: ConditionSystem, env: dict, n: int) -> tuple[np.ndarray, np.ndarray]:
    p = system.p
    M = np.zeros((len(system.rows) * n, system.n_unknowns))
    r = np.zeros(len(system.rows) * n)

    def values(e: Expr) -> np.ndarray:
        out = np.broadcast_to(np.asarray(eval_many(e, env), dtype=float), (n,))
        if not np.isfinite(out).all():
            raise ModelError(
                "condition row evaluation produced non-finite values; "
                "adjust the sampling box")
        return out

    for ri, row in enumerate(system.rows):
        sl = slice(ri * n, (ri + 1) * n)
        r[sl] = values(row.known)
        for (l, j), ce in row.coeffs.items():
            if ce == Constant(0.0):
                continue
            M[sl, l * p + j] = values(ce)
    return M, r


def solve_betas(system: ConditionSystem, spec: DesignSpec) -> BetaSolution:
    """Sample the condition rows on the box and solve for the unknown rows.

    Draws N seeded sample points, stacks every row at every point into one
    linear system and takes the minimum-norm least-squares solution; then
    re-checks on N fresh points so a rank-deficient training sample cannot
    fake feasibility.
    """
    n_unknowns = system.n_unknowns
    n = spec.n_samples if spec.n_samples is not None else 20 * n_unknowns
    if n < 2 * n_unknowns:
        raise ValueError(f"need at least {2 * n_unknowns} samples, got {n}")
    rng = np.random.default_rng(spec.seed)
    M, r = _stack(system, _sample_env(system, spec, rng, n), n)
    beta, _, rank, _ = np.linalg.lstsq(M, r, rcond=None)
    training = float(np.max(np.abs(M @ beta - r), initial=0.0))
    Mv, rv = _stack(system, _sample_env(system, spec, rng, n), n)
    verification = float(np.max(np.abs(Mv @ beta - rv), initial=0.0))
    rhs_scale = float(np.max(np.abs(rv), initial=0.0))
    return BetaSolution(
        betas=beta.reshape(system.v + 1, system.p),
        training_residual=training,
        verification_residual=verification,
        nullspace_dim=n_unknowns - int(rank),
        feasible=bool(verification <= spec.tol * (1.0 + rhs_scale)),
        tol=spec.tol,
        rhs_scale=rhs_scale,
    )


# --------------------------------------------------------------------------
# observer realization

@dataclass(frozen=True, eq=False)
class ObserverRealization:
    """Companion-form observer (A, B, C, D) with its transformation map T.

    The last entry of T is always the functional minus the zeroth output
    combination; C picks it out, so zhat = C xi + D y reconstructs the
    functional whenever xi tracks T(x).
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    T: tuple[Expr, ...]
    v: int
    alphas: tuple[float, ...]
    betas: np.ndarray
    provenance: str
    states: tuple[str, ...]

    @property
    def p(self) -> int:
        return self.B.shape[1]


def construct_observer(struct: ExtractedStructure, v: int, alphas,
                       betas, provenance: str = "plain") -> ObserverRealization:
    """Realize the observer from solved (or user-supplied) rows.

    A is the companion form of the assigned polynomial, C picks the last
    transformation component, D is the zeroth row, and the k-th row of B is
    beta_{v-k+1} - a_{v-k+1} beta_0.  The transformation map entries chain
    the functional's derivatives against the output combinations.
    """
    avals = _alpha_values(alphas)
    if len(avals) != v:
        raise ValueError(f"expected {v} polynomial coefficients for order {v}")
    beta = np.asarray(betas, dtype=float)
    if beta.shape != (v + 1, struct.p):
        raise ValueError(
            f"betas must have shape ({v + 1}, {struct.p}), got {beta.shape}")
    alpha = AlphaCoeffs(avals)
    A = companion_matrix(alpha)
    B = np.array([beta[v - k + 1] - avals[v - k] * beta[0] for k in range(1, v + 1)])
    C = np.zeros((1, v))
    C[0, v - 1] = 1.0
    D = beta[0:1].copy()

    F = struct.F
    LH: list[list[Expr]] = [list(struct.H)]
    Lq: list[Expr] = [simplify(struct.q)]
    for k in range(1, v):
        LH.append([lie(h, F, 1) for h in LH[k - 1]])
        Lq.append(lie(Lq[k - 1], F, 1))

    T: list[Expr] = []
    for k in range(1, v + 1):
        mi = v - k
        t = _weighted_sum([Lq[mi - i] for i in range(mi + 1)], avals)
        for l in range(mi + 1):
            for j in range(struct.p):
                c = beta[l, j]
                if c == 0.0:
                    continue
                t = t - Mul(Constant(float(c)), LH[mi - l][j])
        T.append(simplify(t))

    return ObserverRealization(A=A, B=B, C=C, D=D, T=tuple(T), v=v,
                               alphas=avals, betas=beta,
                               provenance=provenance, states=struct.states)


# --------------------------------------------------------------------------
# numeric verification of the defining identities

@dataclass(frozen=True)
class ConditionReport:
    """Per-sample residuals of the four identity families:

    - ``dynamics``:     dT/dx . F - A T - B H
    - ``functional``:   q - C T - D H
    - ``decoupling``:   dT/dx . E_i - B K_i       (per channel)
    - ``feedthrough``:  D K_i                     (per channel)
    """
    residuals: dict[str, np.ndarray]
    n_samples: int

    def max_abs(self, family: str | None = None) -> float:
        if family is not None:
            arr = self.residuals[family]
            return float(np.max(np.abs(arr), initial=0.0))
        return max((self.max_abs(f) for f in self.residuals), default=0.0)

    def rms(self, family: str) -> float:
        arr = self.residuals[family]
        return float(np.sqrt(np.mean(arr ** 2))) if arr.size else 0.0

    def summary(self) -> str:
        lines = []
        for fam in ("dynamics", "functional", "decoupling", "feedthrough"):
            if fam in self.residuals:
                lines.append(f"{fam:12s} max |res| = {self.max_abs(fam):.3e}"
                             f"   rms = {self.rms(fam):.3e}")
        return "\n".join(lines)


def verify_conditions(struct: ExtractedStructure, observer,
                      n_samples: int = 100, seed: int = 777,
                      box: Mapping | None = None) -> ConditionReport:
    """Numerically evaluate the defining identities at random samples.

    ``observer`` is either an ObserverRealization or an (alphas, betas)
    pair, in which case the realization is constructed first.  The
    derivative of T is computed symbolically.
    """
    if not isinstance(observer, ObserverRealization):
        alphas, betas = observer
        betas = np.asarray(betas, dtype=float)
        observer = construct_observer(struct, betas.shape[0] - 1, alphas, betas)
    obs = observer
    states = struct.states
    dT = [[simplify(diff(t, s)) for s in states] for t in obs.T]

    def dot_field(row: Sequence[Expr], col: Sequence[Expr]) -> Expr:
        acc: Expr = Constant(0.0)
        for a, b in zip(row, col):
            acc = acc + Mul(a, b)
        return simplify(acc)

    def lin_comb(coeffs: Sequence[float], exprs: Sequence[Expr]) -> Expr:
        acc: Expr = Constant(0.0)
        for c, e in zip(coeffs, exprs):
            if c == 0.0:
                continue
            acc = acc + Mul(Constant(float(c)), e)
        return simplify(acc)

    dyn_rows = []
    for r in range(obs.v):
        e = dot_field(dT[r], struct.F.exprs)
        e = e - lin_comb(obs.A[r], obs.T) - lin_comb(obs.B[r], struct.H)
        dyn_rows.append(simplify(e))
    func_row = simplify(struct.q - lin_comb(obs.C[0], obs.T)
                        - lin_comb(obs.D[0], struct.H))
    dec_rows = []
    feed_rows = []
    for i in range(struct.m):
        for r in range(obs.v):
            e = dot_field(dT[r], struct.E[i]) - lin_comb(obs.B[r], struct.K[i])
            dec_rows.append(simplify(e))
        feed_rows.append(lin_comb(obs.D[0], struct.K[i]))

    rng = np.random.default_rng(seed)
    sample_box = dict(struct.box)
    if box:
        sample_box.update(box)
    env: dict = dict(struct.params)
    for s in states:
        lo, hi = sample_box.get(s, (-1.0, 1.0))
        env[s] = rng.uniform(lo, hi, n_samples)

    def sample(exprs: Sequence[Expr]) -> np.ndarray:
        if not exprs:
            return np.zeros((0, n_samples))
        return np.vstack([
            np.broadcast_to(np.asarray(eval_many(e, env), dtype=float), (n_samples,))
            for e in exprs])

    return ConditionReport(
        residuals={
            "dynamics": sample(dyn_rows),
            "functional": sample([func_row]),
            "decoupling": sample(dec_rows),
            "feedthrough": sample(feed_rows),
        },
        n_samples=n_samples,
    )


# --------------------------------------------------------------------------
# end-to-end pipeline

@dataclass(frozen=True)
class DesignResult:
    """Outcome of the extract / assemble / solve / realize / verify chain.

    When infeasible at every tried order, ``observer`` and ``report`` are
    None and ``attempts`` holds the per-order verification residuals.
    """
    feasible: bool
    observer: ObserverRealization | None
    report: ConditionReport | None
    solution: BetaSolution | None
    attempts: tuple[tuple[int, float], ...]
    model: PlantModel
    struct: ExtractedStructure


def design_end_to_end(model, spec: DesignSpec, decouple: bool = True,
                      fault: str | None = None, exo: ExoSystem | None = None,
                      v_max: int | None = None) -> DesignResult:
    """Full pipeline: load, optionally augment with a fault exo-system,
    extract structure, assemble and solve the conditions, realize and
    verify the observer.  If the solve is infeasible at the requested
    order, retries at increasing orders up to ``v_max``; the eigenvalue
    list is extended by repeating its last entry.
    """
    if isinstance(model, (str, Path)):
        model = load_model(model)
    provenance = "decoupled" if decouple else "plain"
    if isinstance(model, AugmentedModel):
        plant = model.model
        provenance = "fault"
    elif fault is not None:
        if exo is None:
            raise ValueError("fault selection requires an exo-system")
        plant = augment_with_exosystem(model, fault, exo).model
        provenance = "fault"
    else:
        plant = model
    struct = extract_structure(plant)

    if len(spec.eigenvalues) != spec.order:
        raise ValueError(
            f"spec lists {len(spec.eigenvalues)} eigenvalues for order {spec.order}")
    v_top = v_max if v_max is not None else spec.order
    attempts: list[tuple[int, float]] = []
    last_solution = None
    for v in range(spec.order, v_top + 1):
        eigs = tuple(spec.eigenvalues) + (spec.eigenvalues[-1],) * (v - spec.order)
        alphas = alphas_from_eigenvalues(eigs)
        system = assemble_conditions(struct, v, alphas, decouple=decouple,
                                     fault_mode=(provenance == "fault"))
        solution = solve_betas(system, spec)
        attempts.append((v, solution.verification_residual))
        last_solution = solution
        if solution.feasible:
            observer = construct_observer(struct, v, alphas, solution.betas,
                                          provenance)
            report = verify_conditions(struct, observer, seed=spec.seed + 1)
            return DesignResult(True, observer, report, solution,
                                tuple(attempts), plant, struct)
    return DesignResult(False, None, None, last_solution, tuple(attempts),
                        plant, struct)


# --------------------------------------------------------------------------
# observer persistence

def save_observer(obs: ObserverRealization, path) -> None:
    """Write the realization as a plain-text document (full precision)."""
    lines = ["# functional observer document", "[observer]"]
    lines.append(f"v = {obs.v}")
    lines.append(f"p = {obs.p}")
    lines.append(f"provenance = {obs.provenance}")
    lines.append("states = " + " ".join(obs.states))
    lines.append("")
    lines.append("[alphas]")
    lines.extend(repr(a) for a in obs.alphas)
    lines.append("")
    lines.append("[betas]")
    lines.extend(" ".join(repr(float(x)) for x in row) for row in obs.betas)
    for name, mat in (("A", obs.A), ("B", obs.B), ("C", obs.C), ("D", obs.D)):
        lines.append("")
        lines.append(f"[{name.lower()}mat]")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in mat)
    lines.append("")
    lines.append("[tmap]")
    lines.extend(to_text(t) for t in obs.T)
    Path(path).write_text("\n".join(lines) + "\n")


def load_observer(path, params: Mapping[str, float] | None = None) -> ObserverRealization:
    """Read an observer document; ``params`` supplies the parameter symbols
    that may appear in the transformation map expressions."""
    path = Path(path)
    secs = split_sections(path.read_text(), source=path.name)

    def matrix(section: str) -> np.ndarray:
        return np.array([[float(x) for x in line.split()] for _, line in secs[section]])

    header = dict(_kv(line) for _, line in secs["observer"])
    v = int(header["v"])
    states = tuple(header["states"].split())
    alphas = tuple(float(line) for _, line in secs["alphas"])
    betas = matrix("betas")
    symbols = set(states) | set(params or {})
    T = []
    for lineno, line in secs["tmap"]:
        try:
            T.append(parse(line, symbols))
        except ParseError as exc:
            raise ModelError(f"{path.name}:{lineno}: {exc}") from None
    return ObserverRealization(A=matrix("amat"), B=matrix("bmat"),
                               C=matrix("cmat"), D=matrix("dmat"),
                               T=tuple(T), v=v, alphas=alphas, betas=betas,
                               provenance=header.get("provenance", "plain"),
                               states=states)


def _kv(line: str) -> tuple[str, str]:
    key, _, value = line.partition("=")
    return key.strip(), value.strip()
