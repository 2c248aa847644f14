"""Matrix-inequality assembly and the barrier/gain feasibility search.

The certificate machinery rests on one master inequality in the barrier
matrix P and the feedback gain F,

    M(P, F) = Ab' P Ab + v * A3' P A3 - P <= 0,
    Ab = A1 + A2(F),  v = (1 - q_phi) / q_phi,

which is exactly the mean-square contraction condition of the lifted loop
(expectation over the downlink indicator of Amat(phi)' P Amat(phi) <= P).
``verify_master_inequality`` evaluates its largest eigenvalue and is the
final arbiter for every (P, F) pair, however it was produced.

Because M is bilinear in (P, F), the search splits it with simplex weights
d1..d5 into per-term bounds, solved in two linear stages: the gain-free
stage picks P from ``A1' P A1 <= d1 P``; the gain stage then solves three
LMIs linear in F (a symmetrised cross bound and two Schur-complement
blocks).  The split is sufficient but far from necessary, so the search
also carries a fallback that fixes candidate gains and solves the master
inequality for P directly; accepted pairs always pass the arbiter.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

try:  # gain candidates; synthesis degrades gracefully without a DARE solve
    from scipy.linalg import solve_discrete_are
except ImportError:  # pragma: no cover
    solve_discrete_are = None

import cvxpy as cp

from .augment import AugmentedSystem, build
from .sysmodel import ChannelSpec, SystemSpec


class ExhaustedSearch(RuntimeError):
    """No candidate produced a pair passing the master inequality."""


@dataclass(frozen=True)
class SolverSettings:
    """Backend knobs; identical settings must give identical outcomes."""

    solver: str = "CLARABEL"
    max_iter: int = 200_000
    tol: float = 1e-8          # acceptance tolerance on the master margin
    eps_pd: float = 1e-6       # strictness margin realizing P > 0
    feas_margin: float = 1e-7  # interior margin requested from LMI solves
    drift_weight: float = 100.0  # noise-drift regularization in the fallback

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverSettings":
        if not d:
            return cls()
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class DeltaWeights:
    """Five split weights on the probability simplex."""

    d1: float
    d2: float
    d3: float
    d4: float
    d5: float

    def __post_init__(self) -> None:
        vals = self.as_tuple()
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"delta weights must lie in [0,1], got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"delta weights must sum to 1, got {sum(vals)!r}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.d1, self.d2, self.d3, self.d4, self.d5)


# fixed ratios splitting the mass left after d1 over (d2, d3, d4, d5);
# the last pattern favors the fluctuation bound, which needs at least
# q_phi * (1 - q_phi) of the budget (see stage two's precheck)
_REST_PATTERNS = (
    (0.25, 0.25, 0.25, 0.25),
    (0.10, 0.20, 0.10, 0.60),
    (0.05, 0.45, 0.05, 0.45),
)


def default_delta_grid(aug: AugmentedSystem) -> list[DeltaWeights]:
    """Small deterministic grid over the weight simplex.

    The d1 levels combine fixed values with levels adapted to the spectral
    radius of the gain-free part: ``A1' P A1 <= d1 P`` is infeasible for any
    d1 below rho(A1)^2, so fixed levels alone would discard every candidate
    on slow plants.
    """
    levels = [0.3, 0.5, 0.7]
    rho2 = float(max(abs(np.linalg.eigvals(aug.A1.constant)))) ** 2
    if rho2 < 1.0:
        for s in (0.25, 0.60):
            levels.append(rho2 + s * (1.0 - rho2))
    out: list[DeltaWeights] = []
    seen = set()
    for d1 in sorted(levels):
        rest = 1.0 - d1
        for pat in _REST_PATTERNS:
            w = (d1, *[rest * r for r in pat])
            # renormalize away float dust so the simplex invariant holds
            total = sum(w)
            w = tuple(v / total for v in w)
            if w in seen:
                continue
            seen.add(w)
            out.append(DeltaWeights(*w))
    return out


@dataclass(frozen=True)
class LmiConstraint:
    """One affine matrix inequality over named decision variables.

    ``matrix_fn`` maps the variable dict to a (symmetrized) matrix
    expression; ``sense`` is ">=0" or "<=0"; ``margin`` shifts the cone
    boundary inward by margin * I.
    """

    label: str
    matrix_fn: Callable[[dict[str, cp.Expression]], cp.Expression]
    sense: str = ">=0"
    margin: float = 0.0


@dataclass(frozen=True)
class FeasibilityOutcome:
    """Result of one feasibility solve."""

    status: str                       # "feasible" | "infeasible" | "unknown"
    point: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


def _sym(expr: cp.Expression) -> cp.Expression:
    return (expr + expr.T) / 2


def solve_feasibility(
    constraints: Sequence[LmiConstraint],
    variables: dict[str, cp.Variable],
    settings: SolverSettings = SolverSettings(),
    objective: cp.Expression | None = None,
) -> FeasibilityOutcome:
    """Decide joint feasibility of affine matrix inequalities.

    Without an explicit objective the solve maximizes a common interior
    slack, which yields points strictly inside the cone and makes the
    post-hoc eigenvalue check meaningful.  Feasible outcomes are re-checked
    numerically: every constraint must hold within the settings tolerance.
    """
    # without an objective, push the point into the interior via a shared slack
    slack = cp.Variable() if objective is None else 0.0
    cons = []
    for c in constraints:
        expr = _sym(c.matrix_fn(variables))
        eye = np.eye(expr.shape[0])
        if c.sense == ">=0":
            cons.append(expr >> (c.margin + slack) * eye)
        elif c.sense == "<=0":
            cons.append(expr << -(c.margin + slack) * eye)
        else:
            raise ValueError(f"unknown sense {c.sense!r}")

    if objective is None:
        cons.append(slack <= 1.0)
        obj = cp.Maximize(slack)
    else:
        obj = cp.Minimize(objective)
    prob = cp.Problem(obj, cons)
    try:
        prob.solve(solver=settings.solver, max_iter=settings.max_iter)
    except cp.error.SolverError as e:
        return FeasibilityOutcome("unknown", diagnostics={"error": str(e)})

    stats = prob.solver_stats
    diagnostics = {
        "solver_status": prob.status,
        "iterations": getattr(stats, "num_iters", None),
    }
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return FeasibilityOutcome("infeasible", diagnostics=diagnostics)
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return FeasibilityOutcome("unknown", diagnostics=diagnostics)

    point = {name: np.asarray(var.value) for name, var in variables.items()
             if var.value is not None}
    if len(point) != len(variables):
        return FeasibilityOutcome("unknown", diagnostics=diagnostics)

    # independent numeric re-check of every constraint at the solution
    residuals = {}
    ok = True
    for c in constraints:
        val = c.matrix_fn({k: v for k, v in point.items()})
        val = np.asarray(val.value if isinstance(val, cp.Expression) else val)
        val = (val + val.T) / 2
        lam = np.linalg.eigvalsh(val)
        resid = float(lam.min() - c.margin) if c.sense == ">=0" else float(-(lam.max() + c.margin))
        residuals[c.label] = resid
        if resid < -settings.tol:
            ok = False
    diagnostics["residuals"] = residuals
    if not ok:
        return FeasibilityOutcome("unknown", point=point, diagnostics=diagnostics)
    return FeasibilityOutcome("feasible", point=point, diagnostics=diagnostics)


def _numeric_affine(am, F: cp.Expression | np.ndarray):
    """Evaluate an AffineMatrix at a cvxpy expression or ndarray gain."""
    out = am.constant
    for sel, right in am.terms:
        out = out + sel @ F @ right
    return out


def stage1_find_P(
    aug: AugmentedSystem,
    d1: float,
    settings: SolverSettings = SolverSettings(),
) -> FeasibilityOutcome:
    """Gain-free stage: find P > 0 with A1' P A1 <= d1 P, trace-normalized.

    Infeasible whenever d1 < rho(A1)^2 (eigenvector argument), which is
    reported without invoking the backend.
    """
    if not 0.0 < d1 < 1.0:
        raise ValueError(f"d1 must lie in (0,1), got {d1}")
    kappa = aug.dims.kappa
    A1 = aug.A1.constant
    rho2 = float(max(abs(np.linalg.eigvals(A1)))) ** 2
    if rho2 > d1 * (1.0 + 1e-12):
        return FeasibilityOutcome(
            "infeasible",
            diagnostics={"reason": f"d1={d1} below spectral floor rho(A1)^2={rho2:.6g}"},
        )

    P = cp.Variable((kappa, kappa), symmetric=True)
    cons = [
        LmiConstraint("P_pd", lambda v: v["P"] - settings.eps_pd * np.eye(kappa)),
        LmiConstraint("stage1", lambda v: A1.T @ v["P"] @ A1 - d1 * v["P"], sense="<=0"),
        # cap the scale so the interior-slack objective is bounded
        LmiConstraint("P_cap", lambda v: kappa * np.eye(kappa) - v["P"]),
    ]
    out = solve_feasibility(cons, {"P": P}, settings)
    if not out.feasible:
        return out
    Pv = out.point["P"]
    Pv = (Pv + Pv.T) / 2
    Pv *= kappa / np.trace(Pv)  # pin the scale the inequalities leave free
    return FeasibilityOutcome("feasible", point={"P": Pv}, diagnostics=out.diagnostics)


def stage2_find_F(
    aug: AugmentedSystem,
    P: np.ndarray,
    d: DeltaWeights,
    settings: SolverSettings = SolverSettings(),
) -> FeasibilityOutcome:
    """Gain stage: with P fixed, solve the three split inequalities for F.

    (i)   (d2+d4) P - A1' P A2(F) - A2(F)' P A1 >= 0          (cross term)
    (ii)  [[P, P A2(F)], [A2(F)' P, d3 P]] >= 0               (Schur, mean)
    (iii) [[P, P A3(F)], [A3(F)' P, d5 q/(1-q) P]] >= 0       (Schur, fluctuation)

    The fluctuation bound is infeasible for any F when
    d5 < q(1-q): the held-input direction is a fixed eigenvector of A3
    with eigenvalue q.  That floor is reported without a solve.
    """
    q = aug.channel.q_phi
    kappa = aug.dims.kappa
    P = (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T) / 2
    lam_min = float(np.linalg.eigvalsh(P).min())
    if lam_min <= 0:
        raise ValueError("stage-two barrier matrix must be positive definite")

    floor = q * (1.0 - q)
    if d.d5 < floor * (1.0 - 1e-12):
        return FeasibilityOutcome(
            "infeasible",
            diagnostics={"reason": f"d5={d.d5:.6g} below fluctuation floor q(1-q)={floor:.6g}"},
        )

    A1 = aug.A1.constant
    F = cp.Variable((aug.dims.m, aug.dims.n))

    def cross(v):
        A2e = _numeric_affine(aug.A2, v["F"])
        return (d.d2 + d.d4) * P - A1.T @ P @ A2e - A2e.T @ P @ A1

    def schur_mean(v):
        A2e = _numeric_affine(aug.A2, v["F"])
        return cp.bmat([[P, P @ A2e], [A2e.T @ P, d.d3 * P]])

    def schur_fluct(v):
        A3e = _numeric_affine(aug.A3, v["F"])
        return cp.bmat([[P, P @ A3e], [A3e.T @ P, (d.d5 * q / (1.0 - q)) * P]])

    cons = [
        LmiConstraint("cross", cross),
        LmiConstraint("schur_mean", schur_mean),
        LmiConstraint("schur_fluct", schur_fluct),
    ]
    return solve_feasibility(cons, {"F": F}, settings)


def verify_master_inequality(
    aug: AugmentedSystem,
    P: np.ndarray,
    F: np.ndarray,
    tol: float = 1e-8,
) -> float:
    """Largest eigenvalue of the master matrix M(P, F); valid iff <= tol.

    This check is authoritative: certificates are only ever emitted for
    pairs whose margin passes it, regardless of which search path produced
    them.
    """
    P = np.asarray(P, dtype=float)
    F = np.asarray(F, dtype=float)
    if P.shape != (aug.dims.kappa, aug.dims.kappa):
        raise ValueError(f"P must be {aug.dims.kappa} x {aug.dims.kappa}, got {P.shape}")
    if F.shape != (aug.dims.m, aug.dims.n):
        raise ValueError(f"F must be {aug.dims.m} x {aug.dims.n}, got {F.shape}")
    del tol  # the caller owns the comparison; kept for signature clarity
    Ab = aug.mean_matrix(F)
    A3 = aug.A3.value(F)
    M = Ab.T @ P @ Ab + aug.zeta_variance() * (A3.T @ P @ A3) - P
    M = (M + M.T) / 2
    return float(np.linalg.eigvalsh(M).max())


def solve_master_barrier(
    aug: AugmentedSystem,
    F: np.ndarray,
    settings: SolverSettings = SolverSettings(),
) -> FeasibilityOutcome:
    """Fallback barrier solve: fix F, treat the master inequality as an LMI in P.

    Minimizes a conditioning bound plus a weighted noise-drift term
    (trace of D' P D Sigma_w); both directly control how tight the level
    sets around P can be drawn downstream.  Scale is pinned afterwards by
    trace normalization.
    """
    kappa = aug.dims.kappa
    F = np.asarray(F, dtype=float)
    Ab = aug.mean_matrix(F)
    A3 = aug.A3.value(F)
    v = aug.zeta_variance()
    Sig = aug.noise_cov_stacked()
    Dm = aug.D

    P = cp.Variable((kappa, kappa), symmetric=True)
    t = cp.Variable()
    eye = np.eye(kappa)
    cons = [
        P >> eye,
        P << t * eye,
        _sym(Ab.T @ P @ Ab + v * (A3.T @ P @ A3) - P) << -settings.feas_margin * eye,
    ]
    objective = t + settings.drift_weight * cp.trace(Dm.T @ P @ Dm @ Sig)
    prob = cp.Problem(cp.Minimize(objective), cons)
    try:
        prob.solve(solver=settings.solver, max_iter=settings.max_iter)
    except cp.error.SolverError as e:
        return FeasibilityOutcome("unknown", diagnostics={"error": str(e)})
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return FeasibilityOutcome("infeasible", diagnostics={"solver_status": prob.status})
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or P.value is None:
        return FeasibilityOutcome("unknown", diagnostics={"solver_status": prob.status})
    Pv = (P.value + P.value.T) / 2
    Pv *= kappa / np.trace(Pv)
    return FeasibilityOutcome(
        "feasible", point={"P": Pv}, diagnostics={"solver_status": prob.status}
    )


def default_gain_candidates(sys: SystemSpec) -> list[np.ndarray]:
    """Deterministic stabilizing-gain family for the fallback search.

    Scaled discrete-time LQR gains bridge gentle to aggressive feedback;
    the zero gain closes the list for plants that need none.
    """
    cands: list[np.ndarray] = []
    if solve_discrete_are is not None:
        for r in (1.0, 3.0):
            try:
                S = solve_discrete_are(sys.A, sys.B, np.eye(sys.n), r * np.eye(sys.m))
                K = np.linalg.solve(r * np.eye(sys.m) + sys.B.T @ S @ sys.B,
                                    sys.B.T @ S @ sys.A)
            except Exception:
                continue
            for g in (0.6, 0.45, 1.0, 0.3):
                cands.append(-g * K)
    cands.append(np.zeros((sys.m, sys.n)))
    # drop near-duplicates while preserving order
    out: list[np.ndarray] = []
    for F in cands:
        if not any(np.allclose(F, G, atol=1e-12) for G in out):
            out.append(F)
    return out


@dataclass(frozen=True)
class DeltaSearchConfig:
    """Search-space description for the barrier/gain computation."""

    delta_candidates: tuple[DeltaWeights, ...] | None = None
    gain_candidates: tuple[np.ndarray, ...] | None = None
    use_master_fallback: bool = True
    settings: SolverSettings = SolverSettings()

    @classmethod
    def from_dict(cls, d: dict | None) -> "DeltaSearchConfig":
        if not d:
            return cls()
        settings = SolverSettings.from_dict(d)
        deltas = None
        if d.get("delta_grid"):
            deltas = tuple(DeltaWeights(*row) for row in d["delta_grid"])
        gains = None
        if d.get("gain_candidates"):
            gains = tuple(np.array(g, dtype=float) for g in d["gain_candidates"])
        return cls(
            delta_candidates=deltas,
            gain_candidates=gains,
            use_master_fallback=bool(d.get("master_fallback", True)),
            settings=settings,
        )


@dataclass(frozen=True)
class SynthesisResult:
    """Accepted barrier/gain pair with its provenance."""

    P: np.ndarray
    F: np.ndarray
    deltas: DeltaWeights | None
    margin: float
    method: str  # "delta_split" | "master_fallback"
    attempts: tuple[str, ...] = ()


def find_barrier_and_gain(
    sys: SystemSpec,
    ch: ChannelSpec,
    search: DeltaSearchConfig = DeltaSearchConfig(),
) -> SynthesisResult:
    """Search for a (P, F) pair passing the master inequality.

    Phase one walks the split-weight grid: gain-free stage, then gain
    stage, then the master check.  Phase two (fallback) fixes candidate
    gains -- stage-two best-effort gains first, then the LQR family --
    and solves the master inequality for P directly.  The first pair that
    the arbiter accepts wins; candidate order is deterministic, so the
    result is too.
    """
    aug = build(sys, ch)
    settings = search.settings
    tol = settings.tol
    log: list[str] = []

    deltas = (list(search.delta_candidates) if search.delta_candidates is not None
              else default_delta_grid(aug))
    salvaged_gains: list[np.ndarray] = []

    for d in deltas:
        s1 = stage1_find_P(aug, d.d1, settings)
        if not s1.feasible:
            log.append(f"delta {d.as_tuple()}: stage1 {s1.status}")
            continue
        P = s1.point["P"]
        s2 = stage2_find_F(aug, P, d, settings)
        if not s2.feasible:
            log.append(f"delta {d.as_tuple()}: stage2 {s2.status}")
            if "F" in s2.point:
                salvaged_gains.append(np.asarray(s2.point["F"]))
            continue
        F = s2.point["F"]
        margin = verify_master_inequality(aug, P, F)
        log.append(f"delta {d.as_tuple()}: margin {margin:.3e}")
        if margin <= tol:
            return SynthesisResult(P=P, F=F, deltas=d, margin=margin,
                                   method="delta_split", attempts=tuple(log))
        salvaged_gains.append(F)

    if search.use_master_fallback:
        gains = (list(search.gain_candidates) if search.gain_candidates is not None
                 else salvaged_gains + default_gain_candidates(sys))
        for i, F in enumerate(gains):
            F = np.asarray(F, dtype=float)
            if F.shape != (sys.m, sys.n):
                raise ValueError(f"gain candidate {i} has shape {F.shape}, "
                                 f"expected {(sys.m, sys.n)}")
            out = solve_master_barrier(aug, F, settings)
            if not out.feasible:
                log.append(f"fallback gain {i}: {out.status}")
                continue
            P = out.point["P"]
            margin = verify_master_inequality(aug, P, F)
            log.append(f"fallback gain {i}: margin {margin:.3e}")
            if margin <= tol:
                return SynthesisResult(P=P, F=F, deltas=None, margin=margin,
                                       method="master_fallback", attempts=tuple(log))

    raise ExhaustedSearch(
        "no split weights or gain candidate produced a pair passing the master "
        "inequality; the delay/loss regime may exceed what the plant tolerates\n"
        + "\n".join(log)
    )


def worker_count() -> int:
    """Worker cap for parallel sections; NETCBC_THREADS overrides."""
    env = os.environ.get("NETCBC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)
