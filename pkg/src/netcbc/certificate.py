"""Quadratic barrier certificates and the end-to-end synthesis pipeline.

A certificate is a positive-definite matrix P together with a gain F such
that the barrier ``bar(Z) = Z' P Z`` satisfies, over the lifted state space:

  * ``bar <= eta`` whenever every state-like block lies in the initial box
    and every input-like block lies in the input box,
  * ``bar >= beta`` (per unsafe region) under the analogous inclusion,
  * one-step expected increase at most ``c`` everywhere.

Those three constants combine into the horizon-T violation bound
``xi = min(1, (eta + c T) / beta)``; the certified guarantee is ``1 - xi``.
Levels are computed in closed form from coordinate-wise box extrema, the
drift from the trace formula, and the expected one-step barrier value has
an exact expression because the downlink fluctuation has zero mean.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .augment import AugDims, AugmentedSystem, build
from .lmi import (
    DeltaSearchConfig,
    DeltaWeights,
    find_barrier_and_gain,
    verify_master_inequality,
)
from .sysmodel import ChannelSpec, SafetySpec, SystemSpec, validate


class BetaNotAboveEta(ValueError):
    """The unsafe level does not dominate the initial level."""


def barrier_value(P: np.ndarray, z: np.ndarray) -> float:
    P = np.asarray(P, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    if P.shape != (z.size, z.size):
        raise ValueError(f"P {P.shape} does not match vector of length {z.size}")
    return float(z @ P @ z)


def _state_input_extremum(spec: SafetySpec, dims: AugDims, state_box, maximize: bool) -> float:
    """Extremum of ||Z||^2 over the block product of boxes.

    All tau+1 plant blocks and both controller blocks range over
    ``state_box``; all tau+2 applied-input blocks and tau+1 commanded-input
    blocks range over the input box.
    """
    n_state_blocks = (dims.tau + 1) + 2
    n_input_blocks = (dims.tau + 2) + (dims.tau + 1)
    if maximize:
        return n_state_blocks * state_box.max_sq_norm() + n_input_blocks * spec.U.max_sq_norm()
    return n_state_blocks * state_box.min_sq_norm() + n_input_blocks * spec.U.min_sq_norm()


def initial_level(P: np.ndarray, spec: SafetySpec, dims: AugDims) -> float:
    """Upper bound eta on the barrier over the initial product set."""
    lam_max = float(np.linalg.eigvalsh((P + P.T) / 2).max())
    return lam_max * _state_input_extremum(spec, dims, spec.X0, maximize=True)


def unsafe_level(P: np.ndarray, spec: SafetySpec, dims: AugDims) -> tuple[float, list[float]]:
    """Lower bounds on the barrier over each unsafe product set.

    Returns the aggregate (the minimum, which is what the violation bound
    conservatively uses) together with the per-region values.
    """
    if not spec.X1:
        raise ValueError("at least one unsafe region is required")
    lam_min = float(np.linalg.eigvalsh((P + P.T) / 2).min())
    per_region = [lam_min * _state_input_extremum(spec, dims, r, maximize=False)
                  for r in spec.X1]
    return min(per_region), per_region


def drift_constant(P: np.ndarray, D: np.ndarray, noise_var: np.ndarray, tau: int) -> float:
    """Admissible one-step expected barrier increase c = tr(D' P D Sigma_w).

    Sigma_w is the block-diagonal covariance of the stacked noise vector,
    one identical diag(noise_var) block per lag (the noise is i.i.d.).
    """
    P = np.asarray(P, dtype=float)
    D = np.asarray(D, dtype=float)
    Sig = np.kron(np.eye(tau + 1), np.diag(np.asarray(noise_var, dtype=float)))
    return float(np.trace(D.T @ P @ D @ Sig))


def safety_bound(eta: float, beta: float, c: float, T: int) -> float:
    """Violation bound xi = min(1, (eta + c T) / beta); guarantee is 1 - xi."""
    if beta <= eta:
        raise BetaNotAboveEta(f"need beta > eta, got beta={beta!r} eta={eta!r}")
    if c < 0:
        raise ValueError(f"drift constant must be non-negative, got {c!r}")
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T!r}")
    return min(1.0, (eta + c * T) / beta)


def expected_next_barrier(
    aug: AugmentedSystem,
    P: np.ndarray,
    F: np.ndarray,
    z: np.ndarray,
    noise_var: np.ndarray,
) -> float:
    """Exact E[bar(Z_{k+1}) | Z_k = z] under the lifted dynamics.

    Equals z' [Ab' P Ab + v A3' P A3] z + c with Ab the mean transition
    matrix and v the fluctuation variance; the cross terms vanish because
    the fluctuation has zero mean.
    """
    z = np.asarray(z, dtype=float).ravel()
    if z.size != aug.dims.kappa:
        raise ValueError(f"state has length {z.size}, expected {aug.dims.kappa}")
    Ab = aug.mean_matrix(F)
    A3 = aug.A3.value(F)
    quad = Ab.T @ P @ Ab + aug.zeta_variance() * (A3.T @ P @ A3)
    c = drift_constant(P, aug.D, noise_var, aug.dims.tau)
    return float(z @ quad @ z) + c


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


@dataclass(frozen=True)
class Certificate:
    """Verified barrier certificate with all derived quantities."""

    P: np.ndarray
    F: np.ndarray
    eta: float
    beta: float
    beta_per_region: tuple[float, ...]
    c: float
    T: int
    xi: float
    margin: float
    delta: tuple[float, ...] | None = None
    method: str = ""
    config_hash: str = ""
    solver: dict = field(default_factory=dict)

    @property
    def guarantee(self) -> float:
        return 1.0 - self.xi

    def to_json_dict(self) -> dict:
        return {
            "P": np.asarray(self.P).tolist(),
            "F": np.asarray(self.F).tolist(),
            "eta": self.eta,
            "beta": self.beta,
            "beta_per_region": list(self.beta_per_region),
            "c": self.c,
            "T": self.T,
            "xi": self.xi,
            "margin": self.margin,
            "delta": list(self.delta) if self.delta is not None else None,
            "method": self.method,
            "config_hash": self.config_hash,
            "solver": self.solver,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Certificate":
        return cls(
            P=np.array(d["P"], dtype=float),
            F=np.array(d["F"], dtype=float),
            eta=float(d["eta"]),
            beta=float(d["beta"]),
            beta_per_region=tuple(float(v) for v in d["beta_per_region"]),
            c=float(d["c"]),
            T=int(d["T"]),
            xi=float(d["xi"]),
            margin=float(d["margin"]),
            delta=tuple(d["delta"]) if d.get("delta") is not None else None,
            method=d.get("method", ""),
            config_hash=d.get("config_hash", ""),
            solver=d.get("solver", {}),
        )


def evaluate_levels(
    aug: AugmentedSystem,
    P: np.ndarray,
    spec: SafetySpec,
) -> tuple[float, float, list[float], float, float]:
    """(eta, beta, beta_per_region, c, xi) for a given barrier matrix."""
    eta = initial_level(P, spec, aug.dims)
    beta, per_region = unsafe_level(P, spec, aug.dims)
    c = drift_constant(P, aug.D, aug.system.noise_var, aug.dims.tau)
    xi = safety_bound(eta, beta, c, spec.T)
    return eta, beta, per_region, c, xi


def synthesize(
    sys: SystemSpec,
    ch: ChannelSpec,
    spec: SafetySpec,
    search: DeltaSearchConfig = DeltaSearchConfig(),
    config_hash: str = "",
) -> Certificate:
    """Full pipeline: validate, find (P, F), derive levels and the bound.

    Fails loudly: model violations raise, an empty search raises
    ExhaustedSearch, and a non-separating barrier raises BetaNotAboveEta.
    """
    report = validate(sys, ch, spec)
    if not report.ok:
        raise ValueError(f"model validation failed:\n{report}")

    result = find_barrier_and_gain(sys, ch, search)
    aug = build(sys, ch)
    eta, beta, per_region, c, xi = evaluate_levels(aug, result.P, spec)

    return Certificate(
        P=result.P,
        F=result.F,
        eta=eta,
        beta=beta,
        beta_per_region=tuple(per_region),
        c=c,
        T=spec.T,
        xi=xi,
        margin=result.margin,
        delta=result.deltas.as_tuple() if result.deltas is not None else None,
        method=result.method,
        config_hash=config_hash,
        solver={
            "solver": search.settings.solver,
            "tol": search.settings.tol,
            "eps_pd": search.settings.eps_pd,
            "drift_weight": search.settings.drift_weight,
        },
    )


def recheck(
    cert: Certificate,
    sys: SystemSpec,
    ch: ChannelSpec,
    spec: SafetySpec,
    tol: float = 1e-8,
    match_tol: float = 1e-9,
) -> dict:
    """Recompute every derived quantity from (P, F) and flag mismatches.

    Used by the CLI verify command: the stored certificate must agree with
    fresh computation to within ``match_tol`` and its margin must pass the
    master check at ``tol``.
    """
    aug = build(sys, ch)
    margin = verify_master_inequality(aug, cert.P, cert.F)
    eta, beta, per_region, c, xi = evaluate_levels(aug, cert.P, spec)
    issues: list[str] = []
    if margin > tol:
        issues.append(f"master inequality fails: margin {margin:.3e} > {tol:.1e}")

    def close(a: float, b: float) -> bool:
        return abs(a - b) <= match_tol * max(1.0, abs(a), abs(b))

    for name, fresh, stored in (
        ("eta", eta, cert.eta),
        ("beta", beta, cert.beta),
        ("c", c, cert.c),
        ("xi", xi, cert.xi),
        ("margin", margin, cert.margin),
    ):
        if not close(fresh, stored):
            issues.append(f"{name} mismatch: stored {stored!r}, recomputed {fresh!r}")
    if len(per_region) != len(cert.beta_per_region) or not all(
        close(a, b) for a, b in zip(per_region, cert.beta_per_region)
    ):
        issues.append("beta_per_region mismatch")

    return {
        "ok": not issues,
        "issues": issues,
        "margin": margin,
        "eta": eta,
        "beta": beta,
        "c": c,
        "xi": xi,
    }
