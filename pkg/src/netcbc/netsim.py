"""Monte-Carlo simulator of the networked closed loop.

One simulated step at time k:

  * the sensor transmits x_k; the Bernoulli uplink draw made now is
    consumed by the controller tau steps later,
  * the controller resolves its state estimate (realization mode uses the
    realized uplink indicator, expectation mode the success-probability
    blend) and commands uc_k = F xc_k,
  * the downlink draw decides whether the actuator applies uc_k or holds
    the previous input (zero-order hold),
  * the plant advances with fresh process noise.

Initialization (the loop has no pre-history): every plant-history slot
starts at x0, held input and commanded-input history start at zero, and
the controller state starts at x0 (the controller knows the initial
condition), so with perfect channels and zero noise the estimate tracks
the plant exactly from step zero.

Runs are reproducible and embarrassingly parallel: run i derives its
generator from SeedSequence([seed, i]), so aggregation order cannot
change any number.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np
from scipy.stats import beta as beta_dist

from .lmi import worker_count
from .sysmodel import Box, ChannelSpec, SafetySpec, SystemSpec


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    runs: int = 20
    T: int = 100
    controller_mode: str = "realization"  # or "expectation"
    x0: tuple[float, ...] | None = None   # fixed start; None samples X0 uniformly
    record_trajectories: bool = False

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.controller_mode not in ("realization", "expectation"):
            raise ValueError(f"unknown controller mode {self.controller_mode!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SimConfig":
        if not d:
            return cls()
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in d.items() if k in known}
        if kw.get("x0") is not None:
            kw["x0"] = tuple(float(v) for v in kw["x0"])
        return cls(**kw)


@dataclass(frozen=True)
class LoopState:
    """Loop situation on entry to step k (controller not yet resolved)."""

    k: int
    x: np.ndarray                      # x_k
    xc: np.ndarray                     # controller state from step k-1
    xc_prev: np.ndarray
    u_held: np.ndarray                 # last applied input u_{k-1}
    x_buf: tuple[np.ndarray, ...]      # x_k .. x_{k-tau}
    uc_buf: tuple[np.ndarray, ...]     # uc_{k-1} .. uc_{k-tau-1}
    theta_pipe: tuple[int, ...]        # uplink draws still in flight


@dataclass(frozen=True)
class StepRecord:
    k: int
    x: np.ndarray
    xc: np.ndarray
    u: np.ndarray
    uc: np.ndarray
    theta: int
    phi: int
    unsafe_plant: bool = False
    unsafe_augmented: bool = False


@dataclass(frozen=True)
class RunResult:
    violated_plant: bool
    first_violation_time: int | None
    violated_augmented: bool
    theta_losses: int
    phi_losses: int
    final_x: np.ndarray
    trajectory: tuple[StepRecord, ...] | None = None


@dataclass(frozen=True)
class Aggregate:
    runs: int
    violations_plant: int
    violations_augmented: int
    freq_plant: float
    freq_augmented: float
    ci95: tuple[float, float]
    mean_theta_losses: float
    mean_phi_losses: float
    loss_counts: tuple[tuple[int, int], ...]
    results: tuple[RunResult, ...] = field(repr=False, default=())

    def to_json_dict(self, xi_certified: float | None = None) -> dict:
        return {
            "runs": self.runs,
            "violations_plant": self.violations_plant,
            "violations_augmented": self.violations_augmented,
            "freq_plant": self.freq_plant,
            "freq_augmented": self.freq_augmented,
            "ci95": list(self.ci95),
            "xi_certified": xi_certified,
            "mean_theta_losses": self.mean_theta_losses,
            "mean_phi_losses": self.mean_phi_losses,
            "loss_counts": [list(row) for row in self.loss_counts],
        }


def initial_state(x0: np.ndarray, m: int, tau: int) -> LoopState:
    x0 = np.asarray(x0, dtype=float)
    zero_u = np.zeros(m)
    return LoopState(
        k=0,
        x=x0,
        xc=x0.copy(),
        xc_prev=x0.copy(),
        u_held=zero_u,
        x_buf=(x0.copy(),) * (tau + 1),
        uc_buf=(zero_u.copy(),) * (tau + 1),
        theta_pipe=(),
    )


def controller_update(
    state: LoopState,
    sys: SystemSpec,
    ch: ChannelSpec,
    F: np.ndarray,
    theta: int | None,
    mode: str = "realization",
) -> np.ndarray:
    """Next controller state from the buffered information.

    ``theta`` is the realized uplink indicator of the packet due now;
    ``None`` means nothing is due (the first tau steps).  On a received
    packet the estimate rolls the delayed state forward through the model,

        A^tau x_{k-tau} + sum_{t<tau} A^t B uc_{k-t-1},

    in expectation mode blended with the model branch at weight p_theta;
    on a drop (or no packet) both modes fall back to the model branch
    A xc + B uc_prev.  The physically unavailable delayed state forces
    that fallback even in expectation mode.
    """
    A, B = sys.A, sys.B
    model = A @ state.xc + B @ state.uc_buf[0]
    if theta is None or theta == 0:
        return model
    rolled = np.linalg.matrix_power(A, ch.tau) @ state.x_buf[-1]
    acc = np.zeros_like(rolled)
    for t in range(ch.tau):
        acc = acc + np.linalg.matrix_power(A, t) @ (B @ state.uc_buf[t])
    measured = rolled + acc
    if mode == "expectation":
        return ch.p_theta * measured + (1.0 - ch.p_theta) * model
    return measured


def step(
    state: LoopState,
    sys: SystemSpec,
    ch: ChannelSpec,
    F: np.ndarray,
    rng: np.random.Generator,
    mode: str = "realization",
) -> tuple[LoopState, StepRecord]:
    """Advance one step; draws theta, phi, and the process noise in that order."""
    k = state.k
    theta_k = int(rng.random() < ch.p_theta)
    phi_k = int(rng.random() < ch.q_phi)

    pipe = state.theta_pipe + (theta_k,)
    theta_due: int | None = None
    if len(pipe) == ch.tau + 1:
        theta_due, pipe = pipe[0], pipe[1:]

    if k == 0:
        xc_k = state.xc  # the controller starts from the known x0
    else:
        xc_k = controller_update(state, sys, ch, F, theta_due, mode)

    uc_k = F @ xc_k
    u_k = uc_k if phi_k == 1 else state.u_held

    w_k = rng.normal(0.0, np.sqrt(sys.noise_var))
    x_next = sys.A @ state.x + sys.B @ u_k + w_k

    new_state = LoopState(
        k=k + 1,
        x=x_next,
        xc=xc_k,
        xc_prev=state.xc if k > 0 else xc_k,
        u_held=u_k,
        x_buf=(x_next, *state.x_buf[: ch.tau]),
        uc_buf=(uc_k, *state.uc_buf[: ch.tau]),
        theta_pipe=pipe,
    )
    record = StepRecord(k=k, x=state.x, xc=xc_k, u=u_k, uc=uc_k,
                        theta=theta_k, phi=phi_k)
    return new_state, record


def _in_any_region(x: np.ndarray, regions: Sequence[Box]) -> bool:
    return any(r.contains(x) for r in regions)


def _augmented_in_one_region(
    x_blocks: Sequence[np.ndarray], xc: np.ndarray, xc_prev: np.ndarray,
    regions: Sequence[Box],
) -> bool:
    for r in regions:
        if all(r.contains(xb) for xb in x_blocks) and r.contains(xc) and r.contains(xc_prev):
            return True
    return False


def run_seed(seed: int, run_index: int) -> np.random.Generator:
    """Per-run generator; documented derivation seed_run = hash(seed, run_index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, run_index])))


def run(
    sys: SystemSpec,
    ch: ChannelSpec,
    spec: SafetySpec,
    F: np.ndarray,
    cfg: SimConfig,
    run_index: int = 0,
) -> RunResult:
    """Simulate one closed-loop trajectory over k = 0..T.

    Plant-level violation: x_k enters any unsafe region (closed boxes) for
    some k in [0, T].  Augmented-level violation: all tau+1 buffered plant
    states and both controller states lie in one unsafe region
    simultaneously, checked at every step where the controller state is
    resolved (k in [0, T-1]).
    """
    rng = run_seed(cfg.seed, run_index)
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
    else:
        x0 = rng.uniform(spec.X0.lo, spec.X0.hi)

    state = initial_state(x0, sys.m, ch.tau)
    violated = _in_any_region(state.x, spec.X1)
    first_time = 0 if violated else None
    violated_aug = False
    theta_losses = 0
    phi_losses = 0
    traj: list[StepRecord] = []

    for k in range(cfg.T):
        blocks_k = state.x_buf  # x_k .. x_{k-tau} of the step about to run
        state, rec = step(state, sys, ch, F, rng, cfg.controller_mode)
        theta_losses += 1 - rec.theta
        phi_losses += 1 - rec.phi
        aug_hit = _augmented_in_one_region(blocks_k, state.xc, state.xc_prev, spec.X1)
        if aug_hit:
            violated_aug = True
        if cfg.record_trajectories:
            traj.append(replace(rec,
                                unsafe_plant=_in_any_region(rec.x, spec.X1),
                                unsafe_augmented=aug_hit))
        if not violated and _in_any_region(state.x, spec.X1):
            violated = True
            first_time = k + 1

    return RunResult(
        violated_plant=violated,
        first_violation_time=first_time,
        violated_augmented=violated_aug,
        theta_losses=theta_losses,
        phi_losses=phi_losses,
        final_x=state.x,
        trajectory=tuple(traj) if cfg.record_trajectories else None,
    )


def clopper_pearson(successes: int, trials: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact binomial confidence interval."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lo = 0.0 if successes == 0 else float(
        beta_dist.ppf(alpha / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(
        beta_dist.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return lo, hi


def monte_carlo(
    sys: SystemSpec,
    ch: ChannelSpec,
    spec: SafetySpec,
    F: np.ndarray,
    cfg: SimConfig,
) -> Aggregate:
    """Independent runs with per-run derived seeds, order-independent totals."""
    workers = worker_count()
    indices = range(cfg.runs)
    if workers > 1 and cfg.runs > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: run(sys, ch, spec, F, cfg, i), indices))
    else:
        results = [run(sys, ch, spec, F, cfg, i) for i in indices]

    v_plant = sum(r.violated_plant for r in results)
    v_aug = sum(r.violated_augmented for r in results)
    return Aggregate(
        runs=cfg.runs,
        violations_plant=v_plant,
        violations_augmented=v_aug,
        freq_plant=v_plant / cfg.runs,
        freq_augmented=v_aug / cfg.runs,
        ci95=clopper_pearson(v_plant, cfg.runs),
        mean_theta_losses=float(np.mean([r.theta_losses for r in results])),
        mean_phi_losses=float(np.mean([r.phi_losses for r in results])),
        loss_counts=tuple((r.theta_losses, r.phi_losses) for r in results),
        results=tuple(results),
    )


def write_trajectory_csv(fh: IO[str], result: RunResult) -> None:
    """One row per simulated step; column layout is part of the CLI contract."""
    if result.trajectory is None:
        raise ValueError("run was not recorded; enable record_trajectories")
    n = result.trajectory[0].x.size
    m = result.trajectory[0].u.size
    writer = csv.writer(fh)
    writer.writerow(
        ["k"]
        + [f"x{i}" for i in range(n)]
        + [f"xhat{i}" for i in range(n)]
        + [f"u{i}" for i in range(m)]
        + [f"uc{i}" for i in range(m)]
        + ["theta", "phi", "unsafe_plant", "unsafe_augmented"]
    )
    for rec in result.trajectory:
        writer.writerow(
            [rec.k]
            + [repr(float(v)) for v in rec.x]
            + [repr(float(v)) for v in rec.xc]
            + [repr(float(v)) for v in rec.u]
            + [repr(float(v)) for v in rec.uc]
            + [rec.theta, rec.phi, int(rec.unsafe_plant), int(rec.unsafe_augmented)]
        )
