"""Lifting of the networked loop into one linear stochastic recursion.

Stacking the delayed plant history, the two most recent controller states,
and both input histories into one vector ``Z`` turns the closed loop into

    Z_{k+1} = Amat(phi) Z_k + D w_k,
    Amat(phi) = A1 + A2 + zeta(phi) * A3,

where ``phi`` is the downlink Bernoulli indicator of the step being taken
and ``zeta`` is its zero-mean two-point reparameterisation
``phi = q_phi * (1 - zeta)``.  ``A1`` carries everything deterministic and
gain-free (plant row, history shifts, controller-state update), ``A2`` the
gain-bearing mean part, and ``A3`` the zero-mean fluctuation, so the pair
``(A2, A3)`` is affine in the feedback gain ``F`` by construction.

Block order of Z (widths in parentheses):

    [x_k ... x_{k-tau}]              plant history        (psi = n(tau+1))
    [xc_k, xc_{k-1}]                 controller states    (2n)
    [u_k ... u_{k-tau-1}]            applied inputs       (varpi + m)
    [uc_k ... uc_{k-tau}]            commanded inputs     (varpi = m(tau+1))

The plant row is the one-step recursion ``x_{k+1} = A x_k + B u_k + w_k``
with every history block shifted by one slot, which makes the lifting an
exact Markov model of the loop: process noise enters only the leading plant
block, so ``D`` is ``[I_n; 0]`` (kappa x psi, padded to the width of the
stacked noise vector).  The controller-state row is the success-probability
blend of the delayed measurement rollout and the model rollout, written on
lagged blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sysmodel import ChannelSpec, SystemSpec


@dataclass(frozen=True)
class AugDims:
    """Widths and block offsets of the lifted state."""

    n: int
    m: int
    tau: int

    @property
    def psi(self) -> int:
        return self.n * (self.tau + 1)

    @property
    def varpi(self) -> int:
        return self.m * (self.tau + 1)

    @property
    def kappa(self) -> int:
        return 2 * self.varpi + self.psi + 2 * self.n + self.m

    # offsets of the four block groups
    @property
    def off_x(self) -> int:
        return 0

    @property
    def off_xc(self) -> int:
        return self.psi

    @property
    def off_u(self) -> int:
        return self.psi + 2 * self.n

    @property
    def off_uc(self) -> int:
        return self.psi + 2 * self.n + self.varpi + self.m

    def x_block(self, j: int) -> slice:
        """Coordinates of plant-history block j (0 = current state)."""
        if not 0 <= j <= self.tau:
            raise IndexError(f"x block {j} out of range 0..{self.tau}")
        return slice(self.off_x + j * self.n, self.off_x + (j + 1) * self.n)

    def xc_block(self, j: int) -> slice:
        if j not in (0, 1):
            raise IndexError("xc block must be 0 or 1")
        return slice(self.off_xc + j * self.n, self.off_xc + (j + 1) * self.n)

    def u_block(self, j: int) -> slice:
        if not 0 <= j <= self.tau + 1:
            raise IndexError(f"u block {j} out of range 0..{self.tau + 1}")
        return slice(self.off_u + j * self.m, self.off_u + (j + 1) * self.m)

    def uc_block(self, j: int) -> slice:
        if not 0 <= j <= self.tau:
            raise IndexError(f"uc block {j} out of range 0..{self.tau}")
        return slice(self.off_uc + j * self.m, self.off_uc + (j + 1) * self.m)


def dimensions(n: int, m: int, tau: int) -> AugDims:
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return AugDims(n=n, m=m, tau=tau)


@dataclass(frozen=True)
class AffineMatrix:
    """Matrix-valued map ``F -> constant + sum_i selector_i @ F @ right_i``.

    Every gain occurrence is a left factor, so the map is affine in the
    entries of F; this is what keeps the gain-stage matrix inequalities
    linear once the barrier matrix is fixed.
    """

    constant: np.ndarray
    terms: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    def value(self, F: np.ndarray) -> np.ndarray:
        out = self.constant.copy()
        for selector, right in self.terms:
            out += selector @ F @ right
        return out


@dataclass(frozen=True)
class AugState:
    """Unpacked view of one lifted state vector."""

    x_hist: tuple[np.ndarray, ...]   # x_k .. x_{k-tau}
    xc_hist: tuple[np.ndarray, ...]  # xc_k, xc_{k-1}
    u_hist: tuple[np.ndarray, ...]   # u_k .. u_{k-tau-1}
    uc_hist: tuple[np.ndarray, ...]  # uc_k .. uc_{k-tau}


def pack(s: AugState) -> np.ndarray:
    """Concatenate the blocks in the fixed [x; xc; u; uc] order."""
    parts = [*s.x_hist, *s.xc_hist, *s.u_hist, *s.uc_hist]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack(z: np.ndarray, dims: AugDims) -> AugState:
    z = np.asarray(z, dtype=float).ravel()
    if z.shape != (dims.kappa,):
        raise ValueError(f"vector has length {z.shape[0]}, expected kappa={dims.kappa}")
    return AugState(
        x_hist=tuple(z[dims.x_block(j)] for j in range(dims.tau + 1)),
        xc_hist=tuple(z[dims.xc_block(j)] for j in range(2)),
        u_hist=tuple(z[dims.u_block(j)] for j in range(dims.tau + 2)),
        uc_hist=tuple(z[dims.uc_block(j)] for j in range(dims.tau + 1)),
    )


def controller_row(sys: SystemSpec, ch: ChannelSpec, dims: AugDims) -> np.ndarray:
    """n x kappa map computing the next controller state from the lifted state.

    Success-probability blend of the delayed measurement rollout and the
    model rollout, expressed on the lagged blocks [x_{k-tau}; xc_{k-1};
    uc-history]:

        xc_{k+1} = p A^{tau+1} x_{k-tau} + (1-p) A^2 xc_{k-1}
                   + B uc_k + A B uc_{k-1} + sum_{t=2..tau} p A^t B uc_{k-t}

    (for tau = 0 the delay-free blend p A x_k + (1-p) A xc_k + B uc_k).
    """
    n, tau, p = sys.n, ch.tau, ch.p_theta
    A, B = sys.A, sys.B
    row = np.zeros((n, dims.kappa))
    if tau == 0:
        row[:, dims.x_block(0)] = p * A
        row[:, dims.xc_block(0)] = (1.0 - p) * A
        row[:, dims.uc_block(0)] = B
        return row
    Apow = _powers(A, tau + 1)
    row[:, dims.x_block(tau)] = p * Apow[tau + 1]
    row[:, dims.xc_block(1)] = (1.0 - p) * Apow[2]
    row[:, dims.uc_block(0)] = B
    row[:, dims.uc_block(1)] = A @ B
    for t in range(2, tau + 1):
        row[:, dims.uc_block(t)] = p * Apow[t] @ B
    return row


def _powers(A: np.ndarray, up_to: int) -> list[np.ndarray]:
    # repeated multiplication; tau is small at the scales this tool targets
    out = [np.eye(A.shape[0])]
    for _ in range(up_to):
        out.append(out[-1] @ A)
    return out


@dataclass(frozen=True)
class AugmentedSystem:
    """Lifted system: decomposition (A1, A2, A3), noise map D, and specs."""

    dims: AugDims
    A1: AffineMatrix
    A2: AffineMatrix
    A3: AffineMatrix
    D: np.ndarray
    system: SystemSpec
    channel: ChannelSpec

    def zeta(self, phi: int) -> float:
        """Zero-mean two-point value of the downlink indicator."""
        if phi not in (0, 1):
            raise ValueError(f"phi must be 0 or 1, got {phi!r}")
        return 1.0 if phi == 0 else 1.0 - 1.0 / self.channel.q_phi

    def zeta_variance(self) -> float:
        q = self.channel.q_phi
        return (1.0 - q) / q

    def mean_matrix(self, F: np.ndarray) -> np.ndarray:
        return self.A1.value(F) + self.A2.value(F)

    def noise_cov_stacked(self) -> np.ndarray:
        """Covariance of the stacked noise vector (per-lag i.i.d. blocks)."""
        return np.kron(np.eye(self.dims.tau + 1), self.system.noise_cov())


def build(sys: SystemSpec, ch: ChannelSpec) -> AugmentedSystem:
    """Construct the lifted system for the given plant and channel."""
    dims = dimensions(sys.n, sys.m, ch.tau)
    n, m, tau = sys.n, sys.m, ch.tau
    kappa = dims.kappa
    q = ch.q_phi
    A, B = sys.A, sys.B

    R2 = controller_row(sys, ch, dims)

    # A1: plant row, controller row, and all history shifts (gain-free)
    A1 = np.zeros((kappa, kappa))
    A1[dims.x_block(0), dims.x_block(0)] = A
    A1[dims.x_block(0), dims.u_block(0)] = B
    for j in range(1, tau + 1):
        A1[dims.x_block(j), dims.x_block(j - 1)] = np.eye(n)
    A1[dims.xc_block(0), :] = R2
    A1[dims.xc_block(1), dims.xc_block(0)] = np.eye(n)
    for j in range(1, tau + 2):
        A1[dims.u_block(j), dims.u_block(j - 1)] = np.eye(m)
    for j in range(1, tau + 1):
        A1[dims.uc_block(j), dims.uc_block(j - 1)] = np.eye(m)

    # selectors dropping an m-row block into the u_{k+1} / uc_{k+1} rows
    sel_u = np.zeros((kappa, m))
    sel_u[dims.u_block(0), :] = np.eye(m)
    sel_uc = np.zeros((kappa, m))
    sel_uc[dims.uc_block(0), :] = np.eye(m)

    # held-input coupling u_{k+1} <- u_k
    hold = np.zeros((kappa, kappa))
    hold[dims.u_block(0), dims.u_block(0)] = np.eye(m)

    # A2: mean of the actuated row  u_{k+1} = q F R2 Z + (1-q) u_k
    #     plus the deterministic command row  uc_{k+1} = F R2 Z
    A2 = AffineMatrix(
        constant=(1.0 - q) * hold,
        terms=((sel_u, q * R2), (sel_uc, R2)),
    )
    # A3: zero-mean part  zeta * (q u_k - q F R2 Z)
    A3 = AffineMatrix(
        constant=q * hold,
        terms=((sel_u, -q * R2),),
    )

    D = np.zeros((kappa, dims.psi))
    D[dims.x_block(0), 0:n] = np.eye(n)

    return AugmentedSystem(
        dims=dims,
        A1=AffineMatrix(constant=A1),
        A2=A2,
        A3=A3,
        D=D,
        system=sys,
        channel=ch,
    )


def assemble_realized(aug: AugmentedSystem, F: np.ndarray, phi: int) -> np.ndarray:
    """Transition matrix for one realized downlink outcome."""
    F = np.asarray(F, dtype=float)
    if F.shape != (aug.dims.m, aug.dims.n):
        raise ValueError(f"F must be {aug.dims.m} x {aug.dims.n}, got {F.shape}")
    z = aug.zeta(phi)
    return aug.A1.value(F) + aug.A2.value(F) + z * aug.A3.value(F)


def dump_matrices(aug: AugmentedSystem) -> dict:
    """JSON-ready dump of the decomposition for external inspection."""
    def affine(am: AffineMatrix) -> dict:
        return {
            "constant": am.constant.tolist(),
            "terms": [{"selector": s.tolist(), "right": r.tolist()} for s, r in am.terms],
        }

    return {
        "dims": {"n": aug.dims.n, "m": aug.dims.m, "tau": aug.dims.tau,
                 "psi": aug.dims.psi, "varpi": aug.dims.varpi, "kappa": aug.dims.kappa},
        "A1": affine(aug.A1),
        "A2": affine(aug.A2),
        "A3": affine(aug.A3),
        "D": aug.D.tolist(),
    }
