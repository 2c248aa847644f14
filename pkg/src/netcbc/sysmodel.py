"""Plant, channel, and safety-specification data model.

The networked loop under study is a discrete-time linear plant
``x_{k+1} = A x_k + B u_k + w_k`` whose controller sits on the far side of a
wireless link: state measurements reach the controller with a constant delay
of ``tau`` steps and survive the uplink with probability ``p_theta``; control
commands survive the downlink with probability ``q_phi`` (the actuator holds
the previous input on a drop).  Safety is stated over axis-aligned boxes: an
operating region, an initial box, one or more unsafe boxes, and an input box.

Everything here is immutable after construction and all operations are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration file or dict does not match the schema."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Box:
    """Axis-aligned hyper-rectangle given by per-coordinate bounds."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper must have equal length")
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    def is_wellformed(self) -> bool:
        return all(l <= u for l, u in zip(self.lower, self.upper))

    def contains(self, x: Sequence[float]) -> bool:
        """Closed-box membership; boundary points count as inside."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"point has dimension {x.shape}, box has {self.dim}")
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def contains_box(self, other: "Box") -> bool:
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def max_sq_norm(self) -> float:
        """max of ||x||^2 over the box (coordinate-wise extremum)."""
        return float(np.sum(np.maximum(self.lo**2, self.hi**2)))

    def min_sq_norm(self) -> float:
        """min of ||x||^2 over the box; 0 along any axis straddling zero."""
        per = np.where((self.lo <= 0.0) & (self.hi >= 0.0), 0.0,
                       np.minimum(self.lo**2, self.hi**2))
        return float(np.sum(per))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        try:
            return cls(tuple(d["lower"]), tuple(d["upper"]))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed box: {d!r}") from e

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


def box_disjoint(a: Box, b: Box) -> bool:
    """True iff the closed boxes share no point.

    Touching boundaries count as intersecting, so disjointness requires
    strict separation along at least one axis.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return bool(np.any(a.hi < b.lo) or np.any(b.hi < a.lo))


@dataclass(frozen=True)
class SystemSpec:
    """Plant matrices and per-coordinate process-noise variances."""

    A: np.ndarray
    B: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "A", _readonly(self.A))
        object.__setattr__(self, "B", _readonly(self.B))
        object.__setattr__(self, "noise_var", _readonly(np.atleast_1d(self.noise_var)))
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape[0] != self.A.shape[0]:
            raise ValueError(f"B must be n x m with n={self.A.shape[0]}, got {self.B.shape}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def noise_cov(self) -> np.ndarray:
        return np.diag(self.noise_var)


@dataclass(frozen=True)
class ChannelSpec:
    """Uplink delay and per-step success probabilities of both channels."""

    tau: int
    p_theta: float
    q_phi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "tau", int(self.tau))
        object.__setattr__(self, "p_theta", float(self.p_theta))
        object.__setattr__(self, "q_phi", float(self.q_phi))


@dataclass(frozen=True)
class SafetySpec:
    """Operating/initial/unsafe regions, input box, and the time horizon."""

    X: Box
    X0: Box
    X1: tuple[Box, ...]
    U: Box
    T: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "X1", tuple(self.X1))
        object.__setattr__(self, "T", int(self.T))


@dataclass(frozen=True)
class ValidationReport:
    """Accumulated invariant violations; empty means the model is usable."""

    problems: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"- {p}" for p in self.problems)


def validate(sys: SystemSpec, ch: ChannelSpec, spec: SafetySpec) -> ValidationReport:
    """Check every model invariant and report all violations found.

    Report-style on purpose: callers (the CLI, the synthesis pipeline)
    decide whether to abort.  Deterministic and side-effect-free.
    """
    problems: list[str] = []
    n, m = sys.n, sys.m

    if np.any(sys.noise_var < 0):
        problems.append("negative variance in noise_var")
    if sys.noise_var.shape != (n,):
        problems.append(f"noise_var has length {sys.noise_var.shape[0]}, expected n={n}")

    if ch.tau < 0:
        problems.append(f"tau must be >= 0, got {ch.tau}")
    if not 0.0 < ch.p_theta < 1.0:
        problems.append(f"p_theta must lie in (0,1), got {ch.p_theta}")
    if not 0.0 < ch.q_phi < 1.0:
        problems.append(f"q_phi must lie in (0,1), got {ch.q_phi}")

    for name, box, want in (("X", spec.X, n), ("X0", spec.X0, n), ("U", spec.U, m)):
        if not box.is_wellformed():
            problems.append(f"{name} has lower > upper on some axis")
        if box.dim != want:
            problems.append(f"{name} has dimension {box.dim}, expected {want}")
    if not spec.X1:
        problems.append("at least one unsafe region is required")
    for i, r in enumerate(spec.X1):
        if not r.is_wellformed():
            problems.append(f"X1[{i}] has lower > upper on some axis")
        if r.dim != n:
            problems.append(f"X1[{i}] has dimension {r.dim}, expected {n}")

    dims_ok = spec.X.dim == spec.X0.dim == n and all(r.dim == n for r in spec.X1)
    if dims_ok:
        if spec.X0.is_wellformed() and spec.X.is_wellformed() and not spec.X.contains_box(spec.X0):
            problems.append("X0 is not contained in X")
        for i, r in enumerate(spec.X1):
            if r.is_wellformed() and spec.X.is_wellformed() and not spec.X.contains_box(r):
                problems.append(f"X1[{i}] is not contained in X")
            if r.is_wellformed() and spec.X0.is_wellformed() and not box_disjoint(spec.X0, r):
                problems.append(f"initial and unsafe sets intersect (X0 vs X1[{i}])")

    if spec.T < 1:
        problems.append(f"horizon T must be >= 1, got {spec.T}")

    return ValidationReport(tuple(problems))


# ---------------------------------------------------------------------------
# JSON configuration schema consumed by the CLI:
# {"system": {"A": [[...]], "B": [[...]], "noise_var": [...]},
#  "channel": {"tau": int, "p_theta": float, "q_phi": float},
#  "safety": {"X": box, "X0": box, "X1": [box, ...], "U": box, "T": int},
#  "solver": {...}, "sim": {...}}    with box = {"lower": [...], "upper": [...]}
# ---------------------------------------------------------------------------

def _require(d: dict, key: str, where: str) -> Any:
    if key not in d:
        raise ConfigError(f"missing key {key!r} in {where!r} section")
    return d[key]


def parse_config(cfg: dict) -> tuple[SystemSpec, ChannelSpec, SafetySpec]:
    """Build the model triple from a parsed JSON config dict."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for section in ("system", "channel", "safety"):
        if section not in cfg:
            raise ConfigError(f"missing config section {section!r}")

    s = cfg["system"]
    try:
        sys_spec = SystemSpec(
            A=np.array(_require(s, "A", "system"), dtype=float),
            B=np.array(_require(s, "B", "system"), dtype=float),
            noise_var=np.array(_require(s, "noise_var", "system"), dtype=float),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad system section: {e}") from e

    c = cfg["channel"]
    try:
        ch_spec = ChannelSpec(
            tau=int(_require(c, "tau", "channel")),
            p_theta=float(_require(c, "p_theta", "channel")),
            q_phi=float(_require(c, "q_phi", "channel")),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad channel section: {e}") from e

    f = cfg["safety"]
    try:
        safety = SafetySpec(
            X=Box.from_dict(_require(f, "X", "safety")),
            X0=Box.from_dict(_require(f, "X0", "safety")),
            X1=tuple(Box.from_dict(b) for b in _require(f, "X1", "safety")),
            U=Box.from_dict(_require(f, "U", "safety")),
            T=int(_require(f, "T", "safety")),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad safety section: {e}") from e

    return sys_spec, ch_spec, safety


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
