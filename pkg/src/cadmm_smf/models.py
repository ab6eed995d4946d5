"""Motion models, the range-bearing radar, estimation constraints and scenarios."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .ellipsoid import Ellipsoid, ProjectionSelector, sample_ellipsoid
from .projections import LinearConstraint
from .rng import as_generator


class InvalidMeasurement(ValueError):
    """A measurement outside the domain of the inverse sensor map."""


@dataclass(frozen=True)
class ConstantVelocityModel:
    """State ``(sx, sy, vx, vy)`` moving at constant velocity over ``T`` seconds."""

    T: float = 1.0

    def matrix(self) -> np.ndarray:
        T = self.T
        return np.array(
            [[1.0, 0, T, 0], [0, 1.0, 0, T], [0, 0, 1.0, 0], [0, 0, 0, 1.0]]
        )

    def __call__(self, x, k: int = 0) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix().T

    def to_dict(self) -> dict:
        return {"type": "cv", "T": self.T}


@dataclass(frozen=True)
class CoordinatedTurnModel:
    """Constant turn rate ``omega`` (rad/s); the velocity block is a rotation."""

    T: float = 1.0
    omega: float = 0.005

    def matrix(self) -> np.ndarray:
        T, w = self.T, self.omega
        if w == 0:
            return ConstantVelocityModel(T).matrix()
        s, c = np.sin(w * T), np.cos(w * T)
        return np.array(
            [
                [1.0, 0, s / w, -(1 - c) / w],
                [0, 1.0, (1 - c) / w, s / w],
                [0, 0, c, -s],
                [0, 0, s, c],
            ]
        )

    def __call__(self, x, k: int = 0) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix().T

    def to_dict(self) -> dict:
        return {"type": "ct", "T": self.T, "omega": self.omega}


@dataclass(frozen=True)
class RangeBearingSensor:
    """Radar at ``(a, b)`` measuring range and four-quadrant bearing of ``(sx, sy)``."""

    a: float
    b: float

    def h(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        dx, dy = x[..., 0] - self.a, x[..., 1] - self.b
        return np.stack([np.hypot(dx, dy), np.arctan2(dy, dx)], axis=-1)

    def h_inverse(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        rng_, th = y[..., 0], y[..., 1]
        if np.any(rng_ <= 0):
            raise InvalidMeasurement("range must be positive")
        return np.stack([self.a + rng_ * np.cos(th), self.b + rng_ * np.sin(th)], axis=-1)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class QuadraticPair:
    """``x^T C1 x = c1^2`` and ``x^T C2 x = c2^2``."""

    C1: np.ndarray
    c1: float
    C2: np.ndarray
    c2: float

    def __post_init__(self):
        object.__setattr__(self, "C1", np.asarray(self.C1, dtype=float))
        object.__setattr__(self, "C2", np.asarray(self.C2, dtype=float))

    p = 2

    @property
    def n(self) -> int:
        return self.C1.shape[0]

    def g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([x @ self.C1 @ x - self.c1**2, x @ self.C2 @ x - self.c2**2])

    def grad_g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 2.0 * np.column_stack([self.C1 @ x, self.C2 @ x])

    def hess(self, x, u) -> np.ndarray:
        return 2.0 * (u[0] * self.C1 + u[1] * self.C2)

    def quadratic_forms(self):
        """``(A_j, b_j, k_j)`` of ``x^T A_j x + 2 b_j^T x + k_j = 0`` for the compiled Newton path."""
        As = np.ascontiguousarray(np.stack([self.C1, self.C2]))
        return As, np.zeros((2, As.shape[1])), -np.array([self.c1**2, self.c2**2])

    def circle_blocks(self):
        """``(index pairs, radii)`` when the set is a product of coordinate circles, else ``None``."""
        i1, i2 = self._blocks()
        sel1 = np.allclose(self.C1, np.diag(np.isin(np.arange(self.n), i1).astype(float)))
        sel2 = np.allclose(self.C2, np.diag(np.isin(np.arange(self.n), i2).astype(float)))
        if not (sel1 and sel2 and i1.size == 2 and i2.size == 2 and self.n == 4 and set(i1).isdisjoint(i2)):
            return None
        return np.array([i1, i2]), np.array([self.c1, self.c2], dtype=float)

    def _blocks(self):
        # coordinate blocks selected by C1 and C2 (diagonal selector matrices)
        return np.flatnonzero(np.diag(self.C1)), np.flatnonzero(np.diag(self.C2))

    def initializer(self, d) -> np.ndarray:
        """Radial projection of each block; exact when C1, C2 are disjoint selectors."""
        x = np.array(d, dtype=float)
        for idx, rad in zip(self._blocks(), (self.c1, self.c2)):
            nrm = np.linalg.norm(x[idx])
            if nrm > 0:
                x[idx] *= rad / nrm
            else:
                x[idx] = 0.0
                x[idx[0]] = rad
        return x

    def distance(self, x) -> float:
        return float(np.max(np.abs(self.g(x))))

    def block_distance(self, x) -> np.ndarray:
        """``(| ||p|| - c1 |, | ||v|| - c2 |)`` as plotted for the torus constraint."""
        x = np.asarray(x, dtype=float)
        i1, i2 = self._blocks()
        return np.array(
            [abs(np.linalg.norm(x[i1]) - self.c1), abs(np.linalg.norm(x[i2]) - self.c2)]
        )

    def to_dict(self) -> dict:
        return {
            "type": "quadratic_pair",
            "C1": self.C1.tolist(),
            "c1": self.c1,
            "C2": self.C2.tolist(),
            "c2": self.c2,
        }


def constraint_from_dict(d: dict | None):
    if d is None:
        return None
    kind = d.get("type")
    if kind == "linear":
        return LinearConstraint(np.asarray(d["C"]), np.asarray(d["c"]))
    if kind == "quadratic_pair":
        return QuadraticPair(np.asarray(d["C1"]), float(d["c1"]), np.asarray(d["C2"]), float(d["c2"]))
    raise ValueError(f"unknown constraint type {kind!r}")


def constraint_distance(constraint, x) -> np.ndarray:
    """Distance reported in the metrics table (vector for the torus constraint)."""
    if constraint is None:
        return np.zeros(1)
    if isinstance(constraint, LinearConstraint):
        return np.array([constraint.distance(x)])
    if isinstance(constraint, QuadraticPair):
        return constraint.block_distance(x)
    return np.abs(np.atleast_1d(constraint.g(x)))


def constraint_violation(constraint, x) -> float:
    """``||g(x)||_inf``; zero when there is no constraint."""
    if constraint is None:
        return 0.0
    return float(np.max(np.abs(np.atleast_1d(constraint.g(np.asarray(x, dtype=float))))))


class NoisePolicy(str, enum.Enum):
    SINUSOID = "sinusoid"
    UNIFORM_IN_BOUND = "uniform_in_bound"


def sinusoid_process_noise(k: int) -> np.ndarray:
    s1, s2 = np.sin(k * np.pi / 2), np.sin(k * np.pi / 4)
    return np.array([s1, 2 * s1, s2, 2 * s2])


def clip_to_ellipsoid(v: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Scale ``v`` back onto ``E(0, shape)`` when it lies outside."""
    m = float(v @ np.linalg.solve(shape, v))
    return v / np.sqrt(m) if m > 1.0 else v


def motion_from_dict(d: dict):
    if d["type"] == "cv":
        return ConstantVelocityModel(float(d.get("T", 1.0)))
    if d["type"] == "ct":
        return CoordinatedTurnModel(float(d.get("T", 1.0)), float(d.get("omega", 0.005)))
    raise ValueError(f"unknown motion model {d['type']!r}")


@dataclass
class FilterScenario:
    """A fully parameterized tracking problem."""

    name: str
    motion: ConstantVelocityModel | CoordinatedTurnModel
    sensor: RangeBearingSensor
    Q: np.ndarray
    R: np.ndarray
    constraint: object
    x0: np.ndarray
    P0: np.ndarray
    noise_policy: NoisePolicy = NoisePolicy.SINUSOID
    selector: ProjectionSelector = field(default_factory=lambda: ProjectionSelector(4, (0, 1)))

    @property
    def n(self) -> int:
        return int(np.asarray(self.x0).size)

    def initial_estimate(self, rng) -> np.ndarray:
        """``x0`` disturbed uniformly inside ``E(0, P0/4)``, then projected onto the constraint."""
        rng = as_generator(rng)
        delta = sample_ellipsoid(Ellipsoid(np.zeros(self.n), self.P0 / 4.0), "interior", 1, rng)[0]
        x = np.asarray(self.x0, dtype=float) + delta
        return project_onto(self.constraint, x)

    def initial_ellipsoid(self, rng) -> Ellipsoid:
        return Ellipsoid(self.initial_estimate(rng), self.P0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "motion": self.motion.to_dict(),
            "sensor": self.sensor.to_dict(),
            "Q": np.asarray(self.Q).tolist(),
            "R": np.asarray(self.R).tolist(),
            "constraint": None if self.constraint is None else self.constraint.to_dict(),
            "x0": np.asarray(self.x0).tolist(),
            "P0": np.asarray(self.P0).tolist(),
            "noise_policy": self.noise_policy.value,
            "selector": list(self.selector.indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterScenario":
        x0 = np.asarray(d["x0"], dtype=float)
        return cls(
            name=d["name"],
            motion=motion_from_dict(d["motion"]),
            sensor=RangeBearingSensor(float(d["sensor"]["a"]), float(d["sensor"]["b"])),
            Q=np.asarray(d["Q"], dtype=float),
            R=np.asarray(d["R"], dtype=float),
            constraint=constraint_from_dict(d.get("constraint")),
            x0=x0,
            P0=np.asarray(d["P0"], dtype=float),
            noise_policy=NoisePolicy(d.get("noise_policy", "sinusoid")),
            selector=ProjectionSelector(x0.size, tuple(d.get("selector", (0, 1)))),
        )


def project_onto(constraint, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if constraint is None:
        return x.copy()
    if isinstance(constraint, LinearConstraint):
        return constraint.project(x)
    return constraint.initializer(x)


def simulate_truth(scenario: FilterScenario, steps: int, rng, x0=None):
    """True states ``x_1..x_steps`` and their measurements.

    Returns:
        ``(states, measurements)`` as arrays of shape (steps, n) and (steps, 2).
        ``states[k-1]`` is ``x_k``; the measurement noise is uniform inside
        ``E(0, R)``.
    """
    rng = as_generator(rng)
    x = np.array(scenario.x0 if x0 is None else x0, dtype=float)
    meas_bound = Ellipsoid(np.zeros(2), scenario.R)
    proc_bound = Ellipsoid(np.zeros(scenario.n), scenario.Q)
    states, meas = [], []
    for k in range(steps):
        if scenario.noise_policy is NoisePolicy.SINUSOID:
            w = clip_to_ellipsoid(sinusoid_process_noise(k), scenario.Q)
        else:
            w = sample_ellipsoid(proc_bound, "interior", 1, rng)[0]
        x = scenario.motion(x, k) + w
        v = sample_ellipsoid(meas_bound, "interior", 1, rng)[0]
        states.append(x)
        meas.append(scenario.sensor.h(x) + v)
    return np.array(states), np.array(meas)


def scenario_linear() -> FilterScenario:
    return FilterScenario(
        name="linear",
        motion=ConstantVelocityModel(1.0),
        sensor=RangeBearingSensor(15000.0, 0.0),
        Q=10.0 * np.eye(4),
        R=np.diag([20.0**2, 0.1**2]),
        constraint=LinearConstraint(np.array([[2.0, -1, 0, 0], [0, 0, 2, -1]]), np.zeros(2)),
        x0=np.array([0.0, 0.0, 25.0, 50.0]),
        P0=100.0**2 * np.eye(4),
    )


def scenario_nonlinear(omega: float | None = None) -> FilterScenario:
    c1, c2 = 10.0, 0.05
    C1 = np.diag([1.0, 1, 0, 0])
    C2 = np.diag([0.0, 0, 1, 1])
    return FilterScenario(
        name="nonlinear",
        # noise-free motion on the torus needs speed / radius
        motion=CoordinatedTurnModel(1.0, c2 / c1 if omega is None else omega),
        sensor=RangeBearingSensor(-20000.0, 5000.0),
        Q=10.0 * np.eye(4),
        R=np.diag([20.0**2, 0.1**2]),
        constraint=QuadraticPair(C1, c1, C2, c2),
        x0=np.array([0.0, 10.0, -0.05, 0.0]),
        P0=100.0**2 * np.eye(4),
    )


def scenario_by_name(name: str) -> FilterScenario:
    if name == "linear":
        return scenario_linear()
    if name == "nonlinear":
        return scenario_nonlinear()
    raise ValueError(f"unknown scenario {name!r}")


def example1_samples(s: int, rng, center=(100.0, 100.0), R=(20.0**2, 0.1**2)) -> np.ndarray:
    """``h^{-1}(h(center) - v)`` for ``v`` on the boundary of ``E(0, diag(R))``."""
    rng = as_generator(rng)
    sensor = RangeBearingSensor(0.0, 0.0)
    y = sensor.h(np.asarray(center, dtype=float))
    v = sample_ellipsoid(Ellipsoid(np.zeros(2), np.diag(R)), "boundary", s, rng)
    return sensor.h_inverse(y - v)
