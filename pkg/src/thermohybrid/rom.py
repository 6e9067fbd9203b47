"""Linear thermal reduced-order model: RC-network synthesis, ZOH discretization,
simulation, normalization and parameter perturbation.

All models are in deviation coordinates: states and outputs are temperature
rises (K) above ambient, inputs are dissipated powers (W).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


class NumericalError(ArithmeticError):
    """Raised when a model computation yields non-finite or unusable numbers."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ThermalParams:
    """Physical parameter vector of a lumped RC thermal network.

    ``links`` holds ``(i, j)`` node pairs and ``link_conductances`` the matching
    conductances in W/K.
    """

    node_capacitances: np.ndarray
    links: np.ndarray
    link_conductances: np.ndarray
    ambient_conductances: np.ndarray
    injection_map: np.ndarray
    sensor_map: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "node_capacitances", _frozen(self.node_capacitances))
        links = np.asarray(self.links, dtype=int).reshape(-1, 2)
        object.__setattr__(self, "links", _frozen(links, int))
        object.__setattr__(self, "link_conductances", _frozen(self.link_conductances))
        object.__setattr__(self, "ambient_conductances", _frozen(self.ambient_conductances))
        object.__setattr__(self, "injection_map", _frozen(self.injection_map, int))
        object.__setattr__(self, "sensor_map", _frozen(self.sensor_map, int))
        self.validate()

    @property
    def n(self) -> int:
        return len(self.node_capacitances)

    @property
    def m(self) -> int:
        return len(self.injection_map)

    @property
    def p(self) -> int:
        return len(self.sensor_map)

    def validate(self):
        n = self.n
        if n == 0 or np.any(~np.isfinite(self.node_capacitances)) or np.any(self.node_capacitances <= 0):
            raise ValueError("node capacitances must be finite and strictly positive")
        if len(self.ambient_conductances) != n:
            raise ValueError("ambient_conductances must have one entry per node")
        if len(self.link_conductances) != len(self.links):
            raise ValueError("link_conductances must match links")
        for g in (self.link_conductances, self.ambient_conductances):
            if np.any(~np.isfinite(g)) or np.any(g < 0):
                raise ValueError("conductances must be finite and nonnegative")
        for name, idx in (("links", self.links), ("injection_map", self.injection_map),
                          ("sensor_map", self.sensor_map)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} references a node outside 0..{n - 1}")
        if np.any(self.links[:, 0] == self.links[:, 1]):
            raise ValueError("self-links are not allowed")

    def is_grounded(self) -> bool:
        """True when every node reaches a node with positive ambient conductance."""
        adj = [[] for _ in range(self.n)]
        for (i, j), g in zip(self.links, self.link_conductances):
            if g > 0:
                adj[i].append(j)
                adj[j].append(i)
        seen = set(np.flatnonzero(self.ambient_conductances > 0).tolist())
        queue = deque(seen)
        while queue:
            i = queue.popleft()
            for j in adj[i]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.n

    def to_vector(self) -> np.ndarray:
        """Flat physical parameter vector (capacitances, links, ambient)."""
        return np.concatenate([self.node_capacitances, self.link_conductances,
                               self.ambient_conductances])

    def with_vector(self, theta) -> "ThermalParams":
        theta = np.asarray(theta, dtype=float)
        n, nl = self.n, len(self.links)
        return ThermalParams(theta[:n], self.links, theta[n:n + nl], theta[n + nl:],
                             self.injection_map, self.sensor_map)

    def to_dict(self) -> dict:
        return {
            "node_capacitances": self.node_capacitances.tolist(),
            "links": self.links.tolist(),
            "link_conductances": self.link_conductances.tolist(),
            "ambient_conductances": self.ambient_conductances.tolist(),
            "injection_map": self.injection_map.tolist(),
            "sensor_map": self.sensor_map.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThermalParams":
        return cls(**{k: d[k] for k in ("node_capacitances", "links", "link_conductances",
                                        "ambient_conductances", "injection_map", "sensor_map")})


@dataclass(frozen=True)
class ContinuousRom:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))

    def is_hurwitz(self) -> bool:
        return bool(np.max(np.linalg.eigvals(self.A).real) < 0)

    def is_metzler(self) -> bool:
        off = self.A[~np.eye(len(self.A), dtype=bool)]
        return bool(np.all(off >= 0))


@dataclass(frozen=True)
class DiscreteRom:
    Ad: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        for name in ("Ad", "Bd", "C"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        n = self.Ad.shape[0]
        if self.Ad.shape != (n, n) or self.Bd.shape[0] != n or self.C.shape[1] != n:
            raise ValueError(f"inconsistent shapes Ad{self.Ad.shape} Bd{self.Bd.shape} C{self.C.shape}")

    @property
    def n(self) -> int:
        return self.Ad.shape[0]

    @property
    def m(self) -> int:
        return self.Bd.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Ad))))

    def dc_gain(self) -> np.ndarray:
        """State steady-state map (I - Ad)^-1 Bd."""
        return np.linalg.solve(np.eye(self.n) - self.Ad, self.Bd)


@dataclass(frozen=True)
class NormalizationTransform:
    """Diagonal scaling between physical and normalized quantities.

    ``u_bar = u / u_max``, ``x_bar = state_scale * x``, ``y_bar = y / y_max``.
    """

    u_max: np.ndarray
    y_max: np.ndarray
    state_scale: np.ndarray

    def __post_init__(self):
        for name in ("u_max", "y_max", "state_scale"):
            v = _frozen(np.atleast_1d(getattr(self, name)))
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"{name} must be finite and strictly positive")
            object.__setattr__(self, name, v)

    def normalize_u(self, u):
        return np.asarray(u) / self.u_max

    def denormalize_u(self, u_bar):
        return np.asarray(u_bar) * self.u_max

    def normalize_x(self, x):
        return np.asarray(x) * self.state_scale

    def denormalize_x(self, x_bar):
        return np.asarray(x_bar) / self.state_scale

    def normalize_y(self, y):
        return np.asarray(y) / self.y_max

    def denormalize_y(self, y_bar):
        return np.asarray(y_bar) * self.y_max


@dataclass(frozen=True)
class Trajectory:
    """Aligned time series of one simulation run; ``y_seq[k] = C x_seq[k]``."""

    z_seq: np.ndarray
    u_seq: np.ndarray
    x_seq: np.ndarray
    y_seq: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lengths = {len(self.z_seq), len(self.u_seq), len(self.x_seq), len(self.y_seq)}
        if len(lengths) != 1:
            raise ValueError(f"trajectory sequences differ in length: {sorted(lengths)}")

    def __len__(self):
        return len(self.x_seq)


def synthesize_rc_network(params: ThermalParams) -> ContinuousRom:
    """Assemble ``A = -diag(1/C) (L + diag(g_amb))`` and the routing matrices."""
    if not params.is_grounded():
        raise ValueError("ungrounded RC network: some node has no path to ambient, "
                         "the model would not be asymptotically stable")
    n = params.n
    L = np.zeros((n, n))
    for (i, j), g in zip(params.links, params.link_conductances):
        L[i, j] -= g
        L[j, i] -= g
        L[i, i] += g
        L[j, j] += g
    inv_c = 1.0 / params.node_capacitances
    A = -inv_c[:, None] * (L + np.diag(params.ambient_conductances))
    B = np.zeros((n, params.m))
    B[params.injection_map, np.arange(params.m)] = inv_c[params.injection_map]
    C = np.zeros((params.p, n))
    C[np.arange(params.p), params.sensor_map] = 1.0
    return ContinuousRom(A, B, C)


def discretize_zoh(rom: ContinuousRom, dt: float) -> DiscreteRom:
    """Exact zero-order-hold sampling through the augmented matrix exponential."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not rom.is_hurwitz():
        raise ValueError("continuous model is not Hurwitz")
    n, m = rom.B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = rom.A
    M[:n, n:] = rom.B
    E = expm(M * dt)
    Ad, Bd = E[:n, :n], E[:n, n:]
    if not (np.all(np.isfinite(Ad)) and np.all(np.isfinite(Bd))):
        raise NumericalError("non-finite entries in discretized model")
    return DiscreteRom(Ad, Bd, rom.C, dt)


def step(rom: DiscreteRom, x, u):
    """One transition. Returns ``(x_next, y)`` with ``y = C x`` (pre-update)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != rom.n or u.shape[-1] != rom.m:
        raise ValueError(f"expected state of size {rom.n} and input of size {rom.m}")
    y = x @ rom.C.T
    return x @ rom.Ad.T + u @ rom.Bd.T, y


def simulate(rom: DiscreteRom, u_seq, x0=None, z_seq=None) -> Trajectory:
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    K = len(u_seq)
    x = np.zeros(rom.n) if x0 is None else np.asarray(x0, dtype=float)
    if x.shape != (rom.n,):
        raise ValueError(f"x0 must have shape ({rom.n},)")
    xs = np.empty((K, rom.n))
    for k in range(K):
        xs[k] = x
        x = rom.Ad @ x + rom.Bd @ u_seq[k]
    z = np.zeros((K, 0)) if z_seq is None else np.asarray(z_seq)
    return Trajectory(z, u_seq, xs, xs @ rom.C.T)


def normalize(rom: DiscreteRom, u_max, y_max=None):
    """Rescale a positive discrete model so that inputs in ``[0, u_max]`` from rest
    keep every state in ``[0, 1]``.

    The state scale is the reciprocal of the steady state reached under
    ``u_max``. When ``y_max`` is omitted the output steady state is used, which
    bounds the outputs in the same way.
    """
    u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (rom.m,))
    if np.any(u_max <= 0):
        raise ValueError("u_max must be strictly positive")
    x_ss = rom.dc_gain() @ u_max
    if np.any(~np.isfinite(x_ss)) or np.any(x_ss <= 0):
        bad = np.flatnonzero(~(x_ss > 0)).tolist()
        raise NumericalError(f"state components {bad} have zero steady state under u_max; "
                             "prune or re-map them before normalizing")
    if y_max is None:
        y_max = rom.C @ x_ss
    y_max = np.broadcast_to(np.asarray(y_max, dtype=float), (rom.p,))
    t = 1.0 / x_ss
    tf = NormalizationTransform(u_max, y_max, t)
    Ad = rom.Ad * t[:, None] / t[None, :]
    Bd = t[:, None] * rom.Bd * u_max[None, :]
    C = rom.C / t[None, :] / y_max[:, None]
    return DiscreteRom(Ad, Bd, C, rom.dt), tf


def perturb_thermal_params(params: ThermalParams, tau: float, seed) -> ThermalParams:
    """Gaussian relative perturbation of every physical parameter.

    Draws that fall below 1e-6 of the nominal magnitude are clamped there, so
    positive parameters stay positive and zero conductances stay zero.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    theta = params.to_vector()
    if tau == 0:
        return params
    rng = np.random.default_rng(seed)
    noisy = theta + rng.normal(0.0, 1.0, theta.shape) * tau * np.abs(theta)
    floor = 1e-6 * np.abs(theta)
    return params.with_vector(np.maximum(noisy, floor))


def random_thermal_params(n: int, m: int, p: int, rng, *, density: float = 0.15) -> ThermalParams:
    """Random connected, grounded RC network with distinct injection/sensor nodes."""
    rng = np.random.default_rng(rng)
    order = rng.permutation(n)
    # random spanning tree keeps the network connected
    links = [(int(order[i]), int(order[rng.integers(0, i)])) for i in range(1, n)]
    existing = {tuple(sorted(e)) for e in links}
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in existing and rng.random() < density:
                links.append((i, j))
    g_link = rng.uniform(0.2, 3.0, len(links))
    g_amb = np.where(rng.random(n) < 0.3, rng.uniform(0.05, 1.0, n), 0.0)
    g_amb[rng.integers(n)] = rng.uniform(0.2, 1.0)
    caps = rng.uniform(1.0, 50.0, n)
    inj = rng.choice(n, size=m, replace=m > n)
    sens = rng.choice(n, size=p, replace=p > n)
    return ThermalParams(caps, links, g_link, g_amb, inj, sens)


def rom_to_dict(rom: DiscreteRom, theta: ThermalParams | None = None,
                transform: NormalizationTransform | None = None) -> dict:
    d = {"n": rom.n, "m": rom.m, "p": rom.p, "dt": float(rom.dt),
         "A_d": rom.Ad.ravel().tolist(), "B_d": rom.Bd.ravel().tolist(),
         "C": rom.C.ravel().tolist(),
         "theta": None if theta is None else theta.to_dict()}
    for name in ("u_max", "y_max", "state_scale"):
        d[name] = None if transform is None else getattr(transform, name).tolist()
    return d


def rom_from_dict(d: dict):
    """Inverse of :func:`rom_to_dict`; returns ``(rom, theta, transform)``."""
    n, m, p = d["n"], d["m"], d["p"]
    rom = DiscreteRom(np.reshape(d["A_d"], (n, n)), np.reshape(d["B_d"], (n, m)),
                      np.reshape(d["C"], (p, n)), d["dt"])
    theta = None if d.get("theta") is None else ThermalParams.from_dict(d["theta"])
    tf = None
    if d.get("u_max") is not None:
        tf = NormalizationTransform(d["u_max"], d["y_max"], d["state_scale"])
    return rom, theta, tf


def save_rom(path, rom, theta=None, transform=None):
    with open(path, "w") as fh:
        json.dump(rom_to_dict(rom, theta, transform), fh, indent=1)


def load_rom(path):
    with open(path) as fh:
        return rom_from_dict(json.load(fh))
