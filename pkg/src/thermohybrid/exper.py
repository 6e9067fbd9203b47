"""Simulated testbed: synthetic device, current profiles, ground-truth data,
train/val/test protocol, error metrics and sensitivity analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .autodiff import CascadeModel, input_gradients
from .loss import LossWeights
from .ploss import T_REF, LossParams, gap_bound, perturb_loss_params, true_loss_gap
from .rom import (DiscreteRom, ThermalParams, discretize_zoh, perturb_thermal_params,
                  synthesize_rc_network)

LEVELS = (200.0, 400.0, 480.0, 600.0, 800.0)
SINE_LEVEL = 600.0


@dataclass(frozen=True)
class CurrentProfile:
    profile_id: int
    current: np.ndarray

    @property
    def n_steps(self):
        return len(self.current)


def generate_profiles(n_steps: int, seed=None, sine_amplitude: float = 1.0):
    """Five constant levels plus ``600 + a sin(k/10)``. ``seed`` is accepted for
    interface symmetry; the profiles are deterministic."""
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    k = np.arange(n_steps)
    profiles = [CurrentProfile(i + 1, np.full(n_steps, lvl)) for i, lvl in enumerate(LEVELS)]
    profiles.append(CurrentProfile(6, SINE_LEVEL + sine_amplitude * np.sin(k / 10.0)))
    return profiles


def device_network(n=24, m=16, p=8, seed=0) -> ThermalParams:
    """Power-module-like RC network.

    Dies (sensor nodes, main loss channels) sit on baseplate segments over a
    heatsink chain that carries the ambient conductance. Secondary loss sources
    hang off the dies with couplings spanning two decades, so some of them are
    barely visible at the sensors.
    """
    if not (p <= m <= 2 * p and n >= m + 2):
        raise ValueError("device_network needs p <= m <= 2p and n >= m + 2")
    rng = np.random.default_rng(seed)
    n_sec = m - p
    rest = n - m
    n_base = max(1, rest // 2)
    n_sink = rest - n_base
    if n_sink == 0:
        n_base, n_sink = rest - 1, 1
    dies = np.arange(p)
    secs = np.arange(p, m)
    base = np.arange(m, m + n_base)
    sink = np.arange(m + n_base, n)

    caps = np.empty(n)
    caps[dies] = rng.uniform(8.0, 15.0, p)
    caps[secs] = rng.uniform(3.0, 10.0, n_sec)
    caps[base] = rng.uniform(40.0, 80.0, n_base)
    caps[sink] = rng.uniform(150.0, 300.0, n_sink)
    g_amb = np.zeros(n)
    g_amb[sink] = rng.uniform(0.5, 1.5, n_sink)

    links, g = [], []

    def link(i, j, val):
        links.append((int(i), int(j)))
        g.append(float(val))

    for d in dies:
        link(d, base[d * n_base // p], rng.uniform(1.0, 2.0))
    coupling = np.geomspace(0.1, 3.0, n_sec)
    rng.shuffle(coupling)
    for s, c in zip(secs, coupling):
        link(s, dies[(s - p) % p], c)
        link(s, base[(s - p) * n_base // max(n_sec, 1)], rng.uniform(0.05, 0.2))
        g_amb[s] = rng.uniform(0.02, 0.1)
    for a, b in zip(base[:-1], base[1:]):
        link(a, b, rng.uniform(0.3, 0.8))
    for i, b in enumerate(base):
        link(b, sink[i * n_sink // n_base], rng.uniform(2.0, 4.0))
    for a, b in zip(sink[:-1], sink[1:]):
        link(a, b, rng.uniform(0.5, 1.5))
    inj = np.concatenate([dies, secs])
    return ThermalParams(caps, links, g, g_amb, inj, dies)


def device_losses(m=16, p=8, seed=0) -> LossParams:
    """Nominal loss coefficients: large conduction/switching losses on the dies,
    small ones on the secondary sources."""
    rng = np.random.default_rng(seed + 7919)
    n_sec = m - p
    r = np.concatenate([rng.uniform(2e-5, 4e-5, p), rng.uniform(4e-6, 1.2e-5, n_sec)])
    k = np.concatenate([rng.uniform(0.002, 0.004, p), rng.uniform(-0.002, 0.004, n_sec)])
    s = np.concatenate([rng.uniform(0.003, 0.008, p), rng.uniform(5e-4, 2e-3, n_sec)])
    return LossParams(r, k, s)


@dataclass
class Scenario:
    kind: str = "accurate"  # "accurate" | "noisy"
    tau: float = 0.05
    n_models: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("accurate", "noisy"):
            raise ValueError("scenario kind must be 'accurate' or 'noisy'")


@dataclass
class DeviceBundle:
    """Ground truth and nominal knowledge for one simulated experiment."""

    truth_params: ThermalParams
    nominal_params: ThermalParams
    truth_rom: DiscreteRom
    nominal_rom: DiscreteRom
    nominal_losses: LossParams
    device_params: list
    magnitudes: np.ndarray
    zeta: float
    meta: dict = field(default_factory=dict)


def make_bundle(scenario: Scenario, *, n=24, m=16, p=8, dt=1.0, delta=0.1, magnitudes=None,
                i_max=800.0, dT_max=150.0, device_seed=None) -> DeviceBundle:
    dseed = scenario.seed if device_seed is None else device_seed
    truth = device_network(n, m, p, seed=dseed)
    nominal_params = truth
    if scenario.kind == "noisy":
        nominal_params = perturb_thermal_params(truth, scenario.tau, seed=scenario.seed + 1)
    truth_rom = discretize_zoh(synthesize_rc_network(truth), dt)
    nominal_rom = truth_rom if nominal_params is truth else \
        discretize_zoh(synthesize_rc_network(nominal_params), dt)
    nominal_losses = device_losses(m, p, seed=dseed)
    if magnitudes is None:
        magnitudes = np.linspace(-0.5, 0.5, scenario.n_models)
    magnitudes = np.asarray(magnitudes, dtype=float)
    ss = np.random.SeedSequence(scenario.seed).spawn(len(magnitudes))
    devices = [perturb_loss_params(nominal_losses, mi, delta, np.random.default_rng(s))
               for mi, s in zip(magnitudes, ss)]
    zeta = gap_bound(devices, nominal_losses, i_max, dT_max)
    return DeviceBundle(truth, nominal_params, truth_rom, nominal_rom, nominal_losses, devices,
                        magnitudes, zeta, meta={"scenario": scenario.kind, "tau": scenario.tau,
                                                "seed": scenario.seed, "delta": delta})


def simulate_truth(rom: DiscreteRom, params_list, currents, fb_index=0, t_ref=T_REF):
    """Ground-truth cascade where each trajectory has its own loss parameters and
    the loss map reads the feedback sensor. Returns (x, y_abs, u), all (N, K, .)."""
    currents = np.asarray(currents, dtype=float)
    N, K = currents.shape
    r = np.stack([pp.r for pp in params_list])
    k = np.stack([pp.k for pp in params_list])
    s = np.stack([pp.s for pp in params_list])
    x = np.zeros((N, rom.n))
    xs = np.empty((N, K, rom.n))
    us = np.empty((N, K, rom.m))
    AdT, BdT = rom.Ad.T, rom.Bd.T
    c_fb = rom.C[fb_index]
    for t in range(K):
        xs[:, t] = x
        I = currents[:, t:t + 1]
        dT = (x @ c_fb)[:, None]
        u = r * I * I * (1.0 + k * dT) + s * np.abs(I)
        us[:, t] = u
        x = x @ AdT + u @ BdT
    y = xs @ rom.C.T + t_ref
    return xs, y, us


@dataclass
class Dataset:
    """All ground-truth trajectories of one experiment, with split labels."""

    current: np.ndarray  # (N, K) A
    t_fb: np.ndarray  # (N, K) K, the measured feedback sensor
    y: np.ndarray  # (N, K, p) K, measured temperatures
    u_true: np.ndarray  # (N, K, m) W, oracle only
    x_true: np.ndarray  # (N, K, n), oracle only
    device: np.ndarray  # (N,)
    profile: np.ndarray  # (N,)
    split: np.ndarray  # (N,) of "train" | "val" | "test"

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    def subset(self, split):
        i = self.indices(split)
        return {"X": np.stack([self.current[i], self.t_fb[i]], axis=-1), "y": self.y[i],
                "ids": [(int(d), int(pr)) for d, pr in zip(self.device[i], self.profile[i])]}


def split_trajectories(device, profile, *, test_profile=6, n_test_devices=1, val_fraction=0.1,
                       train_fraction=0.7, seed=0):
    """Assign splits: one or more held-out devices and every ``test_profile`` run
    go to test; the rest is divided train/val in the ratio of the fractions."""
    device = np.asarray(device)
    profile = np.asarray(profile)
    rng = np.random.default_rng(seed)
    devs = np.unique(device)
    interior = devs[1:-1] if len(devs) > 2 else devs
    if n_test_devices >= len(devs) or n_test_devices > len(interior):
        raise ValueError("not enough devices to hold out for testing")
    held = rng.choice(interior, n_test_devices, replace=False)
    split = np.full(len(device), "train", dtype=object)
    test = np.isin(device, held) | (profile == test_profile)
    split[test] = "test"
    rest = np.flatnonzero(~test)
    n_val = int(round(len(rest) * val_fraction / (val_fraction + train_fraction)))
    if len(rest) - n_val < 1 or n_val < 1:
        raise ValueError("split infeasible: too few trajectories for train and validation")
    split[rng.choice(rest, n_val, replace=False)] = "val"
    return split.astype(str), held


def build_dataset(bundle: DeviceBundle, profiles, *, fb_index=0, seed=0, n_test_devices=1) -> Dataset:
    pairs = [(d, pr) for d in range(len(bundle.device_params)) for pr in profiles]
    currents = np.stack([pr.current for _, pr in pairs])
    params = [bundle.device_params[d] for d, _ in pairs]
    x, y, u = simulate_truth(bundle.truth_rom, params, currents, fb_index)
    device = np.array([d for d, _ in pairs])
    profile = np.array([pr.profile_id for _, pr in pairs])
    split, _ = split_trajectories(device, profile, n_test_devices=n_test_devices, seed=seed)
    return Dataset(currents, y[:, :, fb_index], y, u, x, device, profile, split)


def _stats(a):
    a = np.asarray(a, dtype=float)
    return {"mean": float(np.mean(a)), "std": float(np.std(a))}


def error_histogram(errors, bins):
    counts, edges = np.histogram(np.asarray(errors).ravel(), bins=bins)
    return counts, edges


def evaluate(predictions: dict, dataset: Dataset, split="test", n_bins=50):
    """Mean and spread of temperature and loss errors per model over one split.

    ``predictions`` maps a model name to ``(y_pred, u_pred)`` arrays for the
    split's trajectories, with ``y_pred`` in K and ``u_pred`` in W on the same
    steps as the dataset (step 0, where every model starts at rest, included).
    """
    idx = dataset.indices(split)
    y_true = dataset.y[idx]
    u_true = dataset.u_true[idx]
    report = {"split": split, "n_trajectories": int(len(idx)), "models": {}, "histograms": {}}
    t_errs, u_errs = {}, {}
    for name, (y_pred, u_pred) in predictions.items():
        te = np.abs(np.asarray(y_pred) - y_true)
        ue = np.abs(np.asarray(u_pred) - u_true)
        t_errs[name], u_errs[name] = te, ue
        per_dev = {}
        for d in np.unique(dataset.device[idx]):
            sel = dataset.device[idx] == d
            per_dev[str(int(d))] = {"temperature_error": _stats(te[sel]), "loss_error": _stats(ue[sel])}
        report["models"][name] = {
            "temperature_error": _stats(te), "loss_error": _stats(ue),
            "negative_loss_fraction": float(np.mean(np.asarray(u_pred) < 0)),
            "per_device": per_dev,
        }
    t_hi = max(float(np.max(v)) for v in t_errs.values()) or 1.0
    u_hi = max(float(np.max(v)) for v in u_errs.values()) or 1.0
    t_bins = np.linspace(0.0, t_hi, n_bins + 1)
    u_bins = np.linspace(0.0, u_hi, n_bins + 1)
    for name in predictions:
        report["histograms"][name] = {
            "temperature": error_histogram(t_errs[name], t_bins)[0].tolist(),
            "loss": error_histogram(u_errs[name], u_bins)[0].tolist()}
    report["histograms"]["temperature_edges"] = t_bins.tolist()
    report["histograms"]["loss_edges"] = u_bins.tolist()
    return report


def reduction(report, baseline="nominal", model="hybrid"):
    """Fractional reduction of mean absolute errors of ``model`` vs ``baseline``."""
    b, h = report["models"][baseline], report["models"][model]
    return {q: 1.0 - h[q]["mean"] / b[q]["mean"] for q in ("temperature_error", "loss_error")}


@dataclass
class SensitivityReport:
    mean_abs_grad: np.ndarray
    loss_mse: np.ndarray
    spearman: float
    loss_mse_w: np.ndarray | None = None
    spearman_w: float | None = None

    def rows(self):
        mse_w = self.loss_mse if self.loss_mse_w is None else self.loss_mse_w
        return [{"channel": j, "mean_abs_grad": float(g), "loss_mse": float(e),
                 "loss_mse_w": float(w)}
                for j, (g, e, w) in enumerate(zip(self.mean_abs_grad, self.loss_mse, mse_w))]


def _spearman(a, b):
    return float(spearmanr(a, b).statistic) if np.ptp(a) > 0 and np.ptp(b) > 0 else 0.0


def sensitivity(model: CascadeModel, net, train_batch, weights: LossWeights, u_pred, u_true,
                u_scale=None):
    """Pair per-channel input-gradient magnitude (training windows) with the
    per-channel loss reconstruction MSE (test predictions).

    The gradient is taken w.r.t. normalized losses, so with ``u_scale`` (the
    per-channel normalization bound) the MSE is computed in the same units and
    the watt-valued MSE is kept alongside.
    """
    g = input_gradients(model, net, train_batch, weights)
    err = np.asarray(u_pred) - np.asarray(u_true)
    mse_w = np.mean(err ** 2, axis=(0, 1))
    if u_scale is None:
        return SensitivityReport(g, mse_w, _spearman(g, mse_w))
    mse = np.mean((err / np.asarray(u_scale)) ** 2, axis=(0, 1))
    return SensitivityReport(g, mse, _spearman(g, mse), mse_w, _spearman(g, mse_w))


class OracleCorrector:
    """Test hook that emits the exact normalized loss gap for each trajectory.

    It reads the current and feedback temperature back out of the exogenous
    features, so it plugs into the cascade wherever a feedforward net does.
    ``true_params`` holds one parameter set per batch row.
    """

    stateful = False

    def __init__(self, true_params, nominal: LossParams, transform, *, i_max, fb_index=0,
                 t_ref=T_REF):
        self.true_params = list(true_params)
        self.nominal = nominal
        self.transform = transform
        self.i_max = i_max
        self.y_max_fb = transform.y_max[fb_index]
        self.t_ref = t_ref

    def forward(self, features):
        current = features[:, 0] * self.i_max
        t_fb = features[:, 1] * self.y_max_fb + self.t_ref
        gap = np.stack([true_loss_gap(p, self.nominal, c, t, self.t_ref)
                        for p, c, t in zip(self.true_params, current, t_fb)])
        return self.transform.normalize_u(gap), None
