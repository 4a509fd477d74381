"""Agent-based substrates producing labelled action trajectories.

Two models are provided:

* a continuous-spin coupled-trader market (``cws``) with mean-field
  coupling, persistent per-agent heterogeneity and a linear price-impact
  rule, and
* the Vicsek flocking model, whose headings are quantised to an
  8-symbol alphabet so the graph layer can treat both uniformly.

Steps are 1-based: row ``r`` of every per-step array is step ``r + 1``.
The initial condition (step 0) is not stored.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import roots_hermitenorm

from .io import atomic_write_text

SUPERCRITICAL = "supercritical"
SUBCRITICAL = "subcritical"

CWS_SYMBOLS = (-1, 0, 1)
VICSEK_SYMBOLS = tuple(range(8))


class SimulationError(RuntimeError):
    """Raised when a simulation produces a non-finite state."""

    def __init__(self, message: str, step: int | None = None, traj_id: str | None = None):
        super().__init__(message)
        self.step = step
        self.traj_id = traj_id


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class CwsConfig:
    """Coupled-trader market.

    ``coupling`` is expressed in units of the critical coupling: at
    ``coupling = 1`` the linearised mean-field response of the population
    equals one, so ``coupling > 1`` is the herding (supercritical) side.
    The raw feedback gain is ``coupling / chi0`` where ``chi0`` is the mean
    slope of ``tanh`` under the agents' own fluctuations.

    Agents are split round-robin into ``n_groups`` groups that share a
    common signal component (``group_signal_std``), so the pre-stress
    agreement graph consists of small within-group cliques.

    The coupling is zero up to ``ramp_start`` and then grows linearly to
    its final value over ``ramp_steps`` steps, giving each trajectory a
    pre-stress stretch followed by a slow approach to the transition.
    ``ramp_steps=None`` applies the full coupling from step 1.
    """

    n_agents: int = 66
    n_assets: int = 4
    coupling: float = 1.8
    noise_std: float = 0.6
    signal_std: float = 0.3
    group_signal_std: float = 0.5
    n_groups: int = 11
    bias_std: float = 0.2
    herding_spread: float = 0.5
    group_herding_spread: float = 0.7
    impact_coeff: float = 0.5
    price_noise: float = 0.05
    horizon: int = 1200
    ramp_start: int = 300
    ramp_steps: int | None = 900
    spin_threshold: float = 0.33
    event_threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        if self.n_assets < 1:
            raise ValueError("n_assets must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.spin_threshold > 0:
            raise ValueError("spin_threshold must be > 0")
        if not math.isfinite(self.coupling) or self.coupling < 0:
            raise ValueError("coupling must be finite and >= 0")
        if not 1 <= self.n_groups <= self.n_agents:
            raise ValueError("n_groups must lie in [1, n_agents]")
        if self.ramp_start < 0:
            raise ValueError("ramp_start must be >= 0")
        for name in ("noise_std", "signal_std", "group_signal_std", "bias_std", "herding_spread",
                     "group_herding_spread", "price_noise"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if not self.impact_coeff > 0:
            raise ValueError("impact_coeff must be > 0")
        if self.ramp_steps is not None and self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1 or None")
        if not 0 < self.event_threshold < 1:
            raise ValueError("event_threshold must lie in (0, 1)")

    @property
    def label(self) -> str:
        return SUPERCRITICAL if self.coupling > 1.0 else SUBCRITICAL


@dataclass(frozen=True)
class VicsekConfig:
    n_particles: int = 600
    eta: float = 1.0
    speed: float = 0.3
    box_size: float = 12.0
    interaction_radius: float = 1.0
    horizon: int = 1000
    snapshot_stride: int = 50
    warmup: int = 50
    consecutive: int = 3
    event_threshold: float = 0.5
    critical_eta: float = 1.6
    n_bins: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not (self.speed > 0 and self.box_size > 0 and self.interaction_radius > 0):
            raise ValueError("speed, box_size and interaction_radius must be positive")
        if not self.interaction_radius < self.box_size:
            raise ValueError("interaction_radius must be smaller than box_size")
        if self.horizon < 1 or self.snapshot_stride < 1 or self.consecutive < 1:
            raise ValueError("horizon, snapshot_stride and consecutive must be >= 1")
        if self.n_bins < 2 or self.n_bins > 10:
            raise ValueError("n_bins must lie in [2, 10]")

    @property
    def label(self) -> str:
        return SUPERCRITICAL if self.eta < self.critical_eta else SUBCRITICAL


# ---------------------------------------------------------------- trajectory


@dataclass
class ActionTrajectory:
    """Per-step actions, prices and order parameter of one run.

    ``actions`` holds symbol values (``meta["symbols"]``), shape ``[T, N]``.
    ``prices`` has shape ``[T, n_assets]`` (``n_assets`` may be 0); the
    price before step 1 is 1 for every asset.
    """

    actions: np.ndarray
    prices: np.ndarray
    order_param: np.ndarray
    label: str
    event_time: int | None
    meta: dict = field(default_factory=dict)
    traj_id: str = ""

    @property
    def n_steps(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n_agents(self) -> int:
        return int(self.actions.shape[1])

    @property
    def symbols(self) -> tuple:
        return tuple(self.meta.get("symbols", CWS_SYMBOLS))

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, self.n_steps + 1)

    @property
    def asset_returns(self) -> np.ndarray:
        logp = np.log(self.prices)
        prev = np.vstack([np.zeros((1, logp.shape[1])), logp[:-1]])
        return logp - prev

    @property
    def market_return(self) -> np.ndarray:
        r = self.asset_returns
        if r.shape[1] == 0:
            return np.zeros(self.n_steps)
        return r.mean(axis=1)

    def symbol_codes(self) -> np.ndarray:
        """Actions mapped to 0..|alphabet|-1 (in ``symbols`` order)."""
        sym = np.asarray(self.symbols)
        codes = np.searchsorted(sym, self.actions)
        if not np.array_equal(sym[codes], self.actions):
            raise ValueError("actions contain symbols outside the alphabet")
        return codes.astype(np.int8)


def first_crossing(series: np.ndarray, threshold: float, consecutive: int = 1, start: int = 0) -> int | None:
    """1-based step of the first run of ``consecutive`` values above ``threshold``.

    Only rows ``>= start`` are considered. The returned step is the first
    step of the run.
    """
    above = np.asarray(series) > threshold
    run = 0
    for r in range(start, above.size):
        run = run + 1 if above[r] else 0
        if run >= consecutive:
            return r - consecutive + 2
    return None


# ---------------------------------------------------------------- CWS


def tanh_slope(sigma: float, n_nodes: int = 40) -> float:
    """E[1 - tanh(Z)^2] for Z ~ N(0, sigma^2), by Gauss-Hermite quadrature."""
    if sigma == 0:
        return 1.0
    x, w = roots_hermitenorm(n_nodes)
    return float(np.sum(w * (1.0 - np.tanh(sigma * x) ** 2)) / np.sqrt(2 * np.pi))


def coupling_ramp(t: int, cfg: CwsConfig) -> float:
    """Fraction of the final coupling applied at step ``t``."""
    if cfg.ramp_steps is None:
        return 1.0
    return float(np.clip((t - cfg.ramp_start) / cfg.ramp_steps, 0.0, 1.0))


def simulate_cws(config: CwsConfig, traj_id: str = "") -> ActionTrajectory:
    """Run the coupled-trader market.

    Each step every agent updates its spin
    ``s_i <- tanh(k(t) h_i M + b_i + c_g(i) + g_i + e_i)`` where ``M`` is
    the mean spin, ``b_i`` a persistent bias, ``h_i`` a persistent herding
    tendency (mean one), ``c_g`` the shared signal of the agent's group,
    ``g_i`` a private signal and ``e_i`` noise. Actions are the
    thresholded spins and each asset moves by ``lambda*M + xi``.
    """
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    N, A, T = cfg.n_agents, cfg.n_assets, cfg.horizon

    sigma = math.sqrt(cfg.noise_std**2 + cfg.signal_std**2 + cfg.group_signal_std**2 + cfg.bias_std**2)
    gain = cfg.coupling / tanh_slope(sigma)
    bias = rng.normal(0.0, cfg.bias_std, N) if cfg.bias_std > 0 else np.zeros(N)
    herd = np.exp(rng.normal(0.0, cfg.herding_spread, N)) if cfg.herding_spread > 0 else np.ones(N)
    group = np.arange(N) % cfg.n_groups
    if cfg.group_herding_spread > 0:
        herd = herd * np.exp(rng.normal(0.0, cfg.group_herding_spread, cfg.n_groups))[group]
    herd /= herd.mean()

    s = np.zeros(N)
    actions = np.zeros((T, N), dtype=np.int8)
    M_trace = np.zeros(T)
    logp = np.zeros((T, A))
    cur = np.zeros(A)
    for r in range(T):
        t = r + 1
        M = s.mean()
        drive = gain * coupling_ramp(t, cfg) * herd * M + bias
        if cfg.group_signal_std > 0:
            drive = drive + rng.normal(0.0, cfg.group_signal_std, cfg.n_groups)[group]
        if cfg.signal_std > 0:
            drive = drive + rng.normal(0.0, cfg.signal_std, N)
        if cfg.noise_std > 0:
            drive = drive + rng.normal(0.0, cfg.noise_std, N)
        s = np.tanh(drive)
        M = s.mean()
        xi = rng.normal(0.0, cfg.price_noise, A) if cfg.price_noise > 0 else np.zeros(A)
        cur = cur + cfg.impact_coeff * M + xi
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(cur)) and np.all(np.abs(cur) < 700)):
            raise SimulationError(f"non-finite state at step {t}", step=t, traj_id=traj_id)
        actions[r] = np.where(s > cfg.spin_threshold, 1, np.where(s < -cfg.spin_threshold, -1, 0))
        M_trace[r] = M
        logp[r] = cur

    V = np.abs(M_trace)
    tau = first_crossing(V, cfg.event_threshold)
    meta = {
        "kind": "cws",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "symbols": list(CWS_SYMBOLS),
        "control": cfg.coupling,
    }
    return ActionTrajectory(actions, np.exp(logp), V, cfg.label, tau, meta, traj_id)


# ---------------------------------------------------------------- Vicsek


def polarization(theta: np.ndarray) -> float:
    return float(np.hypot(np.cos(theta).mean(), np.sin(theta).mean()))


def quantize_headings(theta: np.ndarray, n_bins: int = 8) -> np.ndarray:
    frac = np.mod(theta, 2 * np.pi) / (2 * np.pi)
    return np.minimum((frac * n_bins).astype(np.int64), n_bins - 1).astype(np.int8)


def simulate_vicsek(config: VicsekConfig, traj_id: str = "") -> ActionTrajectory:
    """Standard Vicsek model with periodic boundaries.

    Headings align to the mean heading of all particles within
    ``interaction_radius`` (self included), are perturbed by a uniform
    angle in ``[-eta/2, eta/2]``, and particles then move at constant
    speed.
    """
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    N, L, T = cfg.n_particles, cfg.box_size, cfg.horizon
    pos = rng.uniform(0.0, L, (N, 2))
    theta = rng.uniform(-np.pi, np.pi, N)

    actions = np.zeros((T, N), dtype=np.int8)
    V = np.zeros(T)
    for r in range(T):
        tree = cKDTree(pos, boxsize=L)
        pairs = tree.query_pairs(cfg.interaction_radius, output_type="ndarray")
        c, s = np.cos(theta), np.sin(theta)
        sc, ss = c.copy(), s.copy()
        if pairs.size:
            i, j = pairs[:, 0], pairs[:, 1]
            np.add.at(sc, i, c[j])
            np.add.at(sc, j, c[i])
            np.add.at(ss, i, s[j])
            np.add.at(ss, j, s[i])
        theta = np.arctan2(ss, sc) + rng.uniform(-cfg.eta / 2, cfg.eta / 2, N)
        pos = np.mod(pos + cfg.speed * np.column_stack([np.cos(theta), np.sin(theta)]), L)
        # cKDTree rejects coordinates equal to the box size
        pos[pos >= L] = 0.0
        actions[r] = quantize_headings(theta, cfg.n_bins)
        V[r] = polarization(theta)

    tau = first_crossing(V, cfg.event_threshold, cfg.consecutive, start=cfg.warmup)
    meta = {
        "kind": "vicsek",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "symbols": list(range(cfg.n_bins)),
        "control": cfg.eta,
    }
    return ActionTrajectory(actions, np.ones((T, 0)), V, cfg.label, tau, meta, traj_id)


# ---------------------------------------------------------------- sweeps


def derive_seed(base_seed: int, level_index: int, replicate: int) -> int:
    """64-bit seed from (base seed, level index, replicate index)."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(level_index), int(replicate)))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32) | int(lo))


def sweep_specs(kind: str, levels: Sequence[float], seeds_per_level: int, base_seed: int = 0,
                params: dict | None = None) -> list[tuple[str, object]]:
    """(trajectory id, config) pairs for a sweep, without running anything."""
    if not levels:
        raise ValueError("levels must be nonempty")
    if seeds_per_level < 1:
        raise ValueError("seeds_per_level must be >= 1")
    params = dict(params or {})
    out = []
    for li, level in enumerate(levels):
        for rep in range(seeds_per_level):
            seed = derive_seed(base_seed, li, rep)
            if kind == "cws":
                cfg = CwsConfig(**{**params, "coupling": float(level), "seed": seed})
            elif kind == "vicsek":
                cfg = VicsekConfig(**{**params, "eta": float(level), "seed": seed})
            else:
                raise ValueError(f"unknown substrate kind {kind!r}")
            out.append((f"{kind}-L{li}-{level:g}-r{rep:03d}", cfg))
    return out


def simulate(config, traj_id: str = "") -> ActionTrajectory:
    if isinstance(config, CwsConfig):
        return simulate_cws(config, traj_id)
    if isinstance(config, VicsekConfig):
        return simulate_vicsek(config, traj_id)
    raise TypeError(f"unsupported config type {type(config).__name__}")


def build_sweep(kind: str, levels: Sequence[float], seeds_per_level: int, base_seed: int = 0,
                params: dict | None = None) -> list[ActionTrajectory]:
    """Simulate every (level, replicate) pair of a sweep."""
    trajs = []
    for tid, cfg in sweep_specs(kind, levels, seeds_per_level, base_seed, params):
        try:
            trajs.append(simulate(cfg, tid))
        except SimulationError as exc:
            exc.traj_id = tid
            raise SimulationError(f"{tid}: {exc}", exc.step, tid) from exc
    return trajs


def config_from_dict(kind: str, d: dict):
    cls = {"cws": CwsConfig, "vicsek": VicsekConfig}[kind]
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {kind} config keys: {sorted(unknown)}")
    return cls(**d)


# ---------------------------------------------------------------- file I/O


def write_trajectory(traj: ActionTrajectory, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.ndjson`` (one record per step) and ``<path>.json`` sidecar."""
    path = Path(path)
    codes = traj.symbol_codes()
    lines = []
    for r in range(traj.n_steps):
        rec = {
            "step": r + 1,
            "actions": "".join(map(str, codes[r].tolist())),
            "prices": [float(x) for x in traj.prices[r]],
            "V_a": float(traj.order_param[r]),
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    data = Path(str(path) + ".ndjson")
    side = Path(str(path) + ".json")
    sidecar = {
        "traj_id": traj.traj_id,
        "label": traj.label,
        "event_time": traj.event_time,
        "meta": traj.meta,
    }
    atomic_write_text(data, "\n".join(lines) + "\n")
    atomic_write_text(side, json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return data, side


def read_trajectory(path: str | Path) -> ActionTrajectory:
    path = Path(path)
    base = str(path)
    for suffix in (".ndjson", ".json"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    side = json.loads(Path(base + ".json").read_text())
    symbols = np.asarray(side["meta"]["symbols"])
    acts, prices, V = [], [], []
    with open(base + ".ndjson") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            acts.append(np.frombuffer(rec["actions"].encode(), dtype=np.uint8) - ord("0"))
            prices.append(rec["prices"])
            V.append(rec["V_a"])
    actions = symbols[np.vstack(acts)].astype(np.int8)
    T = len(V)
    P = np.asarray(prices, dtype=float).reshape(T, -1)
    return ActionTrajectory(actions, P, np.asarray(V, dtype=float), side["label"],
                            side["event_time"], side["meta"], side["traj_id"])
