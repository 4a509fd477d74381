"""Discrete Ricci flow on a snapshot and its neckpinch time.

Each iteration applies ``w_e <- w_e (1 - eps * kappa_e)`` to every edge,
optionally rescales so the total edge weight is preserved, and recomputes
curvature on the updated weights. The pinch time is the first iteration
at which some edge curvature falls below ``pinch_curvature`` or some
weight falls below ``min_weight``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .curvature import edge_curvatures
from .agent_graph import AgentGraphSnapshot

NOT_REACHED = -1
UPDATE_RULE = "w <- w * (1 - step_size * kappa); renormalize total weight"


@dataclass(frozen=True)
class FlowConfig:
    step_size: float = 0.1
    max_iters: int = 200
    pinch_curvature: float = -2.0
    min_weight: float = 1e-4
    renormalize: bool = True
    alpha: float = 0.5
    stationary_tol: float = 1e-12

    def validate(self) -> None:
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.pinch_curvature >= 0:
            raise ValueError("pinch_curvature must be negative")
        if self.step_size * abs(self.pinch_curvature) >= 1:
            raise ValueError("step_size * |pinch_curvature| must be < 1")
        if self.min_weight <= 0:
            raise ValueError("min_weight must be positive")

    def metadata(self) -> dict:
        return {**asdict(self), "update_rule": UPDATE_RULE}


@dataclass
class FlowTrace:
    """Per-iteration diagnostics; index 0 is the initial graph."""

    min_curvature: list[float] = field(default_factory=list)
    mean_curvature: list[float] = field(default_factory=list)
    min_weight: list[float] = field(default_factory=list)
    total_weight: list[float] = field(default_factory=list)
    tau_sing: int = NOT_REACHED
    pinch_edge: int | None = None
    pinch_reason: str | None = None
    degenerate: bool = False
    stationary: bool = False
    weights: np.ndarray | None = None

    @property
    def reached(self) -> bool:
        return self.tau_sing != NOT_REACHED


def _record(trace: FlowTrace, kappa: np.ndarray, w: np.ndarray) -> None:
    k = kappa[np.isfinite(kappa)]
    trace.min_curvature.append(float(k.min()) if k.size else float("nan"))
    trace.mean_curvature.append(float(k.mean()) if k.size else float("nan"))
    trace.min_weight.append(float(w.min()))
    trace.total_weight.append(float(w.sum()))


def _pinch(kappa: np.ndarray, w: np.ndarray, cfg: FlowConfig) -> tuple[int, str] | None:
    k = np.where(np.isfinite(kappa), kappa, np.inf)
    if k.min() < cfg.pinch_curvature:
        return int(np.argmin(k)), "curvature"
    if w.min() < cfg.min_weight:
        return int(np.argmin(w)), "weight"
    return None


def ricci_flow_tau(graph: AgentGraphSnapshot, config: FlowConfig = FlowConfig()) -> FlowTrace:
    """Run a fresh flow on ``graph`` and return its trace.

    ``tau_sing`` is the first iteration ``s >= 1`` that meets a pinch
    criterion, or ``NOT_REACHED``. A flow whose weights stop changing
    (to ``stationary_tol``) is a fixed point and exits early unpinched.
    """
    config.validate()
    trace = FlowTrace()
    if graph.degenerate or graph.n_edges == 0:
        trace.degenerate = True
        return trace

    w = graph.weight.astype(float).copy()
    total = w.sum()
    kappa = edge_curvatures(graph, config.alpha, weight=w)
    _record(trace, kappa, w)
    for s in range(1, config.max_iters + 1):
        step = np.where(np.isfinite(kappa), kappa, 0.0)
        new = w * (1.0 - config.step_size * step)
        if config.renormalize:
            new *= total / new.sum()
        new = np.maximum(new, 0.0)
        moved = float(np.max(np.abs(new - w)))
        w = new
        if w.min() > 0:
            kappa = edge_curvatures(graph, config.alpha, weight=w)
        else:
            kappa = np.where(w > 0, kappa, -np.inf)
        _record(trace, kappa, w)
        hit = _pinch(kappa, w, config)
        if hit is not None:
            trace.tau_sing = s
            trace.pinch_edge, trace.pinch_reason = hit
            break
        if moved <= config.stationary_tol * max(1.0, total):
            trace.stationary = True
            break
    trace.weights = w
    return trace


def tau_sing_series(graphs, config: FlowConfig = FlowConfig()) -> list[int]:
    """``tau_sing`` per snapshot with the sentinel for unreached or degenerate flows."""
    return [ricci_flow_tau(g, config).tau_sing for g in graphs]
