"""Classical herding statistics used as comparison baselines.

CSAD and the (augmented) CCK regression with Newey-West errors, the LSV
buy/sell imbalance measure, a curvature detector on the asset
price-correlation graph, and mean pairwise action mutual information.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .curvature import CurvatureSummary, edge_curvatures, summarize
from .agent_graph import AgentGraphSnapshot, GraphConfig, snapshot_times
from .substrates import ActionTrajectory

LSV_CONVENTION = "H = |p - p_bar| - AF, AF = E|B/n - p_bar| with B ~ Binomial(n, p_bar)"


# ---------------------------------------------------------------- CSAD


@dataclass
class CsadSeries:
    t: np.ndarray
    csad: np.ndarray
    rm: np.ndarray

    @property
    def abs_rm(self) -> np.ndarray:
        return np.abs(self.rm)

    @property
    def rm2(self) -> np.ndarray:
        return self.rm**2


def csad(returns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise mean absolute deviation from the equal-weighted mean.

    ``returns`` is ``[T, n]`` with the cross-section on axis 1.
    """
    R = np.asarray(returns, dtype=float)
    rm = R.mean(axis=1)
    return np.abs(R - rm[:, None]).mean(axis=1), rm


def agent_returns(traj: ActionTrajectory) -> np.ndarray:
    """Per-agent return proxy: previous action (as a position) times the market return."""
    pos = np.asarray(traj.actions, dtype=float)
    if len(traj.symbols) != 3:
        raise ValueError("agent cross-section needs a buy/hold/sell alphabet")
    held = np.vstack([np.zeros((1, pos.shape[1])), pos[:-1]])
    return held * traj.market_return[:, None]


def csad_series(traj: ActionTrajectory, over: str = "assets") -> CsadSeries:
    if over == "assets":
        if traj.prices.shape[1] < 2:
            raise ValueError("CSAD over assets needs n_assets >= 2")
        c, rm = csad(traj.asset_returns)
    elif over == "agents":
        c, rm = csad(agent_returns(traj))
    else:
        raise ValueError("over must be 'assets' or 'agents'")
    return CsadSeries(traj.steps, c, rm)


def mean_field_sample(n_agents: int, n_steps: int, M: float, sigma_xi: float, rng,
                      beta_spread: float = 0.0) -> dict:
    """Synthetic mean-field market at a fixed order parameter ``M``.

    Agents hold binary spins with mean ``M``; returns are
    ``beta_i * M_hat(t) + xi`` where the idiosyncratic part has standard
    deviation ``sigma_xi * sqrt(1 - M^2)``, the spin dispersion of the
    population. Returns spins, returns and the mean-field curvature
    proxy ``kappa = M_hat^2``.
    """
    if not -1 <= M <= 1:
        raise ValueError("M must lie in [-1, 1]")
    spins = np.where(rng.random((n_steps, n_agents)) < (1 + M) / 2, 1.0, -1.0)
    m_hat = spins.mean(axis=1)
    beta = 1.0 + beta_spread * rng.standard_normal(n_agents)
    beta /= beta.mean()
    xi = sigma_xi * np.sqrt(1 - M**2) * rng.standard_normal((n_steps, n_agents))
    R = beta[None, :] * m_hat[:, None] + xi
    return {"spins": spins, "m_hat": m_hat, "returns": R, "kappa": m_hat**2}


def bridge_prediction(kappa, sigma_xi: float) -> np.ndarray:
    """``sigma_xi * sqrt(2/pi) * sqrt(1 - kappa)``."""
    k = np.asarray(kappa, dtype=float)
    return sigma_xi * math.sqrt(2 / math.pi) * np.sqrt(np.clip(1 - k, 0, None))


# ---------------------------------------------------------------- CCK


class RankDeficientError(ValueError):
    def __init__(self, columns: list[str]):
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(columns)}")
        self.columns = columns


@dataclass
class CckFit:
    names: list[str]
    params: np.ndarray
    cov: np.ndarray
    lag: int
    nobs: int
    meta: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def tvalues(self) -> np.ndarray:
        return self.params / self.se

    def coef(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.names.index(name)])


def newey_west_lag(n: int) -> int:
    return int(math.floor(4 * (n / 100) ** (2 / 9)))


def hac_covariance(X: np.ndarray, resid: np.ndarray, lag: int, small_sample: bool = False) -> np.ndarray:
    """Newey-West (Bartlett kernel) covariance of OLS coefficients."""
    n, k = X.shape
    u = X * resid[:, None]
    S = u.T @ u
    for l in range(1, lag + 1):
        g = u[l:].T @ u[:-l]
        S += (1 - l / (lag + 1)) * (g + g.T)
    if small_sample:
        S *= n / (n - k)
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


def collinear_columns(X: np.ndarray, names: list[str]) -> list[str]:
    """Columns that lie in the span of the others."""
    r = np.linalg.matrix_rank(X)
    if r == X.shape[1]:
        return []
    return [nm for j, nm in enumerate(names) if np.linalg.matrix_rank(np.delete(X, j, axis=1)) == r]


def ols_hac(y, X, names: list[str], lag: int | None = None) -> CckFit:
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    bad = collinear_columns(X, names)
    if bad:
        raise RankDeficientError(bad)
    n = y.size
    lag = newey_west_lag(n) if lag is None else lag
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    cov = hac_covariance(X, y - X @ beta, lag)
    return CckFit(list(names), beta, cov, lag, n, {"cov_type": "HAC", "kernel": "bartlett"})


def cck_regress(series: CsadSeries, kappa=None, augment: bool = True, lag: int | None = None) -> CckFit:
    """CSAD on ``|R_m|``, ``R_m^2`` and (when augmented) mean curvature.

    Rows with any non-finite entry are dropped before fitting.
    """
    cols = [np.ones_like(series.csad), series.abs_rm, series.rm2]
    names = ["alpha", "gamma1", "gamma2"]
    if augment:
        if kappa is None:
            raise ValueError("augmented regression needs a kappa series")
        cols.append(np.asarray(kappa, dtype=float))
        names.append("gamma3")
    X = np.column_stack(cols)
    y = np.asarray(series.csad, dtype=float)
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    if ok.sum() < 30:
        raise ValueError("need at least 30 aligned observations")
    return ols_hac(y[ok], X[ok], names, lag)


def align_to_grid(t_series, values, t_grid) -> np.ndarray:
    """Pick ``values`` at the steps in ``t_grid`` (NaN where absent)."""
    lookup = {int(t): v for t, v in zip(t_series, values)}
    return np.array([lookup.get(int(t), np.nan) for t in t_grid], dtype=float)


def windowed_csad(traj: ActionTrajectory, graph_config: GraphConfig = GraphConfig(), over: str = "assets",
                  until: int | None = None) -> CsadSeries:
    """CSAD and market return averaged over each snapshot window."""
    s = csad_series(traj, over)
    times = snapshot_times(traj.n_steps, graph_config, until)
    w = graph_config.window
    c = np.array([s.csad[t - w : t].mean() for t in times])
    rm = np.array([s.rm[t - w : t].mean() for t in times])
    return CsadSeries(np.asarray(times), c, rm)


# ---------------------------------------------------------------- LSV


def adjustment_factor(n: int, p_bar: float) -> float:
    """``E|B/n - p_bar|`` for ``B ~ Binomial(n, p_bar)``, by exact summation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(n + 1)
    return float(np.sum(binom.pmf(k, n, p_bar) * np.abs(k / n - p_bar)))


@dataclass
class LsvSeries:
    t: np.ndarray
    buyers: np.ndarray
    sellers: np.ndarray
    p: np.ndarray
    p_bar: float
    af: np.ndarray
    h: np.ndarray
    convention: str = LSV_CONVENTION


def lsv_from_counts(t, buyers, sellers, p_bar: float | None = None) -> LsvSeries:
    """LSV herding per window from buyer/seller counts.

    ``p_bar`` defaults to the pooled buyer share over all windows.
    Windows with no buyers or sellers are recorded as missing (NaN).
    """
    B = np.asarray(buyers, dtype=np.int64)
    S = np.asarray(sellers, dtype=np.int64)
    n = B + S
    ok = n > 0
    if p_bar is None:
        p_bar = float(B[ok].sum() / n[ok].sum()) if ok.any() else float("nan")
    p = np.full(B.size, np.nan)
    af = np.full(B.size, np.nan)
    p[ok] = B[ok] / n[ok]
    if np.isfinite(p_bar):
        cache: dict[int, float] = {}
        for r in np.flatnonzero(ok):
            m = int(n[r])
            if m not in cache:
                cache[m] = adjustment_factor(m, p_bar)
            af[r] = cache[m]
    h = np.abs(p - p_bar) - af
    return LsvSeries(np.asarray(t), B, S, p, float(p_bar), af, h)


def lsv_series(traj: ActionTrajectory, graph_config: GraphConfig = GraphConfig(),
               until: int | None = None) -> LsvSeries:
    """Windowed LSV on the snapshot grid; an agent's side is its net action sign."""
    if len(traj.symbols) != 3:
        raise ValueError("LSV needs a buy/hold/sell alphabet")
    a = np.asarray(traj.actions, dtype=np.int64)
    times = snapshot_times(traj.n_steps, graph_config, until)
    w = graph_config.window
    net = np.array([a[t - w : t].sum(axis=0) for t in times])
    return lsv_from_counts(times, (net > 0).sum(axis=1), (net < 0).sum(axis=1))


# ---------------------------------------------------------------- price graph


@dataclass
class PriceGraphSeries:
    t: np.ndarray
    summaries: list[CurvatureSummary]
    mean_abs_rho: np.ndarray


def correlation_graph(t: int, returns: np.ndarray, zero_tol: float = 1e-12) -> tuple[AgentGraphSnapshot, float]:
    """Asset graph with edge length ``sqrt(2 (1 - rho))``.

    Pairs with undefined correlation (a zero-variance asset) or zero
    length are dropped. Returns the graph and the mean ``|rho|`` over
    defined pairs.
    """
    R = np.asarray(returns, dtype=float)
    n = R.shape[1]
    sd = R.std(axis=0)
    live = sd > 0
    rho = np.full((n, n), np.nan)
    if live.sum() >= 2:
        rho[np.ix_(live, live)] = np.corrcoef(R[:, live], rowvar=False)
    iu, ju = np.triu_indices(n, k=1)
    r = rho[iu, ju]
    defined = np.isfinite(r)
    length = np.sqrt(np.clip(2 * (1 - r[defined]), 0, None))
    keep = length > zero_tol
    edges = list(zip(iu[defined][keep].tolist(), ju[defined][keep].tolist(), length[keep].tolist()))
    g = AgentGraphSnapshot.from_edges(t, n, edges) if edges else AgentGraphSnapshot.empty(t, n)
    mar = float(np.mean(np.abs(r[defined]))) if defined.any() else float("nan")
    return g, mar


def price_corr_curvature(traj: ActionTrajectory, graph_config: GraphConfig = GraphConfig(),
                         alpha: float = 0.5, until: int | None = None) -> PriceGraphSeries:
    if traj.prices.shape[1] < 3:
        raise ValueError("price-correlation graph needs n_assets >= 3")
    R = traj.asset_returns
    times = snapshot_times(traj.n_steps, graph_config, until)
    w = graph_config.window
    sums, mar = [], []
    for t in times:
        g, m = correlation_graph(t, R[t - w : t])
        mar.append(m)
        if g.degenerate:
            sums.append(CurvatureSummary.missing(t))
        else:
            sums.append(summarize(t, edge_curvatures(g, alpha)))
    return PriceGraphSeries(np.asarray(times), sums, np.asarray(mar))


# ---------------------------------------------------------------- AA-MI


def pairwise_mi(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """Plug-in mutual information (nats) between every pair of agent columns."""
    codes = np.asarray(codes)
    T, N = codes.shape
    ind = [(codes == q).astype(float) for q in range(n_symbols)]
    marg = np.stack([x.mean(axis=0) for x in ind])  # [q, N]
    mi = np.zeros((N, N))
    for a in range(n_symbols):
        for b in range(n_symbols):
            pab = ind[a].T @ ind[b] / T
            denom = np.outer(marg[a], marg[b])
            with np.errstate(divide="ignore", invalid="ignore"):
                term = np.where(pab > 0, pab * np.log(pab / denom), 0.0)
            mi += term
    np.fill_diagonal(mi, 0.0)
    return np.maximum(mi, 0.0)


@dataclass
class AaMiSeries:
    t: np.ndarray
    mi: np.ndarray
    degenerate: bool


def aa_mi_series(traj: ActionTrajectory, graph_config: GraphConfig = GraphConfig(),
                 baseline_window: int = 35, until: int | None = None) -> AaMiSeries:
    """Mean pairwise action mutual information per snapshot window.

    ``degenerate`` is set when the series has variance below 1e-12 over
    its first ``baseline_window`` samples.
    """
    if graph_config.window < 30:
        raise ValueError("AA-MI needs a window of at least 30 steps")
    codes = traj.symbol_codes()
    q = len(traj.symbols)
    times = snapshot_times(traj.n_steps, graph_config, until)
    w = graph_config.window
    N = codes.shape[1]
    iu = np.triu_indices(N, k=1)
    vals = np.array([pairwise_mi(codes[t - w : t], q)[iu].mean() for t in times])
    head = vals[:baseline_window]
    return AaMiSeries(np.asarray(times), vals, bool(head.size == 0 or np.var(head) < 1e-12))
