"""Net-load forecasts and forecast-scenario fans.

Forecasters only ever receive uncontrollable net load (demand minus solar);
storage actions never feed back into them.

Two point forecasters are provided:

* :func:`forecast_seasonal` -- mean of the same hour of day over the trailing
  week of history, a seasonal-persistence stand-in for a seasonal ARIMA;
* :func:`forecast_artificial` -- the truth perturbed multiplicatively,
  ``(1 + x) d`` with ``x ~ N(0, min(t, 10)/10 * sigma^2)`` at lead ``t``, for
  studying sensitivity to forecast accuracy.

Scenarios add independent normal residuals with per-lead-time mean and
standard deviation estimated from historical forecast errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PERIOD = 24
MAX_DAYS = 7
RAMP_STEPS = 10


class InsufficientHistory(ValueError):
    pass


@dataclass
class ForecastRequest:
    history: np.ndarray      # (nodes, length) hourly net load, kW
    horizon: int
    n_scenarios: int = 1
    seed: int = 0

    def __post_init__(self):
        self.history = np.atleast_2d(np.asarray(self.history, dtype=float))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")


@dataclass
class ResidualStats:
    mean: np.ndarray   # (nodes, horizon)
    std: np.ndarray    # (nodes, horizon)

    @classmethod
    def zeros(cls, nodes: int, horizon: int) -> "ResidualStats":
        return cls(np.zeros((nodes, horizon)), np.zeros((nodes, horizon)))

    def window(self, start: int, stop: int) -> "ResidualStats":
        return ResidualStats(self.mean[:, start:stop], self.std[:, start:stop])


@dataclass
class ScenarioSet:
    point: np.ndarray        # (nodes, horizon)
    scenarios: np.ndarray    # (n_scenarios, nodes, horizon)
    residual_stats: ResidualStats

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.shape[0]


def forecast_seasonal(req: ForecastRequest, period: int = PERIOD, max_days: int = MAX_DAYS,
                      min_periods: int = 2) -> np.ndarray:
    """Seasonal persistence: each target hour is the mean of the same hour of
    day over the last ``max_days`` periods of history (fewer if unavailable)."""
    hist = req.history
    n = hist.shape[1]
    if n < min_periods * period:
        raise InsufficientHistory(f"{n} samples of history, need {min_periods * period}")
    days = min(max_days, n // period)
    last = hist[:, n - days * period:].reshape(hist.shape[0], days, period)
    profile = last.mean(axis=1)
    # profile[:, k] holds hour-of-day of history index n - period + k
    phase = (np.arange(req.horizon)) % period
    return profile[:, phase]


def forecast_artificial(truth, sigma: float, seed=0, rng=None) -> np.ndarray:
    """``(1 + x) * truth`` with lead-dependent zero-mean normal ``x``.

    ``truth`` is (..., horizon); element at lead ``t`` (counted from 1) has
    variance ``min(t, 10) / 10 * sigma^2``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    truth = np.asarray(truth, dtype=float)
    if sigma == 0:
        return truth.copy()
    rng = rng if rng is not None else np.random.default_rng(seed)
    lead = np.arange(1, truth.shape[-1] + 1)
    sd = sigma * np.sqrt(np.minimum(lead, RAMP_STEPS) / RAMP_STEPS)
    x = rng.standard_normal(truth.shape) * sd
    return (1.0 + x) * truth


def residual_stats_update(forecasts, realized) -> ResidualStats:
    """Per-lead mean and standard deviation of ``realized - forecast``.

    ``forecasts``/``realized`` are (records, nodes, horizon) or
    (records, horizon); NaN marks missing realizations.
    """
    f = np.asarray(forecasts, dtype=float)
    r = np.asarray(realized, dtype=float)
    if f.shape != r.shape:
        raise ValueError("forecast and realized arrays differ in shape")
    if f.ndim == 2:
        f, r = f[:, None, :], r[:, None, :]
    if f.shape[0] < 2:
        raise InsufficientHistory("need at least two paired records")
    res = r - f
    counts = np.sum(np.isfinite(res), axis=0)
    if np.any(counts < 2):
        raise InsufficientHistory("a lead time has fewer than two paired records")
    mean = np.nanmean(res, axis=0)
    std = np.nanstd(res, axis=0, ddof=1)
    return ResidualStats(mean, std)


def backtest_residual_stats(history, horizon: int, forecaster, min_history: int,
                            max_origins: int = 48) -> ResidualStats:
    """Residual statistics from re-running ``forecaster`` at past origins.

    ``forecaster(hist_slice, horizon, origin)`` returns a (nodes, horizon)
    forecast.  Lead times that no backtest can score inherit the statistics of
    the longest scored lead; with no scorable origin at all the statistics are
    zero (scenarios collapse onto the point forecast).
    """
    hist = np.atleast_2d(np.asarray(history, dtype=float))
    nodes, n = hist.shape
    origins = list(range(max(min_history, n - max_origins - 1), n - 1))
    if not origins:
        return ResidualStats.zeros(nodes, horizon)
    F = np.full((len(origins), nodes, horizon), np.nan)
    R = np.full_like(F, np.nan)
    for k, o in enumerate(origins):
        F[k] = forecaster(hist[:, :o], horizon, o)
        avail = min(horizon, n - o)
        R[k, :, :avail] = hist[:, o:o + avail]
    F[np.isnan(R)] = np.nan
    counts = np.sum(np.isfinite(R[:, 0, :]), axis=0)
    scored = np.flatnonzero(counts >= 2)
    if scored.size == 0:
        return ResidualStats.zeros(nodes, horizon)
    last = scored[-1]
    stats = residual_stats_update(F[:, :, :last + 1], R[:, :, :last + 1])
    mean = np.concatenate([stats.mean, np.repeat(stats.mean[:, -1:], horizon - last - 1, 1)], 1)
    std = np.concatenate([stats.std, np.repeat(stats.std[:, -1:], horizon - last - 1, 1)], 1)
    return ResidualStats(mean, std)


def generate_scenarios(point, stats: ResidualStats, n: int, seed=0, rng=None) -> ScenarioSet:
    """``n`` scenarios ``point + eps`` with independent normal residuals per node and step."""
    point = np.atleast_2d(np.asarray(point, dtype=float))
    if n < 1:
        raise ValueError("need at least one scenario")
    mean = np.broadcast_to(stats.mean, point.shape)
    std = np.broadcast_to(stats.std, point.shape)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise ValueError("residual statistics must be finite")
    rng = rng if rng is not None else np.random.default_rng(seed)
    eps = mean + std * rng.standard_normal((n,) + point.shape)
    return ScenarioSet(point, point[None] + eps, ResidualStats(np.array(mean), np.array(std)))


# ---------------------------------------------------------------------------
# forecaster objects used by the controllers


class SeasonalForecaster:
    """Seasonal-persistence forecaster over the caller's own history.

    ``lag`` shifts the forecast window: with history ending at step ``n`` the
    forecast covers ``[n + lag, n + lag + horizon)``.
    """

    name = "seasonal"
    min_history = 2 * PERIOD

    def __init__(self, period: int = PERIOD, max_days: int = MAX_DAYS):
        self.period = period
        self.max_days = max_days

    def point(self, history, horizon, lag: int = 0, rng=None, nodes=None):
        req = ForecastRequest(history, horizon + lag)
        return forecast_seasonal(req, self.period, self.max_days)[:, lag:]

    def residual_stats(self, history, horizon, lag: int = 0, rng=None) -> ResidualStats:
        def fc(h, H, o):
            return forecast_seasonal(ForecastRequest(h, H), self.period, self.max_days)
        stats = backtest_residual_stats(history, horizon + lag, fc, self.min_history)
        return stats.window(lag, lag + horizon)


class ArtificialForecaster:
    """Perturbed-truth forecaster with adjustable accuracy.

    ``truth(nodes, start, stop)`` returns the true net load of the given
    nodes; it is the one sanctioned look at future data and exists only to
    emulate a forecaster of known error level.  Leads are counted from the end
    of the history, so a lagged window starts at lead ``lag + 1``.
    """

    name = "artificial"
    min_history = 1

    def __init__(self, sigma: float, truth):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = float(sigma)
        self.truth = truth

    def point(self, history, horizon, lag: int = 0, rng=None, nodes=None):
        start = np.atleast_2d(history).shape[1]
        d = np.atleast_2d(self.truth(nodes, start, start + lag + horizon))
        return forecast_artificial(d, self.sigma, rng=rng)[:, lag:]

    def residual_stats(self, history, horizon, lag: int = 0, rng=None) -> ResidualStats:
        hist = np.atleast_2d(np.asarray(history, dtype=float))

        def fc(h, H, o):
            real = hist[:, o:o + H]
            pad = np.full((hist.shape[0], H - real.shape[1]), np.nan)
            return forecast_artificial(np.concatenate([real, pad], 1), self.sigma, rng=rng)
        stats = backtest_residual_stats(hist, horizon + lag, fc, self.min_history)
        return stats.window(lag, lag + horizon)
