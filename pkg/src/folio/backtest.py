"""Gradient-ascent training, transaction-cost accounting, performance
metrics, oracle weights, classical baselines, and the walk-forward driver.

Training is plain minibatch gradient ascent (no momentum); an epoch is one
shuffled pass over full-size batches. When a validation range is supplied,
the returned parameters are the snapshot with the best validation objective.
Evaluation-time weights always use hard (exact-sort) constraint thresholds.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import models as mdl
from . import objectives as obj
from .data import ReturnsPanel, shrink_covariance
from .errors import ContractError, NumericalError
from .layers import ConstraintSpec, WeightVector, combined

TRADING_DAYS = 252


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training job."""

    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 1000
    cost_bp: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.cost_bp < 0:
            raise ContractError(f"cost_bp must be >= 0, got {self.cost_bp}")


@dataclass
class TrainResult:
    model: mdl.ScoreModel
    train_curve: list
    val_curve: Optional[list] = None
    best_epoch: int = -1


@dataclass
class BacktestReport:
    """Daily net-of-cost returns, the weights behind them, and their metrics."""

    net_returns: np.ndarray
    weights: np.ndarray
    metrics: dict
    dates: Optional[list] = None


@dataclass
class OracleWeights:
    """Optimal weights of a known generating regime, L1-normalized."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)


@dataclass
class WeightSeries:
    """Daily weights emitted by a baseline, aligned to panel rows."""

    dates: list
    weights: np.ndarray
    start_index: int = 0


# ---------------------------------------------------------------------------
# training


def _window_starts(panel: ReturnsPanel, lag: int, lo: int, hi: int, clip_window: bool):
    """Window-start indices whose target row lies in [lo, hi).

    ``clip_window`` additionally requires the window itself inside [lo, hi)
    (used for training; validation/test windows may reach back further).
    """
    first = lo if clip_window else max(0, lo - lag)
    starts = [i for i in range(first, hi - lag) if i + lag >= lo]
    return np.asarray(starts, dtype=int)


def _gather(panel: ReturnsPanel, lag: int, starts: np.ndarray):
    view = np.lib.stride_tricks.sliding_window_view(panel.returns, lag, axis=0)
    windows = view[starts].transpose(0, 2, 1)  # (B, lag, N)
    targets = panel.returns[starts + lag]
    return windows, targets


def _run_sgd(
    model: mdl.ScoreModel,
    panel: ReturnsPanel,
    config: TrainConfig,
    build_objective: Callable,
    train_range: Optional[tuple] = None,
    val_range: Optional[tuple] = None,
) -> TrainResult:
    lag = model.lag
    lo, hi = train_range if train_range is not None else (0, panel.n_days)
    starts = _window_starts(panel, lag, lo, hi, clip_window=True)
    if starts.size < config.batch_size:
        raise ContractError(
            f"batch_size {config.batch_size} exceeds the {starts.size} available "
            f"training samples (lag {lag}, rows [{lo}, {hi}))"
        )
    val_batch = None
    if val_range is not None:
        v_starts = _window_starts(panel, lag, val_range[0], val_range[1], clip_window=False)
        if v_starts.size < 2:
            raise ContractError("validation range yields fewer than 2 samples")
        val_batch = _gather(panel, lag, v_starts)

    rng = np.random.default_rng(config.seed)
    params = model.params.copy()
    curve, val_curve = [], []
    best = (-np.inf, params.copy(), -1)
    n_batches = starts.size // config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(starts.size)
        epoch_vals = []
        for step in range(n_batches):
            batch = starts[order[step * config.batch_size : (step + 1) * config.batch_size]]
            windows, targets = _gather(panel, lag, batch)
            tape = ad.Tape()
            params_t = tape.leaf(params)
            objective = build_objective(tape, params_t, windows, targets)
            value = float(objective.data)
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite objective at epoch {epoch}, step {step}"
                )
            grad = ad.backward(tape, objective).wrt(params_t)
            if not np.isfinite(grad).all():
                raise NumericalError(
                    f"non-finite gradient at epoch {epoch}, step {step}"
                )
            params += config.learning_rate * grad
            epoch_vals.append(value)
        curve.append(float(np.mean(epoch_vals)))
        if val_batch is not None:
            tape = ad.Tape()
            params_t = tape.leaf(params)
            val_obj = build_objective(tape, params_t, *val_batch)
            val_value = float(val_obj.data)
            val_curve.append(val_value)
            if val_value > best[0]:
                best = (val_value, params.copy(), epoch)
    if val_batch is not None:
        final_params, best_epoch = best[1], best[2]
    else:
        final_params, best_epoch = params, config.epochs - 1
    return TrainResult(
        model=model.with_params(final_params),
        train_curve=curve,
        val_curve=val_curve if val_batch is not None else None,
        best_epoch=best_epoch,
    )


def train(
    model: mdl.ScoreModel,
    layer_spec: ConstraintSpec,
    objective_spec: obj.ObjectiveSpec,
    panel: ReturnsPanel,
    config: TrainConfig,
    train_range: Optional[tuple] = None,
    val_range: Optional[tuple] = None,
) -> TrainResult:
    """Gradient-ascend the objective through the constraint layer.

    Returns the trained model and the per-epoch objective curve; with a
    validation range the parameters are the best-validation snapshot.
    Thresholded layers run with relaxed (soft-sort) thresholds here and hard
    ones at evaluation time.
    """
    layer_spec.validate_for(model.n_assets)

    def build(tape, params_t, windows, targets):
        scores = mdl.score_batch(model, windows, tape, params_t)
        weights = combined(scores, layer_spec, relaxed_thresholds=True)
        batch = obj.realized_returns(weights, targets)
        return obj.evaluate(objective_spec, batch)

    return _run_sgd(model, panel, config, build, train_range, val_range)


def train_predictor(
    model: mdl.ScoreModel,
    panel: ReturnsPanel,
    config: TrainConfig,
    train_range: Optional[tuple] = None,
    val_range: Optional[tuple] = None,
) -> TrainResult:
    """Fit scores to next-day returns by mean squared error (two-step
    baseline's prediction stage). The curve reports -MSE (ascended)."""

    def build(tape, params_t, windows, targets):
        scores = mdl.score_batch(model, windows, tape, params_t)
        err = ad.sub(scores, tape.constant(targets))
        return ad.scale(ad.mean_(ad.mul(err, err)), -1.0)

    return _run_sgd(model, panel, config, build, train_range, val_range)


def emit_weights(
    model: mdl.ScoreModel,
    panel: ReturnsPanel,
    layer_spec: ConstraintSpec,
    start: int,
    stop: int,
) -> np.ndarray:
    """Hard-constraint daily weights for panel rows [start, stop).

    Each day's window is the trailing ``lag`` rows ending on that day.
    """
    lag = model.lag
    if start < lag - 1:
        raise ContractError(
            f"row {start} lacks the {lag} rows of history its window needs"
        )
    starts = np.arange(start - lag + 1, stop - lag + 1)
    windows, _ = _gather_windows_only(panel, lag, starts)
    tape = ad.Tape()
    scores = mdl.score_batch(model, windows, tape, tape.leaf(model.params))
    weights = combined(scores, layer_spec, relaxed_thresholds=False)
    return weights.data.copy()


def _gather_windows_only(panel: ReturnsPanel, lag: int, starts: np.ndarray):
    view = np.lib.stride_tricks.sliding_window_view(panel.returns, lag, axis=0)
    return view[starts].transpose(0, 2, 1), None


# ---------------------------------------------------------------------------
# transaction costs and metrics


def net_returns(weights, returns, cost_bp: float) -> np.ndarray:
    """Daily portfolio returns net of linear transaction costs.

    Per instrument: R_{i,t} = w_{i,t-1} r_{i,t}
    - C |w_{i,t} (1 + w_{i,t-1} r_{i,t}) - w_{i,t-1}| with C in basis
    points. The day-0 prior weights are zero (all-cash start), so day 0
    pays the full entry cost.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    r = np.atleast_2d(np.asarray(returns, dtype=float))
    if w.shape != r.shape:
        raise ContractError(f"weights {w.shape} and returns {r.shape} must match")
    if cost_bp < 0:
        raise ContractError(f"cost_bp must be >= 0, got {cost_bp}")
    w_prev = np.vstack([np.zeros(w.shape[1]), w[:-1]])
    gross = w_prev * r
    cost = (cost_bp * 1e-4) * np.abs(w * (1.0 + gross) - w_prev)
    return (gross - cost).sum(axis=1)


def equity_curve(net: np.ndarray) -> np.ndarray:
    """Compounded equity, starting from 1 before the first return."""
    return np.cumprod(1.0 + np.asarray(net, dtype=float))


def drawdown_series(net: np.ndarray) -> np.ndarray:
    """Equity relative to its running peak, minus one (<= 0, 0 at highs)."""
    eq = equity_curve(net)
    peaks = np.maximum.accumulate(np.concatenate([[1.0], eq]))[1:]
    return eq / peaks - 1.0


def turnover_series(weights: np.ndarray) -> np.ndarray:
    """Per-day L1 weight change; day 0 is 0 (no prior rebalance observed)."""
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    out = np.zeros(w.shape[0])
    if w.shape[0] > 1:
        out[1:] = np.abs(np.diff(w, axis=0)).sum(axis=1)
    return out


def metrics(
    net: np.ndarray,
    weights: np.ndarray,
    index_returns: Optional[np.ndarray] = None,
    oracle=None,
    dates: Optional[list] = None,
) -> BacktestReport:
    """Annualized performance metrics of a daily net-return series.

    Sharpe/Sortino are reported as absent (None) when their denominators
    are undefined (zero dispersion, or no negative days for the downside
    deviation). ``oracle`` may be an :class:`OracleWeights`, a length-N
    vector, or a (T, N) matrix; it enables the Frobenius distance between
    the realized and optimal weight paths.
    """
    net = np.asarray(net, dtype=float)
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if net.ndim != 1 or net.size < 2:
        raise ContractError(f"need a series of length >= 2, got shape {net.shape}")
    if w.shape[0] != net.size:
        raise ContractError(f"{w.shape[0]} weight rows for {net.size} return days")
    out: dict = {}
    mean, std = net.mean(), net.std()
    ann = np.sqrt(TRADING_DAYS)
    out["er"] = mean * TRADING_DAYS
    out["std"] = std * ann
    out["sharpe"] = out["er"] / out["std"] if std > 0 else None
    downside = net[net < 0]
    if downside.size > 0:
        out["dd"] = downside.std() * ann
        out["sortino"] = out["er"] / out["dd"] if out["dd"] > 0 else None
    else:
        out["dd"] = None
        out["sortino"] = None
    out["mdd"] = float(-drawdown_series(net).min())
    out["pct_positive"] = float((net > 0).mean())
    tos = turnover_series(w)
    out["turnover"] = float(tos[1:].mean()) if net.size > 1 else 0.0
    if index_returns is not None:
        idx = np.asarray(index_returns, dtype=float)
        if idx.shape != net.shape:
            raise ContractError(f"index series {idx.shape} must match returns {net.shape}")
        var = idx.var()
        cov = ((net - net.mean()) * (idx - idx.mean())).mean()
        out["beta"] = float(cov / var) if var > 0 else None
    else:
        out["beta"] = None
    if oracle is not None:
        target = oracle.weights if isinstance(oracle, OracleWeights) else np.asarray(oracle, dtype=float)
        if target.ndim == 1:
            target = np.broadcast_to(target, w.shape)
        if target.shape != w.shape:
            raise ContractError(
                f"oracle weights {target.shape} must match history {w.shape}"
            )
        out["frobenius"] = float(np.linalg.norm(w - target))
    else:
        out["frobenius"] = None
    return BacktestReport(net_returns=net, weights=w, metrics=out, dates=dates)


# ---------------------------------------------------------------------------
# oracle and baselines


def oracle_weights(mu, sigma) -> OracleWeights:
    """Tangency direction of known moments, L1-normalized with signs:
    w* = sigma^{-1} mu / ||sigma^{-1} mu||_1."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if not np.any(mu != 0):
        raise ContractError("mu is identically zero: the tangency direction is undefined")
    try:
        raw = np.linalg.solve(sigma, mu)
    except np.linalg.LinAlgError:
        raise NumericalError("sigma is singular; cannot form sigma^{-1} mu") from None
    return OracleWeights(raw / np.abs(raw).sum())


def baseline_ewp(n_assets: int) -> WeightVector:
    """Equal weights, never rebalanced: w_i = 1/N."""
    if n_assets < 1:
        raise ContractError(f"need at least one asset, got {n_assets}")
    return WeightVector(np.full(n_assets, 1.0 / n_assets), ConstraintSpec(long_only=True))


def _rolling_loop(panel: ReturnsPanel, lookback: int, delta: float, weight_fn):
    t0 = lookback - 1
    rows = []
    prev = np.zeros(panel.n_assets)
    for t in range(t0, panel.n_days):
        window = panel.returns[t - lookback + 1 : t + 1]
        sigma = shrink_covariance(np.cov(window, rowvar=False, ddof=1), delta)
        prev = weight_fn(window, sigma, prev, t)
        rows.append(prev)
    return WeightSeries(
        dates=list(panel.dates[t0:]), weights=np.asarray(rows), start_index=t0
    )


def baseline_gmvp(panel: ReturnsPanel, lookback: int = 252, delta: float = 0.1) -> WeightSeries:
    """Rolling minimum-variance weights w = sigma^{-1} 1 / (1' sigma^{-1} 1),
    re-estimated daily from a shrunk trailing covariance."""
    if lookback < 2:
        raise ContractError(f"lookback must be >= 2, got {lookback}")
    if lookback < panel.n_assets and delta == 0.0:
        raise ContractError(
            "lookback shorter than the universe needs shrinkage delta > 0"
        )
    ones = np.ones(panel.n_assets)

    def weight_fn(window, sigma, prev, t):
        try:
            raw = np.linalg.solve(sigma, ones)
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"singular rolling covariance at row {t}; increase delta"
            ) from None
        return raw / raw.sum()

    return _rolling_loop(panel, lookback, delta, weight_fn)


def baseline_cs_sample(panel: ReturnsPanel, lookback: int = 252, delta: float = 0.1) -> WeightSeries:
    """Classical two-step plug-in with sample forecasts: rolling mean and
    shrunk rolling covariance into the L1-normalized tangency formula.

    Days whose rolling mean is exactly zero hold the previous weights.
    """
    if lookback < 2:
        raise ContractError(f"lookback must be >= 2, got {lookback}")

    def weight_fn(window, sigma, prev, t):
        mu = window.mean(axis=0)
        if not np.any(mu != 0):
            return prev
        try:
            raw = np.linalg.solve(sigma, mu)
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"singular rolling covariance at row {t}; increase delta"
            ) from None
        return raw / np.abs(raw).sum()

    return _rolling_loop(panel, lookback, delta, weight_fn)


def baseline_cs_predictor(
    model: mdl.ScoreModel,
    panel: ReturnsPanel,
    lookback: int = 252,
    delta: float = 0.1,
) -> WeightSeries:
    """Two-step plug-in with model forecasts: the trained predictor's scores
    stand in for expected returns; covariance comes from the shrunk rolling
    estimate. Zero predictions hold the previous weights."""
    if lookback < 2:
        raise ContractError(f"lookback must be >= 2, got {lookback}")
    t0 = max(lookback - 1, model.lag - 1)
    starts = np.arange(t0 - model.lag + 1, panel.n_days - model.lag + 1)
    windows, _ = _gather_windows_only(panel, model.lag, starts)
    tape = ad.Tape()
    preds = mdl.score_batch(model, windows, tape, tape.leaf(model.params)).data
    rows = []
    prev = np.zeros(panel.n_assets)
    for j, t in enumerate(range(t0, panel.n_days)):
        window = panel.returns[t - lookback + 1 : t + 1]
        sigma = shrink_covariance(np.cov(window, rowvar=False, ddof=1), delta)
        mu = preds[j]
        if np.any(mu != 0):
            try:
                raw = np.linalg.solve(sigma, mu)
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"singular rolling covariance at row {t}; increase delta"
                ) from None
            prev = raw / np.abs(raw).sum()
        rows.append(prev)
    return WeightSeries(dates=list(panel.dates[t0:]), weights=np.asarray(rows), start_index=t0)


# ---------------------------------------------------------------------------
# walk-forward driver


@dataclass
class WalkForwardResult:
    splits: list
    aggregate: BacktestReport


def _oracle_rows(oracle, panel: ReturnsPanel, start: int, stop: int):
    if oracle is None:
        return None
    if isinstance(oracle, OracleWeights):
        return oracle.weights
    target = np.asarray(oracle, dtype=float)
    if target.ndim == 2 and target.shape[0] == panel.n_days:
        return target[start:stop]
    return target


def run_walk_forward(
    panel: ReturnsPanel,
    splits: list,
    model_kind: str,
    layer_spec: ConstraintSpec,
    objective_spec: obj.ObjectiveSpec,
    config: TrainConfig,
    index_returns: Optional[np.ndarray] = None,
    oracle=None,
    lag: int = 50,
    hidden: int = 64,
    mode: str = "shared",
    normalize: bool = False,
) -> WalkForwardResult:
    """Train/select/test once per split and aggregate the test periods.

    Per split: train on the train range, keep the best validation epoch,
    emit hard-constraint weights over the test range (each split starts
    all-cash), apply costs, compute metrics. The aggregate report
    concatenates the per-split daily series; its turnover averages only
    within-split rebalances.
    """
    if not splits:
        raise ContractError("no walk-forward splits supplied")
    if index_returns is not None:
        index_returns = np.asarray(index_returns, dtype=float)
        if index_returns.shape != (panel.n_days,):
            raise ContractError(
                f"index series must align to the panel rows ({panel.n_days},), "
                f"got {index_returns.shape}"
            )
    reports = []
    for k, split in enumerate(splits):
        tr = panel.index_range(*split.train)
        va = panel.index_range(*split.val)
        te = panel.index_range(*split.test)
        model = mdl.init(
            model_kind,
            panel.n_assets,
            lag,
            hidden=hidden,
            seed=config.seed + k,
            mode=mode,
            normalize=normalize,
        )
        result = train(
            model, layer_spec, objective_spec, panel, config,
            train_range=tr, val_range=va,
        )
        weights = emit_weights(result.model, panel, layer_spec, te[0], te[1])
        net = net_returns(weights, panel.returns[te[0] : te[1]], config.cost_bp)
        report = metrics(
            net,
            weights,
            index_returns[te[0] : te[1]] if index_returns is not None else None,
            _oracle_rows(oracle, panel, te[0], te[1]),
            dates=list(panel.dates[te[0] : te[1]]),
        )
        report.metrics["label"] = split.label
        reports.append(report)
    agg_net = np.concatenate([r.net_returns for r in reports])
    agg_w = np.vstack([r.weights for r in reports])
    agg_dates = [d for r in reports for d in (r.dates or [])] or None
    agg_idx = None
    if index_returns is not None:
        agg_idx = np.concatenate(
            [index_returns[panel.index_range(*s.test)[0] : panel.index_range(*s.test)[1]] for s in splits]
        )
    agg_oracle = None
    if oracle is not None:
        parts = [
            np.broadcast_to(
                _oracle_rows(oracle, panel, *panel.index_range(*s.test)),
                r.weights.shape,
            )
            for s, r in zip(splits, reports)
        ]
        agg_oracle = np.vstack(parts)
    aggregate = metrics(agg_net, agg_w, agg_idx, agg_oracle, dates=agg_dates)
    # within-split rebalances only: boundary transitions are not trades
    sums = sum(turnover_series(r.weights)[1:].sum() for r in reports)
    count = sum(max(r.net_returns.size - 1, 0) for r in reports)
    aggregate.metrics["turnover"] = float(sums / count) if count else 0.0
    aggregate.metrics["label"] = "aggregate"
    return WalkForwardResult(splits=reports, aggregate=aggregate)
