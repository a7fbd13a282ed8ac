"""Differentiable maps from fitness scores to constraint-satisfying weights.

Each layer turns a score vector (or a batch of score vectors, one per row)
into portfolio weights that satisfy a declared constraint set by
construction: an L1 budget, optional long-only, per-name caps, a two-sided
cardinality selection, and leverage.

Layers accept either a plain array (returning a :class:`WeightVector`) or an
autodiff :class:`~folio.autodiff.Tensor` (returning a Tensor on the same
tape, suitable for gradient training). Selection thresholds for the
cardinality layers are taken from a temperature-relaxed sort during training
(``relaxed_thresholds=True``) and from the exact sort otherwise; either way
the indicators are straight-through constants, so gradients flow only
through the magnitude terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InfeasibleConstraintError


@dataclass(frozen=True)
class ConstraintSpec:
    """Declarative description of the active constraint set.

    ``max_position`` is the per-name cap u in (0, 1]; ``cardinality`` is the
    name-count bound K (realized support is 2 * (K // 2 + 1)); ``leverage``
    is the gross-exposure target L >= 1. ``tau`` is the relaxed-sort
    temperature used when thresholds are taken from the soft sort.
    """

    long_only: bool = False
    max_position: Optional[float] = None
    cardinality: Optional[int] = None
    leverage: float = 1.0
    tau: float = 1.0

    @property
    def short_allowed(self) -> bool:
        return not self.long_only

    def __post_init__(self):
        if self.leverage < 1.0:
            raise ContractError(f"leverage must be >= 1, got {self.leverage}")
        if self.tau <= 0.0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if self.max_position is not None and not (0.0 < self.max_position <= 1.0):
            raise ContractError(
                f"max_position must lie in (0, 1], got {self.max_position}"
            )
        if self.cardinality is not None and self.cardinality < 1:
            raise ContractError(f"cardinality must be >= 1, got {self.cardinality}")

    def validate_for(self, n_assets: int) -> None:
        """Check feasibility against a universe of ``n_assets`` names."""
        u, k, lev = self.max_position, self.cardinality, self.leverage
        if self.long_only and (u is not None or k is not None):
            raise ContractError(
                "long_only combined with max_position/cardinality is not supported"
            )
        if k is not None:
            if k > n_assets:
                raise InfeasibleConstraintError(
                    "K <= N", f"K={k}, N={n_assets}"
                )
            n_side = k // 2 + 1
            if 2 * n_side > n_assets:
                raise InfeasibleConstraintError(
                    "2*(floor(K/2)+1) <= N", f"K={k} gives side size {n_side}, N={n_assets}"
                )
            if u is not None and not (n_side * u > lev / 2.0):
                raise InfeasibleConstraintError(
                    "n*u > L/2", f"n={n_side}, u={u}, L={lev}"
                )
        elif u is not None:
            if not (n_assets * u > lev):
                ineq = "N*u > 1" if lev == 1.0 else "N*u > L"
                raise InfeasibleConstraintError(
                    ineq, f"N={n_assets}, u={u}, L={lev}"
                )


@dataclass
class WeightVector:
    """Portfolio weights plus the constraint set that produced them."""

    weights: np.ndarray
    spec: ConstraintSpec = field(default_factory=ConstraintSpec)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)

    @property
    def gross(self) -> float:
        return float(np.abs(self.weights).sum())

    def support(self) -> int:
        return int(np.count_nonzero(self.weights))

    def validate(self, atol: float = 1e-8) -> None:
        """Assert the spec's invariants on the realized weights."""
        w = self.weights
        if abs(self.gross - self.spec.leverage) > atol:
            raise ContractError(
                f"gross exposure {self.gross} != target {self.spec.leverage}"
            )
        if self.spec.long_only and np.any(w < -atol):
            raise ContractError("negative weight in a long-only portfolio")
        u = self.spec.max_position
        if u is not None and np.any(np.abs(w) > u + atol):
            raise ContractError(f"weight exceeds cap u={u}: max |w| = {np.abs(w).max()}")
        if self.spec.cardinality is not None:
            n_side = self.spec.cardinality // 2 + 1
            if self.support() != 2 * n_side:
                raise ContractError(
                    f"support {self.support()} != 2n = {2 * n_side}"
                )


# ---------------------------------------------------------------------------
# helpers


def _n_assets(t: Tensor) -> int:
    return t.shape[-1]


def _row_sums(t: Tensor) -> Tensor:
    """Sum along the last axis: scalar for vectors, (B, 1) for matrices."""
    if t.ndim == 1:
        return ad.sum_(t)
    ones = t.tape.constant(np.ones(t.shape[-1]))
    return ad.reshape(ad.matvec(t, ones), (t.shape[0], 1))


def _exp_magnitudes(s: Tensor) -> Tensor:
    """exp(|s|) shifted by the per-row max of |s|.

    The shift is a constant, so the normalized ratio downstream is
    mathematically unchanged while overflow is impossible.
    """
    mag = ad.abs_(s)
    shift = s.tape.constant(np.abs(s.data).max(axis=-1, keepdims=True))
    return ad.exp(ad.sub(mag, shift))


def _normalized(num: Tensor) -> Tensor:
    return ad.div(num, _row_sums(num))


def _wrap(fn):
    """Allow array-like score input: run on a scratch tape, wrap the result."""

    def call(s, *args, spec=None, **kwargs):
        if isinstance(s, Tensor):
            return fn(s, *args, **kwargs)
        arr = np.asarray(s, dtype=float)
        tape = ad.Tape()
        out = fn(tape.leaf(arr), *args, **kwargs)
        return WeightVector(out.data.copy(), spec if spec is not None else ConstraintSpec())

    return call


# ---------------------------------------------------------------------------
# single-constraint layers


def _signed_simplex_t(s: Tensor, exponent: str = "magnitude") -> Tensor:
    if _n_assets(s) < 2:
        raise ContractError(f"need at least 2 assets, got {_n_assets(s)}")
    if exponent == "magnitude":
        frac = _normalized(_exp_magnitudes(s))
    elif exponent == "raw":
        shift = s.tape.constant(s.data.max(axis=-1, keepdims=True))
        frac = _normalized(ad.exp(ad.sub(s, shift)))
    else:
        raise ContractError(f"unknown exponent convention '{exponent}'")
    return ad.mul(ad.sign(s), frac)


def signed_simplex(s, exponent: str = "magnitude"):
    """Signed L1-simplex map: w_i = sign(s_i) * exp(|s_i|) / sum_j exp(|s_j|).

    Allows shorts while keeping sum |w_i| = 1. ``exponent='raw'`` switches
    the magnitude term to exp(s_i) (monotone in the raw score).
    """
    if isinstance(s, Tensor):
        return _signed_simplex_t(s, exponent)
    tape = ad.Tape()
    out = _signed_simplex_t(tape.leaf(np.asarray(s, dtype=float)), exponent)
    return WeightVector(out.data.copy(), ConstraintSpec())


def _long_only_softmax_t(s: Tensor) -> Tensor:
    return ad.softmax(s)


def long_only_softmax(s):
    """Long-only budget map: w = softmax(s); strictly positive, sums to 1."""
    if isinstance(s, Tensor):
        return _long_only_softmax_t(s)
    tape = ad.Tape()
    out = _long_only_softmax_t(tape.leaf(np.asarray(s, dtype=float)))
    return WeightVector(out.data.copy(), ConstraintSpec(long_only=True))


def max_position_shift(n_side: int, cap: float) -> float:
    """Shift a of the generalized sigmoid enforcing a per-name cap.

    a = (1 - cap) / (n_side * cap - 1); at cap = 1 this is 0 and the
    generalized sigmoid degenerates to the plain sigmoid.
    """
    if cap == 1.0:
        return 0.0
    return (1.0 - cap) / (n_side * cap - 1.0)


def _max_position_t(s: Tensor, u: float) -> Tensor:
    n = _n_assets(s)
    if not (0.0 < u <= 1.0):
        raise ContractError(f"max_position must lie in (0, 1], got {u}")
    if not (n * u > 1.0):
        raise InfeasibleConstraintError("N*u > 1", f"N={n}, u={u}")
    a = max_position_shift(n, u)
    phi = ad.sigmoid_shifted(ad.abs_(s), a)
    return ad.mul(ad.sign(s), _normalized(phi))


def max_position(s, u: float):
    """Capped signed map via the generalized sigmoid phi_a(x) = a + sigmoid(x).

    With a = (1-u)/(N*u-1) every |w_i| stays below the cap u while
    sum |w_i| = 1.
    """
    if isinstance(s, Tensor):
        return _max_position_t(s, u)
    tape = ad.Tape()
    out = _max_position_t(tape.leaf(np.asarray(s, dtype=float)), u)
    return WeightVector(out.data.copy(), ConstraintSpec(max_position=u))


def _leverage_t(s: Tensor, lev: float, exponent: str = "magnitude") -> Tensor:
    if lev < 1.0:
        raise ContractError(f"leverage must be >= 1, got {lev}")
    return ad.scale(_signed_simplex_t(s, exponent), lev)


def leverage(s, lev: float):
    """Signed simplex scaled to gross exposure L: sum |w_i| = L."""
    if isinstance(s, Tensor):
        return _leverage_t(s, lev)
    tape = ad.Tape()
    out = _leverage_t(tape.leaf(np.asarray(s, dtype=float)), lev)
    return WeightVector(out.data.copy(), ConstraintSpec(leverage=lev))


# ---------------------------------------------------------------------------
# sorting operators


def _rank_coefficients(n: int) -> np.ndarray:
    # row i (1-based) carries N + 1 - 2i: N-1, N-3, ..., 1-N
    return n + 1.0 - 2.0 * np.arange(1, n + 1)


def neural_sort(s, tau: float = 1.0):
    """Relaxed descending-sort operator: an N x N row-stochastic matrix.

    Row i is softmax(lambda_i / tau) where
    lambda_{i,j} = (N + 1 - 2i) * s_j - sum_m |s_j - s_m|.
    As tau -> 0 the rows concentrate on the hard permutation; multiplying by
    s gives a soft approximation of s sorted in descending order.
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    if isinstance(s, Tensor):
        return _neural_sort_t(s, tau)
    arr = np.asarray(s, dtype=float)
    return _relaxed_sort_matrix(arr[None, :], tau)[0]


def _neural_sort_t(s: Tensor, tau: float) -> Tensor:
    if s.ndim != 1:
        raise ContractError("neural_sort expects a single score vector")
    n = _n_assets(s)
    tape = s.tape
    col = ad.reshape(s, (n, 1))
    row = ad.reshape(s, (1, n))
    pair_abs = ad.abs_(ad.sub(col, row))  # [j, m] = |s_j - s_m|
    ones = tape.constant(np.ones(n))
    row_pen = ad.matvec(pair_abs, ones)  # b_j = sum_m |s_j - s_m|
    coeff = tape.constant(_rank_coefficients(n).reshape(n, 1))
    lam = ad.sub(ad.mul(coeff, row), ad.reshape(row_pen, (1, n)))
    return ad.softmax(ad.scale(lam, 1.0 / tau))


def _relaxed_sort_matrix(values: np.ndarray, tau: float) -> np.ndarray:
    """Pure-value mirror of :func:`neural_sort` for a (B, N) batch."""
    b, n = values.shape
    pair = np.abs(values[:, :, None] - values[:, None, :])  # (B, j, m)
    pen = pair.sum(axis=2)  # (B, j)
    coeff = _rank_coefficients(n)
    lam = coeff[None, :, None] * values[:, None, :] - pen[:, None, :]
    lam /= tau
    lam -= lam.max(axis=2, keepdims=True)
    e = np.exp(lam)
    return e / e.sum(axis=2, keepdims=True)


def hard_sort_permutation(s) -> np.ndarray:
    """Exact descending-sort permutation matrix (ties: lower index first).

    P @ s equals s sorted in descending order; P is 0/1 with exactly one 1
    per row and column.
    """
    arr = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=float)
    if arr.ndim != 1:
        raise ContractError("hard_sort_permutation expects a single score vector")
    order = np.argsort(-arr, kind="stable")
    n = arr.shape[0]
    perm = np.zeros((n, n))
    perm[np.arange(n), order] = 1.0
    return perm


def _sorted_descending(values: np.ndarray, tau: float, relaxed: bool) -> np.ndarray:
    """Descending-sorted rows: exact, or via the relaxed sort matrix."""
    if relaxed:
        p_hat = _relaxed_sort_matrix(values, tau)
        return np.einsum("bij,bj->bi", p_hat, values)
    return -np.sort(-values, axis=-1)


# ---------------------------------------------------------------------------
# cardinality selection


def _selection_thresholds(values: np.ndarray, n_side: int, tau: float, relaxed: bool):
    """Per-row thresholds (d_u, d_l) bracketing the top/bottom n_side names.

    d_u is the (n_side+1)-th largest entry of the (relaxed-)sorted vector and
    d_l the (n_side+1)-th smallest, so strict comparisons select exactly
    n_side names per side when scores are distinct.
    """
    srt = _sorted_descending(values, tau, relaxed)
    n = values.shape[-1]
    d_u = srt[..., n_side]
    d_l = srt[..., n - 1 - n_side]
    return d_u, d_l


def _side_masks(values: np.ndarray, n_side: int, d_u, d_l, exact: bool):
    """0/1 masks for the long and short side, with deterministic fallbacks.

    The primary masks come from strict comparisons against the thresholds.
    Rows where that selection degenerates (ties in exact mode, or an empty
    side under relaxed thresholds) fall back to the stable descending order:
    top n_side long, bottom n_side short.
    """
    long_m = (values > d_u[..., None]).astype(float)
    short_m = (values < d_l[..., None]).astype(float)
    short_m = short_m * (1.0 - long_m)  # keep sides disjoint under crossed thresholds
    long_counts = long_m.sum(axis=-1)
    short_counts = short_m.sum(axis=-1)
    if exact:
        bad = (long_counts != n_side) | (short_counts != n_side)
    else:
        bad = (long_counts == 0) | (short_counts == 0)
    if np.any(bad):
        for b in np.nonzero(bad)[0]:
            order = np.argsort(-values[b], kind="stable")
            long_m[b] = 0.0
            short_m[b] = 0.0
            long_m[b, order[:n_side]] = 1.0
            short_m[b, order[-n_side:]] = 1.0
    return long_m, short_m


def _two_sided_t(
    s: Tensor,
    n_side: int,
    per_side_budget: float,
    magnitudes: Tensor,
    tau: float,
    relaxed: bool,
) -> Tensor:
    """Budgeted long/short construction shared by cardinality and combined."""
    tape = s.tape
    squeeze = s.ndim == 1
    values = s.data[None, :] if squeeze else s.data
    d_u, d_l = _selection_thresholds(values, n_side, tau, relaxed)
    if squeeze:
        ind_long = ad.indicator_greater(s, tape.constant(d_u[0]))
        ind_short = ad.indicator_less(s, tape.constant(d_l[0]))
    else:
        ind_long = ad.indicator_greater(s, tape.constant(d_u[:, None]))
        ind_short = ad.indicator_less(s, tape.constant(d_l[:, None]))
    long_m, short_m = _side_masks(values, n_side, d_u, d_l, exact=not relaxed)
    if squeeze:
        long_m, short_m = long_m[0], short_m[0]
    # splice in fallback rows where the indicator values disagree with the masks
    if not np.array_equal(ind_long.data, long_m):
        ind_long = _override_mask(ind_long, long_m)
    if not np.array_equal(ind_short.data, short_m):
        ind_short = _override_mask(ind_short, short_m)
    long_num = ad.mul(ind_long, magnitudes)
    short_num = ad.mul(ind_short, magnitudes)
    half = per_side_budget
    return ad.sub(
        ad.scale(_normalized(long_num), half),
        ad.scale(_normalized(short_num), half),
    )


def _override_mask(ind: Tensor, mask: np.ndarray) -> Tensor:
    """Replace rows of an indicator tensor by constant fallback rows.

    Indicator gradients are zero either way, so only values change.
    """
    tape = ind.tape
    same = np.all(ind.data == mask, axis=-1, keepdims=True).astype(float)
    keep = tape.constant(same)
    replacement = tape.constant(mask * (1.0 - same))
    return ad.add(ad.mul(ind, keep), replacement)


def _cardinality_t(
    s: Tensor, k: int, tau: float = 1.0, relaxed_thresholds: bool = False
) -> Tensor:
    n = _n_assets(s)
    n_side = k // 2 + 1
    if 2 * n_side > n:
        raise InfeasibleConstraintError(
            "2*(floor(K/2)+1) <= N", f"K={k} gives side size {n_side}, N={n}"
        )
    return _two_sided_t(
        s, n_side, 0.5, _exp_magnitudes(s), tau, relaxed_thresholds
    )


def cardinality(s, k: int, tau: float = 1.0, relaxed_thresholds: bool = False):
    """Two-sided sparse map: long the top n names, short the bottom n.

    n = floor(K/2) + 1. Each side is a magnitude-softmax over the selected
    names scaled to 0.5, so sum |w| = 1 and the support is exactly 2n when
    scores are distinct.
    """
    if isinstance(s, Tensor):
        return _cardinality_t(s, k, tau, relaxed_thresholds)
    tape = ad.Tape()
    out = _cardinality_t(
        tape.leaf(np.asarray(s, dtype=float)), k, tau, relaxed_thresholds
    )
    return WeightVector(out.data.copy(), ConstraintSpec(cardinality=k, tau=tau))


def _combined_t(
    s: Tensor, spec: ConstraintSpec, relaxed_thresholds: bool = False
) -> Tensor:
    n = _n_assets(s)
    spec.validate_for(n)
    lev, u, k = spec.leverage, spec.max_position, spec.cardinality
    if spec.long_only:
        return ad.scale(ad.softmax(s), lev)
    if k is not None:
        n_side = k // 2 + 1
        if u is not None:
            cap_eff = min(1.0, 2.0 * u / lev)  # per-side cap after L/2 budgeting
        else:
            cap_eff = 1.0
        if cap_eff < 1.0:
            a = max_position_shift(n_side, cap_eff)
            mags = ad.sigmoid_shifted(ad.abs_(s), a)
        else:
            mags = _exp_magnitudes(s)
        return _two_sided_t(s, n_side, lev / 2.0, mags, spec.tau, relaxed_thresholds)
    if u is not None:
        cap_eff = min(1.0, u / lev)
        if cap_eff < 1.0:
            a = max_position_shift(n, cap_eff)
            phi = ad.sigmoid_shifted(ad.abs_(s), a)
            return ad.scale(ad.mul(ad.sign(s), _normalized(phi)), lev)
        return _leverage_t(s, lev)
    return _leverage_t(s, lev)


def combined(s, spec: ConstraintSpec, relaxed_thresholds: bool = False):
    """Apply a full constraint set in one differentiable map.

    Dispatches on the active constraints: cardinality splits the budget L/2
    per side; an active cap re-parametrizes the magnitudes through the
    generalized sigmoid with the effective per-side cap (2u/L with
    cardinality, u/L without); inactive caps fall back to exponential
    magnitudes so the map reduces exactly to the simpler layers.
    """
    if isinstance(s, Tensor):
        return _combined_t(s, spec, relaxed_thresholds)
    tape = ad.Tape()
    out = _combined_t(
        tape.leaf(np.asarray(s, dtype=float)), spec, relaxed_thresholds
    )
    return WeightVector(out.data.copy(), spec)
