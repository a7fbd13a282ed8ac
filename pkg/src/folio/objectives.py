"""Scalar training objectives over a minibatch of realized portfolio returns.

Every objective is oriented so the trainer always maximizes: the
minimum-variance objective is returned negated. Expectations and variances
are minibatch sample moments with population normalization (divide by B).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError

KINDS = ("mvp", "gmvp", "msrp")
MSRP_DENOMINATORS = ("variance", "stddev")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which objective to maximize.

    ``mvp``: mean - (risk_aversion / 2) * variance.
    ``gmvp``: -variance (so ascending minimizes variance).
    ``msrp``: mean / variance, or mean / stddev when
    ``msrp_denominator='stddev'``.
    """

    kind: str = "msrp"
    risk_aversion: float = 0.0
    msrp_denominator: str = "variance"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"objective kind must be one of {KINDS}, got '{self.kind}'")
        if not np.isfinite(self.risk_aversion) or self.risk_aversion < 0:
            raise ContractError(f"risk_aversion must be finite and >= 0, got {self.risk_aversion}")
        if self.msrp_denominator not in MSRP_DENOMINATORS:
            raise ContractError(
                f"msrp_denominator must be one of {MSRP_DENOMINATORS}, "
                f"got '{self.msrp_denominator}'"
            )


def realized_returns(weights, next_returns):
    """Per-sample portfolio returns: row b is dot(weights[b], next_returns[b]).

    With tensor weights the result stays on the tape; with arrays it is a
    plain length-B vector.
    """
    if isinstance(weights, Tensor):
        r = np.asarray(next_returns, dtype=float)
        if weights.shape != r.shape:
            raise ContractError(
                f"weights {weights.shape} and returns {r.shape} must match"
            )
        tape = weights.tape
        prod = ad.mul(weights, tape.constant(r))
        if weights.ndim == 1:
            return ad.sum_(prod)
        ones = tape.constant(np.ones(weights.shape[-1]))
        return ad.matvec(prod, ones)
    w = np.asarray(weights, dtype=float)
    r = np.asarray(next_returns, dtype=float)
    if w.shape != r.shape:
        raise ContractError(f"weights {w.shape} and returns {r.shape} must match")
    return (w * r).sum(axis=-1)


def evaluate(spec: ObjectiveSpec, batch):
    """Objective value (to maximize) of a length-B batch of portfolio returns."""
    if isinstance(batch, Tensor):
        if batch.ndim != 1 or batch.size < 2:
            raise ContractError(
                f"batch must be a vector of length >= 2, got shape {batch.shape}"
            )
        return _evaluate_t(spec, batch)
    arr = np.asarray(batch, dtype=float)
    tape = ad.Tape()
    if arr.ndim != 1 or arr.size < 2:
        raise ContractError(f"batch must be a vector of length >= 2, got shape {arr.shape}")
    return float(_evaluate_t(spec, tape.leaf(arr)).data)


def _evaluate_t(spec: ObjectiveSpec, batch: Tensor) -> Tensor:
    if spec.kind == "mvp":
        penalty = ad.scale(ad.variance(batch), spec.risk_aversion / 2.0)
        return ad.sub(ad.mean_(batch), penalty)
    if spec.kind == "gmvp":
        return ad.scale(ad.variance(batch), -1.0)
    var = ad.variance(batch)
    if float(var.data) == 0.0:
        raise DomainError("msrp: zero variance (degenerate batch)")
    if spec.msrp_denominator == "stddev":
        return ad.div(ad.mean_(batch), ad.sqrt(var))
    return ad.div(ad.mean_(batch), var)
