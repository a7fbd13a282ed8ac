"""Score models: map a lagged-returns window to one fitness score per asset.

Two kinds are provided. ``linear`` defaults to shared mode (one length-p
weight vector applied to every asset's lag column, plus a shared bias), so
the parameter count is independent of the universe size and permuting assets
permutes scores. ``linear`` in full mode and ``mlp`` (one tanh hidden layer)
operate on the flattened p x N window with per-asset outputs.

Models are plain parameter vectors; scoring either runs value-only on a
scratch tape or records onto a caller-supplied tape for gradient training.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError

KINDS = ("linear", "mlp")
MODES = ("shared", "full")


@dataclass(frozen=True)
class ScoreModel:
    """A score network: kind, architecture metadata, and a flat parameter vector."""

    kind: str
    n_assets: int
    lag: int
    hidden: int = 64
    mode: str = "shared"
    seed: int = 0
    normalize: bool = False
    params: np.ndarray = field(default=None, repr=False)

    def blocks(self):
        """Parameter blocks as (name, shape) in flat-vector order."""
        p, n, h = self.lag, self.n_assets, self.hidden
        if self.kind == "linear" and self.mode == "shared":
            return [("w", (p,)), ("b", (1,))]
        if self.kind == "linear":
            return [("w", (p * n, n)), ("b", (n,))]
        if self.kind == "mlp":
            return [("w1", (p * n, h)), ("b1", (h,)), ("w2", (h, n)), ("b2", (n,))]
        raise ContractError(f"unknown model kind '{self.kind}'")

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.blocks()))

    def with_params(self, params: np.ndarray) -> "ScoreModel":
        params = np.asarray(params, dtype=float)
        if params.shape != (self.param_count,):
            raise ContractError(
                f"expected {self.param_count} parameters, got {params.shape}"
            )
        return replace(self, params=params)


def init(
    kind: str,
    n_assets: int,
    lag: int,
    hidden: int = 64,
    seed: int = 0,
    mode: str = "shared",
    normalize: bool = False,
) -> ScoreModel:
    """Create a model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) parameters."""
    if kind not in KINDS:
        raise ContractError(f"kind must be one of {KINDS}, got '{kind}'")
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got '{mode}'")
    if hidden < 1:
        raise ContractError(f"hidden must be >= 1, got {hidden}")
    if kind == "mlp":
        mode = "full"  # the mlp always sees the flattened window
    model = ScoreModel(
        kind=kind,
        n_assets=n_assets,
        lag=lag,
        hidden=hidden,
        mode=mode,
        seed=seed,
        normalize=normalize,
    )
    rng = np.random.default_rng(seed)
    parts = []
    fan_in = None
    for name, shape in model.blocks():
        if name in ("w", "w1", "w2"):
            fan_in = shape[0] if len(shape) > 1 else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return model.with_params(np.concatenate(parts))


def _param_tensors(model: ScoreModel, params: Tensor) -> dict:
    out = {}
    offset = 0
    for name, shape in model.blocks():
        size = int(np.prod(shape))
        part = ad.segment(params, offset, offset + size)
        if len(shape) > 1:
            part = ad.reshape(part, shape)
        out[name] = part
        offset += size
    return out


def _normalize_window(window: np.ndarray) -> np.ndarray:
    mu = window.mean(axis=0, keepdims=True)
    sd = window.std(axis=0, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return (window - mu) / sd


def _prepare(model: ScoreModel, windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=float)
    if windows.ndim == 2:
        windows = windows[None, :, :]
    if windows.shape[1:] != (model.lag, model.n_assets):
        raise ContractError(
            f"window shape {windows.shape[1:]} does not match model "
            f"(lag={model.lag}, assets={model.n_assets})"
        )
    if model.normalize:
        windows = np.stack([_normalize_window(w) for w in windows])
    return windows


def score_batch(
    model: ScoreModel, windows: np.ndarray, tape: Tape, params: Tensor
) -> Tensor:
    """Scores for a (B, p, N) stack of windows; returns a (B, N) tensor."""
    windows = _prepare(model, windows)
    b = windows.shape[0]
    n, p = model.n_assets, model.lag
    theta = _param_tensors(model, params)
    if model.kind == "linear" and model.mode == "shared":
        # every asset's lag column through one shared weight vector
        flat = tape.constant(windows.transpose(0, 2, 1).reshape(b * n, p))
        scores = ad.reshape(ad.matvec(flat, theta["w"]), (b, n))
        return ad.add(scores, theta["b"])
    x = tape.constant(windows.reshape(b, p * n))
    if model.kind == "linear":
        return ad.add(ad.matmul(x, theta["w"]), theta["b"])
    hidden = ad.tanh(ad.add(ad.matmul(x, theta["w1"]), theta["b1"]))
    return ad.add(ad.matmul(hidden, theta["w2"]), theta["b2"])


def score(
    model: ScoreModel,
    window: np.ndarray,
    tape: Optional[Tape] = None,
    params: Optional[Tensor] = None,
):
    """Fitness scores for one p x N window.

    Without a tape this is value-only and returns an ndarray; with a tape
    (and a params tensor on it) the scores stay differentiable.
    """
    if model.params is None:
        raise ContractError("model has no parameters; call init() first")
    if tape is None:
        tape = Tape()
        out = score_batch(model, window, tape, tape.leaf(model.params))
        return out.data[0].copy()
    if params is None:
        params = tape.leaf(model.params)
    return ad.reshape(score_batch(model, window, tape, params), (model.n_assets,))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FIELDS = ("kind", "n_assets", "lag", "hidden", "mode", "seed", "normalize", "params")


def save_checkpoint(model: ScoreModel, path: str) -> None:
    """Write a JSON checkpoint (atomic: temp file + rename)."""
    doc = {
        "kind": model.kind,
        "n_assets": model.n_assets,
        "lag": model.lag,
        "hidden": model.hidden,
        "mode": model.mode,
        "seed": model.seed,
        "normalize": model.normalize,
        "params": [float(x) for x in model.params],
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> ScoreModel:
    with open(path) as fh:
        doc = json.load(fh)
    missing = [k for k in CHECKPOINT_FIELDS if k not in doc]
    if missing:
        raise ContractError(f"checkpoint missing fields: {missing}")
    model = ScoreModel(
        kind=doc["kind"],
        n_assets=int(doc["n_assets"]),
        lag=int(doc["lag"]),
        hidden=int(doc["hidden"]),
        mode=doc["mode"],
        seed=int(doc["seed"]),
        normalize=bool(doc["normalize"]),
    )
    return model.with_params(np.asarray(doc["params"], dtype=float))
