"""Training losses, scored-horizon evaluation, the mean baseline and prediction blending."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import FRAME_MINUTES, OUT_FRAMES
from .errors import ShapeError
from .tensor_core import Tensor, add, mse, no_grad, scale

# Scored horizons 5, 10, 15, 30, 45, 60 minutes out of the 12 predicted frames.
SCORED_FRAMES = (0, 1, 2, 5, 8, 11)
UNSCORED_FRAMES = tuple(i for i in range(OUT_FRAMES) if i not in SCORED_FRAMES)
RAW_SCALE = 255.0 ** 2  # 65025


def mse_12frames(pred, target):
    """Mean squared error over every element of the 12-frame stacks (normalised units)."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if isinstance(pred, Tensor):
        return mse(pred, target)
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


@dataclass
class EvalReport:
    mse_raw: float
    mse_normalized: float
    per_frame_raw: list[float] = field(default_factory=list)
    n_samples: int = 1

    @classmethod
    def from_raw(cls, mse_raw: float, per_frame_raw: Sequence[float] = (), n_samples: int = 1) -> "EvalReport":
        return cls(float(mse_raw), float(mse_raw) / RAW_SCALE, [float(v) for v in per_frame_raw], n_samples)

    def rows(self) -> list[tuple[str, float]]:
        out = [("mse_raw", self.mse_raw), ("mse_normalized", self.mse_normalized),
               ("n_samples", float(self.n_samples))]
        horizons = [(i + 1) * FRAME_MINUTES for i in SCORED_FRAMES]
        for minutes, v in zip(horizons, self.per_frame_raw):
            out.append((f"mse_raw_{minutes}min", v))
        return out

    def to_table(self) -> str:
        lines = ["metric\tvalue"]
        lines += [f"{k}\t{v:.10g}" for k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.rows())

    def save(self, out_dir, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table, kv = out / f"{stem}.tsv", out / f"{stem}.kv"
        table.write_text(self.to_table())
        kv.write_text(self.to_kv())
        return table, kv

    @classmethod
    def load_kv(cls, path) -> "EvalReport":
        values = {}
        for line in Path(path).read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                values[k.strip()] = float(v)
        per = [v for k, v in values.items() if k.startswith("mse_raw_")]
        return cls(values["mse_raw"], values["mse_normalized"], per, int(values.get("n_samples", 1)))


def score_frames(pred6: np.ndarray, target6: np.ndarray) -> EvalReport:
    """MSE between already-selected (..., 6, H, W, 8) stacks in raw units."""
    if pred6.shape != target6.shape:
        raise ShapeError(f"prediction {pred6.shape} vs target {target6.shape}")
    if pred6.ndim < 4 or pred6.shape[-4] != len(SCORED_FRAMES):
        raise ShapeError(f"expected (..., {len(SCORED_FRAMES)}, H, W, 8), got {pred6.shape}")
    d = np.asarray(pred6, dtype=np.float64) - np.asarray(target6, dtype=np.float64)
    sq = d * d
    frame_axis = sq.ndim - 4
    other = tuple(a for a in range(sq.ndim) if a != frame_axis)
    per_frame = sq.mean(axis=other)
    n = int(np.prod(pred6.shape[:-4])) if pred6.ndim > 4 else 1
    return EvalReport.from_raw(sq.mean(), per_frame, n)


def select_scored(pred12: np.ndarray) -> np.ndarray:
    if pred12.ndim < 4 or pred12.shape[-4] != OUT_FRAMES:
        raise ShapeError(f"expected (..., {OUT_FRAMES}, H, W, 8), got {pred12.shape}")
    return np.take(pred12, SCORED_FRAMES, axis=pred12.ndim - 4)


def validation_mse_6frames(pred: np.ndarray, target: np.ndarray) -> EvalReport:
    """Score a 12-frame raw prediction against the 6 scored target frames."""
    return score_frames(select_scored(pred), target)


def hidden_layer_loss(pred: Tensor, target, encoder: Callable, weights: Sequence[float]) -> Tensor:
    """w_0 * MSE(pred, target) + sum_i w_i * MSE(enc_i(pred), enc_i(target)).

    ``encoder`` maps a frame stack to its list of encoder taps. Target-side
    activations are computed without recording gradients. Zero-weight terms
    are skipped entirely.
    """
    weights = [float(w) for w in weights]
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError("hidden-layer weights must be nonnegative with at least one positive")
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    terms: list[Tensor] = []
    if weights[0] != 0:
        l0 = mse_12frames(pred, target)
        terms.append(l0 if weights[0] == 1.0 else scale(l0, weights[0]))
    if any(w != 0 for w in weights[1:]):
        taps_pred = encoder(pred)
        if len(weights) != len(taps_pred) + 1:
            raise ShapeError(f"{len(weights)} weights for {len(taps_pred)} encoder taps (need taps + 1)")
        with no_grad():
            taps_target = [t.detach() for t in encoder(target)]
        for w, tp, tt in zip(weights[1:], taps_pred, taps_target):
            if w != 0:
                li = mse(tp, tt)
                terms.append(li if w == 1.0 else scale(li, w))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def uniform_hidden_weights(depth: int) -> list[float]:
    return [1.0 / (depth + 1)] * (depth + 1)


class MeanBaseline:
    """Constant-in-time predictor: per-pixel per-channel mean of training targets."""

    def __init__(self, mean: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)

    @classmethod
    def fit(cls, targets) -> "MeanBaseline":
        total, count = None, 0
        for t in targets:
            t = np.asarray(t, dtype=np.float64)
            s = t.sum(axis=0)
            total = s if total is None else total + s
            count += t.shape[0]
        if count == 0:
            raise ShapeError("mean baseline needs at least one training target")
        return cls(total / count)

    def predict(self, n_frames: int = OUT_FRAMES) -> np.ndarray:
        return np.broadcast_to(self.mean, (n_frames,) + self.mean.shape).copy()


def mean_baseline(train_targets) -> MeanBaseline:
    return MeanBaseline.fit(train_targets)


def ensemble_predictions(a: np.ndarray, b: np.ndarray, lam: float = 0.5) -> np.ndarray:
    """lam * a + (1 - lam) * b; clamp afterwards."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot blend {a.shape} with {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    if lam == 1.0:
        return a.copy()
    if lam == 0.0:
        return b.copy()
    return b + lam * (a - b)
