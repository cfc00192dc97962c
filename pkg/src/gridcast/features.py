"""Input transformations for both models, the road mask and the prediction clamp.

Per-frame channel roles: 0-3 volume by heading, 4-7 speed by heading,
8 incident level. Outputs carry the first 8.

U-Net grid layout (143 channels)::

    [0, 108)    12 frames oldest->newest x 9 channels, /255
    [108, 115)  static channels, /255
    115         time of day
    [116, 143)  per raw channel: (range, mean, std) over the 12 frames, /255 scale

GNN node layout (91 channels, before standardisation)::

    [0, 54)     newest 6 frames x 9 channels, raw byte scale
    [54, 81)    per raw channel: (mean, min, max) over all 12 frames
    [81, 88)    static channels
    88          time of day
    89, 90      row / (H-1), col / (W-1)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import FRAMES_PER_DAY, IN_FRAMES, N_CHANNELS, N_OUT_CHANNELS, N_STATIC
from .errors import ShapeError

VOLUME_CHANNELS = slice(0, 4)
SPEED_CHANNELS = slice(4, 8)
ROAD_THRESHOLD = 5

UNET_CHANNELS = IN_FRAMES * N_CHANNELS + N_STATIC + 1 + 3 * N_CHANNELS  # 143
GNN_RECENT_FRAMES = 6
GNN_CHANNELS = GNN_RECENT_FRAMES * N_CHANNELS + 3 * N_CHANNELS + N_STATIC + 1 + 2  # 91

RAW = slice(0, 108)
STATIC = slice(108, 115)
TIME = 115
AGGREGATES = slice(116, 143)
STD_FLOOR = 1e-6


def compute_max_volume_map(movie: np.ndarray) -> np.ndarray:
    """Per-pixel maximum of the four volume channels over all frames."""
    if movie.size == 0:
        raise ShapeError("empty movie")
    return movie[..., VOLUME_CHANNELS].max(axis=(0, 3))


def build_road_mask(max_volume: np.ndarray, threshold: float = ROAD_THRESHOLD) -> np.ndarray:
    return np.asarray(max_volume) >= threshold


def build_clamp_table(movies) -> np.ndarray:
    """(H, W, 8) historical maxima of the output channels across ``movies``."""
    if isinstance(movies, np.ndarray):
        movies = [movies]
    movies = list(movies)
    if not movies:
        raise ShapeError("clamp table needs at least one movie")
    table = movies[0][..., :N_OUT_CHANNELS].max(axis=0)
    for m in movies[1:]:
        table = np.maximum(table, m[..., :N_OUT_CHANNELS].max(axis=0))
    return table


def clamp_predictions(pred: np.ndarray, table: np.ndarray) -> np.ndarray:
    """min(max(pred, 0), table), broadcasting the table over leading frame axes."""
    return np.minimum(np.maximum(pred, 0), table.astype(pred.dtype, copy=False))


def time_of_day(clock: int) -> float:
    if not 0 <= clock < FRAMES_PER_DAY:
        raise ValueError(f"clock {clock} outside [0, {FRAMES_PER_DAY})")
    return clock / FRAMES_PER_DAY


def _check_window(frames: np.ndarray, static: np.ndarray):
    if frames.ndim != 4 or frames.shape[0] != IN_FRAMES or frames.shape[-1] != N_CHANNELS:
        raise ShapeError(f"input window must be ({IN_FRAMES},H,W,{N_CHANNELS}), got {frames.shape}")
    if static.shape != frames.shape[1:3] + (N_STATIC,):
        raise ShapeError(f"static map {static.shape} does not match window {frames.shape}")


def unet_features(frames: np.ndarray, static: np.ndarray, mask: np.ndarray, clock: int) -> np.ndarray:
    """(143, H, W) float32 grid input for one window."""
    _check_window(frames, static)
    _, H, W, _ = frames.shape
    if mask.shape != (H, W):
        raise ShapeError(f"mask {mask.shape} does not match grid {(H, W)}")
    x = frames.astype(np.float32) / 255.0
    out = np.empty((UNET_CHANNELS, H, W), dtype=np.float32)
    out[RAW] = x.transpose(0, 3, 1, 2).reshape(IN_FRAMES * N_CHANNELS, H, W)
    out[STATIC] = static.transpose(2, 0, 1).astype(np.float32) / 255.0
    out[TIME] = time_of_day(clock)
    agg = np.stack([x.max(axis=0) - x.min(axis=0), x.mean(axis=0), x.std(axis=0)], axis=-1)
    out[AGGREGATES] = agg.reshape(H, W, 3 * N_CHANNELS).transpose(2, 0, 1)
    off = ~mask.astype(bool)
    out[RAW][:, off] = 0
    out[AGGREGATES][:, off] = 0
    return out


def gnn_raw_features(frames: np.ndarray, static: np.ndarray, nodes: np.ndarray, clock: int) -> np.ndarray:
    """(N, 91) per-node features before standardisation; ``nodes`` is (N, 2) pixel coords."""
    _check_window(frames, static)
    _, H, W, _ = frames.shape
    rows, cols = nodes[:, 0], nodes[:, 1]
    px = frames[:, rows, cols, :].astype(np.float32)  # (12, N, 9)
    n = px.shape[1]
    recent = px[IN_FRAMES - GNN_RECENT_FRAMES:].transpose(1, 0, 2).reshape(n, -1)
    agg = np.stack([px.mean(axis=0), px.min(axis=0), px.max(axis=0)], axis=-1).reshape(n, -1)
    st = static[rows, cols].astype(np.float32)
    tod = np.full((n, 1), time_of_day(clock), dtype=np.float32)
    coords = np.stack([rows / max(H - 1, 1), cols / max(W - 1, 1)], axis=1).astype(np.float32)
    return np.concatenate([recent, agg, st, tod, coords], axis=1)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray) -> "NormStats":
        """Statistics over every (sample, node) row of ``raw`` (..., 91)."""
        flat = np.asarray(raw, dtype=np.float64).reshape(-1, raw.shape[-1])
        if flat.shape[1] != GNN_CHANNELS:
            raise ShapeError(f"expected {GNN_CHANNELS} channels, got {flat.shape[1]}")
        std = np.maximum(flat.std(axis=0), STD_FLOOR)
        return cls(flat.mean(axis=0), std)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        if self.mean.shape != (GNN_CHANNELS,) or self.std.shape != (GNN_CHANNELS,):
            raise ShapeError(f"norm stats must have {GNN_CHANNELS} channels")
        if raw.shape[-1] != GNN_CHANNELS:
            raise ShapeError(f"expected {GNN_CHANNELS} channels, got {raw.shape[-1]}")
        return ((raw - self.mean) / self.std).astype(np.float32)


def gnn_features(frames: np.ndarray, static: np.ndarray, graph, stats: NormStats, clock: int) -> np.ndarray:
    """(N, 91) standardised node features."""
    if graph.n_nodes == 0:
        raise ShapeError("graph has no nodes")
    return stats.apply(gnn_raw_features(frames, static, graph.nodes, clock))


# ---------------------------------------------------------------- frame <-> channel stacks


def frames_to_channels(frames: np.ndarray) -> np.ndarray:
    """(..., F, H, W, C) -> (..., F*C, H, W), frame-major."""
    *lead, F, H, W, C = frames.shape
    a = np.moveaxis(frames, -1, -3)  # (..., F, C, H, W)
    return a.reshape(*lead, F * C, H, W)


def channels_to_frames(stack: np.ndarray, n_channels: int = N_OUT_CHANNELS) -> np.ndarray:
    """Inverse of :func:`frames_to_channels`."""
    *lead, FC, H, W = stack.shape
    a = stack.reshape(*lead, FC // n_channels, n_channels, H, W)
    return np.moveaxis(a, -3, -1)
