"""TensorFile container, sample windowing and the synthetic traffic-movie generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, TensorFileError

MAGIC = b"GCT1"
FRAMES_PER_DAY = 288
FRAME_MINUTES = 5
IN_FRAMES = 12
OUT_FRAMES = 12
WINDOW = IN_FRAMES + OUT_FRAMES
N_CHANNELS = 9
N_OUT_CHANNELS = 8
N_STATIC = 7

# Codes 0-2 are the core set; 3 carries integer index arrays (graph files).
DTYPE_CODES = {0: np.dtype(np.uint8), 1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u8")}
_CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


def write_tensor_file(path, array) -> None:
    a = np.ascontiguousarray(np.asarray(array))
    key = a.dtype.newbyteorder("=")
    if key not in _CODE_OF:
        raise TypeError(f"unsupported dtype {a.dtype}")
    code = _CODE_OF[key]
    header = MAGIC + struct.pack("<II", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = a.astype(DTYPE_CODES[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_tensor_file(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic")
    code, ndim = struct.unpack_from("<II", raw, 4)
    if code not in DTYPE_CODES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    off = 12 + 8 * ndim
    if len(raw) < off:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - off != expected:
        raise TensorFileError(f"{path}: payload is {len(raw) - off} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class SampleWindow:
    """Input frames [start, start+12), target frames [start+12, start+24).

    ``offset`` is the absolute frame index of the movie's first frame, so the
    clock stays right when the movie is a slice of a longer recording.
    """

    start: int
    offset: int = 0

    @property
    def inputs(self) -> slice:
        return slice(self.start, self.start + IN_FRAMES)

    @property
    def targets(self) -> slice:
        return slice(self.start + IN_FRAMES, self.start + WINDOW)

    @property
    def clock(self) -> int:
        return (self.offset + self.start) % FRAMES_PER_DAY


def make_windows(movie: np.ndarray, stride: int = 1, offset: int = 0) -> list[SampleWindow]:
    """All 12-in/12-out windows starting at 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ValueError("stride must be positive")
    T = movie.shape[0]
    if T < WINDOW:
        raise ShapeError(f"movie has {T} frames; at least {WINDOW} are needed for one window")
    return [SampleWindow(t, offset) for t in range(0, T - WINDOW + 1, stride)]


def window_arrays(movie: np.ndarray, w: SampleWindow) -> tuple[np.ndarray, np.ndarray]:
    """(12,H,W,9) input frames and (12,H,W,8) target frames."""
    return movie[w.inputs], movie[w.targets, :, :, :N_OUT_CHANNELS]


# ---------------------------------------------------------------- synthetic data


def _bresenham(r0, c0, r1, c1):
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 > r0 else -1), (1 if c1 > c0 else -1)
    err = dc - dr
    r, c = r0, c0
    while True:
        yield r, c
        if r == r1 and c == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def _heading(dr: int, dc: int) -> int:
    # headings 0..3 = NE, SE, SW, NW; a road carries traffic both ways
    if dr <= 0 and dc >= 0:
        return 0
    if dr > 0 and dc >= 0:
        return 1
    if dr > 0:
        return 2
    return 3


def synth_generate(seed: int, height: int = 32, width: int = 32, days: int = 1,
                   n_roads: int | None = None, noise: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic synthetic traffic movie (T,H,W,9) and static map (H,W,7).

    Roads are random polylines. Each major road follows a daily profile made
    of two sinusoids (periods 288 and 144 frames) with its own phase, scaled
    into [0, 200], plus integer noise. A few "minor" roads only register
    sporadic single detections (volume 1-2, about 2% of frames), so they stay
    below volume 5 and give the road-mask threshold something to reject.
    """
    if height < 16 or width < 16:
        raise ShapeError("synthetic rasters need H, W >= 16")
    if days < 1:
        raise ShapeError("days must be >= 1")
    rng = np.random.default_rng(seed)
    T = days * FRAMES_PER_DAY
    if n_roads is None:
        n_roads = max(3, (height + width) // 10)
    n_minor = max(1, n_roads // 3)

    road_id = np.full((height, width), -1, dtype=np.int64)
    heading = np.zeros((height, width), dtype=np.int64)
    visits = np.zeros((height, width), dtype=np.int64)
    waypoints_all = []
    for r_i in range(n_roads + n_minor):
        n_pts = int(rng.integers(3, 6))
        pts = [(int(rng.integers(0, height)), int(rng.integers(0, width)))]
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(n_pts - 1):
            angle += rng.normal(0, 0.6)
            step = rng.uniform(0.25, 0.5) * min(height, width)
            r = int(np.clip(round(pts[-1][0] + step * np.sin(angle)), 0, height - 1))
            c = int(np.clip(round(pts[-1][1] + step * np.cos(angle)), 0, width - 1))
            pts.append((r, c))
        waypoints_all.append(pts)
        for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
            h = _heading(r1 - r0, c1 - c0)
            for r, c in _bresenham(r0, c0, r1, c1):
                visits[r, c] += 1
                if road_id[r, c] < 0 or r_i < n_roads:
                    road_id[r, c] = r_i
                    heading[r, c] = h

    t = np.arange(T)
    n_all = n_roads + n_minor
    phase1 = rng.uniform(0, 2 * np.pi, n_all)
    phase2 = rng.uniform(0, 2 * np.pi, n_all)
    amp = np.concatenate([rng.uniform(0.5, 1.0, n_roads), np.zeros(n_minor)])
    base_speed = rng.uniform(120, 200, n_all)
    # (n_all, T) profiles in [0, 1]
    prof = 0.5 + 0.3 * np.sin(2 * np.pi * t[None] / FRAMES_PER_DAY + phase1[:, None]) \
        + 0.2 * np.sin(2 * np.pi * t[None] / (FRAMES_PER_DAY // 2) + phase2[:, None])
    volume = 200.0 * amp[:, None] * prof
    speed = base_speed[:, None] * (1.0 - 0.35 * prof)

    movie = np.zeros((T, height, width, N_CHANNELS), dtype=np.uint8)
    rr, cc = np.nonzero(road_id >= 0)
    ids = road_id[rr, cc]
    hd = heading[rr, cc]
    n_pix = rr.size
    vol = volume[ids].T  # (T, n_pix)
    spd = speed[ids].T
    v_noise = rng.integers(-noise, noise + 1, size=(T, n_pix, 2))
    s_noise = rng.integers(-noise, noise + 1, size=(T, n_pix, 2))
    major = (ids < n_roads)
    blips = np.where(rng.random((T, n_pix)) < 0.02, rng.integers(1, 3, size=(T, n_pix)), 0)
    for k, h in enumerate((hd, (hd + 2) % 4)):
        share = 1.0 if k == 0 else 0.8
        v = np.clip(np.rint(vol * share) + v_noise[..., k], 0, 255)
        v = np.where(major, v, blips if k == 0 else 0)
        s = np.where(v > 0, np.clip(np.rint(spd) + s_noise[..., k], 1, 255), 0)
        movie[:, rr, cc, h] = v.astype(np.uint8)
        movie[:, rr, cc, 4 + h] = s.astype(np.uint8)
    # sparse incidents on major roads
    inc = (rng.random((T, n_pix)) < 0.002) & major[None]
    movie[:, rr, cc, 8] = np.where(inc, rng.integers(1, 4, size=(T, n_pix)) * 60, 0).astype(np.uint8)

    static = np.zeros((height, width, N_STATIC), dtype=np.uint8)
    junction = visits >= 2
    for pts in waypoints_all:
        for r, c in pts[1:-1]:
            junction[r, c] = True
    jr, jc = np.nonzero(junction)
    for r, c in zip(jr, jc):
        static[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2, 0] = 255
    static[..., 1] = np.where(road_id >= 0, 255, 0)
    for ch in range(2, N_STATIC):
        k = max(1, int(0.01 * height * width))
        idx = rng.choice(n_pix, size=min(k, n_pix), replace=False)
        static[rr[idx], cc[idx], ch] = rng.integers(64, 256, size=idx.size).astype(np.uint8)
    return movie, static


def save_dataset(out_dir, movie: np.ndarray, static: np.ndarray) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor_file(out / "movie.gct", movie)
    write_tensor_file(out / "static.gct", static)


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray]:
    d = Path(data_dir)
    movie = read_tensor_file(d / "movie.gct")
    static = read_tensor_file(d / "static.gct")
    if movie.ndim != 4 or movie.shape[-1] != N_CHANNELS:
        raise ShapeError(f"movie must be (T,H,W,{N_CHANNELS}), got {movie.shape}")
    if static.shape != movie.shape[1:3] + (N_STATIC,):
        raise ShapeError(f"static map {static.shape} does not match movie {movie.shape}")
    return movie, static
