"""End-to-end wiring: data split, per-model training tasks, prediction and scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as F
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataio import (FRAMES_PER_DAY, N_OUT_CHANNELS, WINDOW, SampleWindow, make_windows, read_tensor_file,
                     window_arrays, write_tensor_file)
from .errors import ShapeError
from .gnn import GraphEnsembleNet, GraphResNet
from .graph import GraphOperators, RoadGraph, extract_graph, grid_to_nodes, load_graph, nodes_to_grid, save_graph
from .losses import (EvalReport, MeanBaseline, hidden_layer_loss, mse_12frames, select_scored,
                     uniform_hidden_weights, validation_mse_6frames)
from .nn import Module
from .tensor_core import Tensor, no_grad
from .training import SgdrSchedule, SnapshotStore, TrainHistory, snapshot_average, train
from .unet import UNet, UNetConfig

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    """Train/validation split plus everything derived from the training part only."""

    static: np.ndarray
    train_movie: np.ndarray
    val_movie: np.ndarray
    val_offset: int
    train_windows: list[SampleWindow]
    val_windows: list[SampleWindow]
    mask: np.ndarray
    clamp_table: np.ndarray
    baseline: MeanBaseline

    @classmethod
    def build(cls, movie: np.ndarray, static: np.ndarray, *, val_frames: int = FRAMES_PER_DAY,
              train_stride: int = 1, val_stride: int = 12, threshold: float = F.ROAD_THRESHOLD,
              max_train_samples: int = 0) -> "PreparedData":
        T = movie.shape[0]
        split = T - val_frames
        if split < WINDOW or val_frames < WINDOW:
            raise ShapeError(f"{T} frames cannot hold a {val_frames}-frame validation split and a training window")
        train_movie, val_movie = movie[:split], movie[split:]
        train_windows = make_windows(train_movie, train_stride)
        if max_train_samples:
            train_windows = train_windows[:max_train_samples]
        val_windows = make_windows(val_movie, val_stride, offset=split)
        mask = F.build_road_mask(F.compute_max_volume_map(train_movie), threshold)
        clamp = F.build_clamp_table(train_movie)
        baseline = MeanBaseline.fit(window_arrays(train_movie, w)[1] for w in train_windows)
        return cls(static, train_movie, val_movie, split, train_windows, val_windows, mask, clamp, baseline)

    @classmethod
    def from_config(cls, movie, static, cfg: RunConfig) -> "PreparedData":
        return cls.build(movie, static, val_frames=cfg["val_frames"], train_stride=cfg["train_stride"],
                         val_stride=cfg["val_stride"], threshold=cfg["threshold"],
                         max_train_samples=cfg["max_train_samples"])

    def val_targets(self) -> np.ndarray:
        """(n, 6, H, W, 8) scored target frames of every validation window."""
        if getattr(self, "_val_targets", None) is None:
            self._val_targets = scored_targets(self.val_movie, self.val_windows)
        return self._val_targets

    def baseline_predictions(self) -> np.ndarray:
        pred = self.baseline.predict()
        return np.broadcast_to(pred, (len(self.val_windows),) + pred.shape).copy()


def to_frames_raw(stack: np.ndarray) -> np.ndarray:
    """(..., 96, H, W) normalised -> (..., 12, H, W, 8) raw units."""
    return F.channels_to_frames(stack.astype(np.float64)) * 255.0


def targets_normalized(target_frames: np.ndarray) -> np.ndarray:
    return F.frames_to_channels(target_frames.astype(np.float32) / 255.0)


def score_predictions(pred_raw: np.ndarray, data: PreparedData) -> EvalReport:
    clamped = F.clamp_predictions(pred_raw, data.clamp_table)
    return validation_mse_6frames(clamped, data.val_targets())


def predict_unet(model: UNet, movie, static, mask, windows, batch: int = 4) -> np.ndarray:
    """Raw-unit, unclamped (n, 12, H, W, 8) predictions."""
    out = []
    with no_grad():
        for i in range(0, len(windows), batch):
            x = np.stack([F.unet_features(movie[w.inputs], static, mask, w.clock) for w in windows[i:i + batch]])
            out.append(model(x).data)
    return to_frames_raw(np.concatenate(out))


def predict_gnn(model: Module, movie, static, graph: RoadGraph, ops: GraphOperators, stats: F.NormStats,
                windows, batch: int = 4) -> np.ndarray:
    raw = np.stack([F.gnn_raw_features(movie[w.inputs], static, graph.nodes, w.clock) for w in windows])
    x = stats.apply(raw)
    out = []
    with no_grad():
        for i in range(0, len(windows), batch):
            out.append(model(Tensor(x[i:i + batch]), ops).data)
    return to_frames_raw(nodes_to_grid(np.concatenate(out), graph))


# ---------------------------------------------------------------- U-Net


class UNetTask:
    def __init__(self, data: PreparedData, hidden_weights=None, batch: int = 4):
        self.data = data
        self.hidden_weights = hidden_weights
        self.batch = batch
        self.n_train = len(data.train_windows)

    def inputs(self, movie, windows) -> np.ndarray:
        return np.stack([F.unet_features(movie[w.inputs], self.data.static, self.data.mask, w.clock)
                         for w in windows])

    def loss(self, model: UNet, indices) -> Tensor:
        ws = [self.data.train_windows[i] for i in indices]
        x = self.inputs(self.data.train_movie, ws)
        y = np.stack([targets_normalized(window_arrays(self.data.train_movie, w)[1]) for w in ws])
        pred = model(x)
        if self.hidden_weights is None:
            return mse_12frames(pred, y)
        return hidden_layer_loss(pred, y, model.encode_frames, self.hidden_weights)

    def predict(self, model: UNet, movie, windows) -> np.ndarray:
        return predict_unet(model, movie, self.data.static, self.data.mask, windows, self.batch)

    def validate(self, model: UNet) -> float:
        pred = self.predict(model, self.data.val_movie, self.data.val_windows)
        return score_predictions(pred, self.data).mse_raw


# ---------------------------------------------------------------- GNN


class GNNTask:
    def __init__(self, data: PreparedData, graph: RoadGraph | None = None, batch: int = 4):
        self.data = data
        self.graph = graph if graph is not None else extract_graph(data.mask)
        if self.graph.n_nodes == 0:
            raise ShapeError("road graph is empty; lower the threshold or use more data")
        self.ops = GraphOperators.from_graph(self.graph)
        self.batch = batch
        self.n_train = len(data.train_windows)
        raw = self.raw_features(data.train_movie, data.train_windows)
        self.stats = F.NormStats.fit(raw)
        self._train_x = self.stats.apply(raw)
        self._train_y = np.stack([
            grid_to_nodes(targets_normalized(window_arrays(data.train_movie, w)[1]), self.graph)
            for w in data.train_windows])

    def raw_features(self, movie, windows) -> np.ndarray:
        return np.stack([F.gnn_raw_features(movie[w.inputs], self.data.static, self.graph.nodes, w.clock)
                         for w in windows])

    def loss(self, model: Module, indices) -> Tensor:
        pred = model(Tensor(self._train_x[indices]), self.ops)
        return mse_12frames(pred, self._train_y[indices])

    def predict(self, model: Module, movie, windows) -> np.ndarray:
        return predict_gnn(model, movie, self.data.static, self.graph, self.ops, self.stats, windows, self.batch)

    def validate(self, model: Module) -> float:
        pred = self.predict(model, self.data.val_movie, self.data.val_windows)
        return score_predictions(pred, self.data).mse_raw


# ---------------------------------------------------------------- models


def build_model(kind: str, cfg: dict, seed: int = 0, dtype=np.float32) -> Module:
    if kind == "unet":
        return UNet(UNetConfig(int(cfg["depth"]), int(cfg["base_channels"])), seed=seed, dtype=dtype)
    if kind == "gnn":
        cls = GraphEnsembleNet if cfg.get("arch", "ensemble") == "ensemble" else GraphResNet
        return cls(hidden=int(cfg["hidden"]), blocks=int(cfg["blocks"]), cheb_k=int(cfg["cheb_k"]),
                   sg_k=int(cfg["sg_k"]), seed=seed, dtype=dtype)
    raise ShapeError(f"unknown model kind {kind!r}")


def model_config(kind: str, cfg: dict) -> dict:
    keys = ("depth", "base_channels") if kind == "unet" else ("arch", "hidden", "blocks", "cheb_k", "sg_k")
    return {k: cfg[k] for k in keys}


@dataclass
class TrainResult:
    model: Module
    task: UNetTask | GNNTask
    store: SnapshotStore
    history: TrainHistory
    report: EvalReport
    baseline_report: EvalReport


def run_training(kind: str, movie: np.ndarray, static: np.ndarray, cfg: RunConfig, seed: int) -> TrainResult:
    data = PreparedData.from_config(movie, static, cfg)
    if kind == "unet":
        weights = None
        if cfg["hidden_loss"]:
            weights = list(cfg["hidden_loss_weights"]) or uniform_hidden_weights(cfg["depth"])
        task = UNetTask(data, weights)
    else:
        task = GNNTask(data)
    model = build_model(kind, cfg, seed)
    steps = math.ceil(task.n_train / cfg["batch_size"])
    schedule = SgdrSchedule(steps, cfg["eta_max"], cfg["eta_min"], cfg["epochs_per_cycle"])
    store, history = train(model, task, schedule, seed, batch_size=cfg["batch_size"], max_cycles=cfg["max_cycles"])
    model.load_state_dict(snapshot_average(store, cfg["top_snapshots"]))
    pred = task.predict(model, data.val_movie, data.val_windows)
    report = score_predictions(pred, data)
    baseline_report = score_predictions(data.baseline_predictions(), data)
    return TrainResult(model, task, store, history, report, baseline_report)


def save_training_outputs(result: TrainResult, kind: str, cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task, data = result.task, result.task.data
    ckpt = save_checkpoint(out / "checkpoint", kind, model_config(kind, cfg), result.model.state_dict())
    write_tensor_file(ckpt / "mask.gct", data.mask.astype(np.uint8))
    if isinstance(task, GNNTask):
        save_graph(task.graph, out / "graph")
        write_tensor_file(ckpt / "norm_mean.gct", task.stats.mean)
        write_tensor_file(ckpt / "norm_std.gct", task.stats.std)
    write_tensor_file(out / "clamp_table.gct", data.clamp_table)
    write_tensor_file(out / "baseline_mean.gct", data.baseline.mean)
    (out / "config.txt").write_text(cfg.dumps())
    result.history.save(out / "history.kv")
    lines = ["cycle\tepoch\tscore\tselected"]
    chosen = {s.cycle for s in result.store.top(cfg["top_snapshots"])}
    for s in result.store.snapshots:
        lines.append(f"{s.cycle}\t{s.epoch}\t{s.score!r}\t{int(s.cycle in chosen)}")
    (out / "snapshots.tsv").write_text("\n".join(lines) + "\n")
    result.report.save(out, "eval")
    result.baseline_report.save(out, "eval_baseline")
    return out


# ---------------------------------------------------------------- inference from disk


@dataclass
class LoadedModel:
    kind: str
    model: Module
    mask: np.ndarray
    graph: RoadGraph | None = None
    stats: F.NormStats | None = None

    def predict(self, movie: np.ndarray, static: np.ndarray, windows) -> np.ndarray:
        if self.kind == "unet":
            return predict_unet(self.model, movie, static, self.mask, windows)
        ops = GraphOperators.from_graph(self.graph)
        return predict_gnn(self.model, movie, static, self.graph, ops, self.stats, windows)


def load_model(checkpoint_dir, graph_path=None) -> LoadedModel:
    d = Path(checkpoint_dir)
    kind, cfg, params = load_checkpoint(d)
    model = build_model(kind, cfg)
    model.load_state_dict(params)
    mask = read_tensor_file(d / "mask.gct").astype(bool)
    if kind == "unet":
        return LoadedModel(kind, model, mask)
    if graph_path is None:
        raise ShapeError("GNN checkpoints need a road graph (--graph)")
    graph = load_graph(graph_path)
    if graph.grid_shape != mask.shape or not np.array_equal(graph.nodes, np.argwhere(mask)):
        raise ShapeError("road graph does not match the mask this GNN checkpoint was trained on")
    stats = F.NormStats(read_tensor_file(d / "norm_mean.gct"), read_tensor_file(d / "norm_std.gct"))
    return LoadedModel(kind, model, mask, graph, stats)


def clamp_and_select(pred_raw: np.ndarray, table: np.ndarray) -> np.ndarray:
    if pred_raw.shape[-3:] != table.shape:
        raise ShapeError(f"clamp table {table.shape} does not match predictions {pred_raw.shape}")
    return select_scored(F.clamp_predictions(pred_raw, table))


def scored_targets(movie: np.ndarray, windows) -> np.ndarray:
    return np.stack([select_scored(movie[w.targets, :, :, :N_OUT_CHANNELS]) for w in windows])
