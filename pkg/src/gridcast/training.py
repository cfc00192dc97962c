"""Cyclic cosine annealing with warm restarts, per-cycle snapshots and snapshot averaging.

Training runs whole cycles of ``epochs_per_cycle`` epochs. The learning rate
restarts at ``eta_max`` at the first step of every cycle and follows a
half-cosine down towards ``eta_min``. Validation runs at every epoch end and
the best epoch of each cycle is kept as that cycle's snapshot. Training stops
after the first cycle whose best score fails to beat every earlier cycle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import NumericError
from .nn import Module
from .tensor_core import Adam, Tensor

log = logging.getLogger(__name__)

ETA_MAX = 3e-4
EPOCHS_PER_CYCLE = 7
TOP_SNAPSHOTS = 3


def lr_at(step: int, steps_per_cycle: int, eta_max: float = ETA_MAX, eta_min: float = 0.0) -> float:
    if not 0 <= step < steps_per_cycle:
        raise ValueError(f"step {step} outside cycle of {steps_per_cycle} steps")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * step / steps_per_cycle))


@dataclass
class SgdrSchedule:
    steps_per_epoch: int
    eta_max: float = ETA_MAX
    eta_min: float = 0.0
    epochs_per_cycle: int = EPOCHS_PER_CYCLE

    @property
    def steps_per_cycle(self) -> int:
        return self.steps_per_epoch * self.epochs_per_cycle

    def lr_at(self, step_in_cycle: int) -> float:
        return lr_at(step_in_cycle, self.steps_per_cycle, self.eta_max, self.eta_min)

    def lr_global(self, step: int) -> float:
        return self.lr_at(step % self.steps_per_cycle)


@dataclass
class Snapshot:
    cycle: int
    epoch: int
    score: float
    params: dict[str, np.ndarray]


@dataclass
class SnapshotStore:
    snapshots: list[Snapshot] = field(default_factory=list)

    def add(self, snap: Snapshot) -> None:
        if any(s.cycle == snap.cycle for s in self.snapshots):
            raise ValueError(f"cycle {snap.cycle} already has a snapshot")
        if not math.isfinite(snap.score):
            raise NumericError(f"snapshot score {snap.score} is not finite")
        self.snapshots.append(snap)

    def __len__(self) -> int:
        return len(self.snapshots)

    def top(self, k: int = TOP_SNAPSHOTS) -> list[Snapshot]:
        return sorted(self.snapshots, key=lambda s: (s.score, s.cycle))[:k]

    def scores(self) -> list[float]:
        return [s.score for s in self.snapshots]


@dataclass
class TrainHistory:
    seed: int
    step_loss: list[float] = field(default_factory=list)
    step_lr: list[float] = field(default_factory=list)
    epoch_val: list[tuple[int, int, float]] = field(default_factory=list)  # (cycle, epoch, score)
    cycle_best: list[float] = field(default_factory=list)
    cycle_start_steps: list[int] = field(default_factory=list)
    stop_reason: str = ""

    def to_kv(self) -> str:
        """Key-value series, one ``key = comma,separated,values`` line each."""
        def join(xs):
            return ",".join(repr(float(x)) for x in xs)

        lines = [
            f"seed = {self.seed}",
            f"stop_reason = {self.stop_reason}",
            f"step_loss = {join(self.step_loss)}",
            f"step_lr = {join(self.step_lr)}",
            f"epoch_cycle = {','.join(str(c) for c, _, _ in self.epoch_val)}",
            f"epoch_index = {','.join(str(e) for _, e, _ in self.epoch_val)}",
            f"epoch_val = {join(v for _, _, v in self.epoch_val)}",
            f"cycle_best = {join(self.cycle_best)}",
            f"cycle_start_steps = {','.join(str(s) for s in self.cycle_start_steps)}",
        ]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_kv())

    @classmethod
    def load(cls, path) -> "TrainHistory":
        kv = {}
        for line in Path(path).read_text().splitlines():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()

        def floats(key):
            return [float(x) for x in kv.get(key, "").split(",") if x]

        def ints(key):
            return [int(x) for x in kv.get(key, "").split(",") if x]

        h = cls(int(kv["seed"]), floats("step_loss"), floats("step_lr"),
                list(zip(ints("epoch_cycle"), ints("epoch_index"), floats("epoch_val"))),
                floats("cycle_best"), ints("cycle_start_steps"), kv.get("stop_reason", ""))
        return h


class TrainingData(Protocol):
    n_train: int

    def loss(self, model: Module, indices: np.ndarray) -> Tensor: ...

    def validate(self, model: Module) -> float: ...


class TrainingAborted(NumericError):
    def __init__(self, message: str, history: TrainHistory, store: SnapshotStore):
        super().__init__(message)
        self.history = history
        self.store = store


def should_stop(cycle_best: list[float]) -> bool:
    """True once the latest cycle's best fails to strictly beat all earlier cycles."""
    return len(cycle_best) >= 2 and cycle_best[-1] >= min(cycle_best[:-1])


def train(model: Module, data: TrainingData, schedule: SgdrSchedule, seed: int, *,
          batch_size: int = 4, max_cycles: int | None = None, betas=(0.9, 0.999),
          eps: float = 1e-8) -> tuple[SnapshotStore, TrainHistory]:
    if data.n_train < 1:
        raise ValueError("empty training split")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=schedule.eta_max, betas=betas, eps=eps)
    store, history = SnapshotStore(), TrainHistory(seed)
    steps_per_epoch = math.ceil(data.n_train / batch_size)
    if steps_per_epoch != schedule.steps_per_epoch:
        raise ValueError(f"schedule expects {schedule.steps_per_epoch} steps per epoch, data gives {steps_per_epoch}")
    global_step = 0
    cycle = 0
    while max_cycles is None or cycle < max_cycles:
        history.cycle_start_steps.append(global_step)
        best: Snapshot | None = None
        for epoch in range(schedule.epochs_per_cycle):
            order = rng.permutation(data.n_train)
            for b in range(steps_per_epoch):
                s_in_cycle = epoch * steps_per_epoch + b
                lr = schedule.lr_at(s_in_cycle)
                opt.zero_grad()
                loss = data.loss(model, order[b * batch_size:(b + 1) * batch_size])
                value = loss.item()
                if not math.isfinite(value):
                    history.stop_reason = "non-finite loss"
                    raise TrainingAborted(f"non-finite loss at step {global_step}", history, store)
                loss.backward()
                try:
                    opt.step(lr)
                except NumericError as exc:
                    history.stop_reason = "non-finite gradient"
                    raise TrainingAborted(str(exc), history, store) from exc
                history.step_loss.append(value)
                history.step_lr.append(lr)
                global_step += 1
            score = float(data.validate(model))
            history.epoch_val.append((cycle, epoch, score))
            log.info("cycle %d epoch %d loss %.6g val %.6g", cycle, epoch, history.step_loss[-1], score)
            if best is None or score < best.score:
                best = Snapshot(cycle, epoch, score, model.state_dict())
        store.add(best)
        history.cycle_best.append(best.score)
        cycle += 1
        if should_stop(history.cycle_best):
            history.stop_reason = "no improvement"
            break
    else:
        history.stop_reason = "max cycles"
    return store, history


def _compensated_sum(stack: np.ndarray) -> np.ndarray:
    """Neumaier summation over axis 0; keeps the mean exact even when values cancel."""
    total = stack[0].copy()
    comp = np.zeros_like(total)
    for x in stack[1:]:
        t = total + x
        comp += np.where(np.abs(total) >= np.abs(x), (total - t) + x, (x - t) + total)
        total = t
    return total + comp


def snapshot_average(store: SnapshotStore, k: int = TOP_SNAPSHOTS) -> dict[str, np.ndarray]:
    """Elementwise mean of the parameters of the ``k`` best snapshots."""
    chosen = store.top(k)
    if not chosen:
        raise ValueError("snapshot store is empty")
    if len(chosen) == 1:
        return {n: v.copy() for n, v in chosen[0].params.items()}
    out = {}
    for name, first in chosen[0].params.items():
        # sorting per coordinate makes the float sum independent of snapshot order
        stack = np.sort(np.stack([np.asarray(s.params[name], dtype=np.float64) for s in chosen]), axis=0)
        out[name] = (_compensated_sum(stack) / len(chosen)).astype(first.dtype)
    return out
