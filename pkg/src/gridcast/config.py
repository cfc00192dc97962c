"""Flat ``key = value`` run configuration with a fixed schema."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


COMMON = {
    "eta_max": (float, 3e-4),
    "eta_min": (float, 0.0),
    "epochs_per_cycle": (int, 7),
    "batch_size": (int, 4),
    "max_cycles": (int, 10),
    "top_snapshots": (int, 3),
    "train_stride": (int, 1),
    "val_stride": (int, 12),
    "val_frames": (int, 288),
    "max_train_samples": (int, 0),
    "threshold": (float, 5.0),
}
SCHEMAS = {
    "unet": {
        **COMMON,
        "depth": (int, 4),
        "base_channels": (int, 16),
        "hidden_loss": (_bool, False),
        "hidden_loss_weights": (_floats, ()),
    },
    "gnn": {
        **COMMON,
        "arch": (str, "ensemble"),
        "hidden": (int, 64),
        "blocks": (int, 4),
        "cheb_k": (int, 3),
        "sg_k": (int, 5),
    },
}


class RunConfig(dict):
    """Validated configuration; every schema key is present after construction."""

    def __init__(self, kind: str, values: dict | None = None):
        if kind not in SCHEMAS:
            raise ConfigError(f"unknown model kind {kind!r}")
        schema = SCHEMAS[kind]
        super().__init__({k: default for k, (_, default) in schema.items()})
        self.kind = kind
        for key, value in (values or {}).items():
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} for {kind}")
            conv = schema[key][0]
            if not isinstance(value, str):
                conv = {_floats: lambda v: tuple(float(x) for x in v), _bool: bool}.get(conv, conv)
            try:
                self[key] = conv(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        self._check()

    def _check(self):
        positive = ["epochs_per_cycle", "batch_size", "max_cycles", "top_snapshots", "train_stride", "val_stride",
                    "val_frames"]
        for key in positive:
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not 0 <= self["eta_min"] <= self["eta_max"]:
            raise ConfigError("need 0 <= eta_min <= eta_max")
        if self.kind == "gnn" and self["arch"] not in ("ensemble", "resnet"):
            raise ConfigError("arch must be 'ensemble' or 'resnet'")

    @classmethod
    def parse(cls, kind: str, text: str) -> "RunConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            values[key] = value
        return cls(kind, values)

    @classmethod
    def load(cls, kind: str, path) -> "RunConfig":
        if path is None:
            return cls(kind)
        return cls.parse(kind, Path(path).read_text())

    def dumps(self) -> str:
        lines = [f"# {self.kind} run configuration"]
        for key, value in self.items():
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
