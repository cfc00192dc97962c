"""Model checkpoints: one TensorFile per named parameter plus a text manifest.

Layout of a checkpoint directory::

    manifest.txt        "kind = ..." and config lines, then "param <name> <d0,d1,...>"
    params/<name>.gct   float32 parameter tensors
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import read_tensor_file, write_tensor_file
from .errors import ShapeError, TensorFileError


def save_checkpoint(out_dir, kind: str, config: dict, params: dict[str, np.ndarray]) -> Path:
    d = Path(out_dir)
    (d / "params").mkdir(parents=True, exist_ok=True)
    lines = [f"kind = {kind}"]
    lines += [f"{k} = {v}" for k, v in config.items()]
    for name, value in params.items():
        dims = ",".join(str(n) for n in value.shape)
        lines.append(f"param {name} {dims}")
        write_tensor_file(d / "params" / f"{name}.gct", np.asarray(value, dtype=np.float32))
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d


def load_checkpoint(path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    d = Path(path)
    try:
        text = (d / "manifest.txt").read_text()
    except OSError as exc:
        raise TensorFileError(f"no checkpoint manifest in {d}: {exc}") from exc
    kind, config, params = None, {}, {}
    for line in text.splitlines():
        if line.startswith("param "):
            _, name, dims = line.split(" ", 2)
            shape = tuple(int(x) for x in dims.split(",") if x)
            value = read_tensor_file(d / "params" / f"{name}.gct")
            if value.shape != shape:
                raise ShapeError(f"{name}: manifest says {shape}, file holds {value.shape}")
            params[name] = value
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            if k == "kind":
                kind = v
            else:
                config[k] = v
    if kind is None:
        raise TensorFileError(f"{d}: manifest lacks a kind line")
    return kind, config, params
