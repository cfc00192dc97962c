"""``gridcast`` command line: synthesize data, build graphs, train, predict, evaluate.

Exit codes: 0 success, 1 validation or shape error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import features as F
from .config import RunConfig
from .dataio import (OUT_FRAMES, load_dataset, make_windows, read_tensor_file, save_dataset, synth_generate, window_arrays,
                     write_tensor_file)
from .errors import GridcastError, NumericError, ShapeError, TensorFileError
from .graph import extract_graph, load_graph, save_graph
from .losses import MeanBaseline, ensemble_predictions, score_frames, select_scored

log = logging.getLogger("gridcast")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _threads():
    """Cap BLAS threads when GRIDCAST_THREADS is set."""
    value = os.environ.get("GRIDCAST_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ShapeError(f"GRIDCAST_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ShapeError("GRIDCAST_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_static(args) -> np.ndarray:
    path = Path(args.static) if args.static else Path(args.movie).parent / "static.gct"
    return read_tensor_file(path)


def _tail(movie: np.ndarray, tail: int) -> tuple[np.ndarray, int]:
    if not tail:
        return movie, 0
    if tail > movie.shape[0]:
        raise ShapeError(f"--tail {tail} exceeds the movie's {movie.shape[0]} frames")
    return movie[-tail:], movie.shape[0] - tail


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    movie, static = synth_generate(args.seed, args.height, args.width, args.days)
    save_dataset(args.out, movie, static)
    log.info("wrote %s frames of %dx%d to %s", movie.shape[0], args.height, args.width, args.out)
    return EXIT_OK


def cmd_build_graph(args) -> int:
    from .plotting import plot_mask

    movie = read_tensor_file(args.movie)
    movie, _ = _head(movie, args.val_frames)
    mask = F.build_road_mask(F.compute_max_volume_map(movie), args.threshold)
    g = extract_graph(mask)
    save_graph(g, args.out)
    plot_mask(mask, Path(args.out) / "graph.png", g.nodes)
    print(f"nodes\t{g.n_nodes}\nedges\t{g.n_edges}")
    return EXIT_OK


def _head(movie, val_frames):
    """Drop the held-out tail so masks and tables come from training frames only."""
    if not val_frames:
        return movie, 0
    if val_frames >= movie.shape[0]:
        raise ShapeError(f"--val-frames {val_frames} leaves no training frames")
    return movie[:-val_frames], val_frames


def cmd_featurize(args) -> int:
    from .plotting import plot_mask

    movie = read_tensor_file(args.movie)
    static = _load_static(args)
    train_part, _ = _head(movie, args.val_frames)
    mask = F.build_road_mask(F.compute_max_volume_map(train_part), args.threshold)
    windows = make_windows(movie, args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor_file(out / "mask.gct", mask.astype(np.uint8))
    write_tensor_file(out / "clamp_table.gct", F.build_clamp_table(train_part))
    grids = np.stack([F.unet_features(movie[w.inputs], static, mask, w.clock) for w in windows])
    write_tensor_file(out / "unet_features.gct", grids)
    write_tensor_file(out / "window_starts.gct", np.array([w.start for w in windows], dtype=np.uint64))
    if args.graph:
        g = load_graph(args.graph)
        raw = np.stack([F.gnn_raw_features(movie[w.inputs], static, g.nodes, w.clock) for w in windows])
        stats = F.NormStats.fit(raw)
        write_tensor_file(out / "gnn_features.gct", stats.apply(raw))
        write_tensor_file(out / "norm_mean.gct", stats.mean)
        write_tensor_file(out / "norm_std.gct", stats.std)
    plot_mask(mask, out / "mask.png")
    print(f"windows\t{len(windows)}\nunet_channels\t{grids.shape[1]}")
    return EXIT_OK


def _train(kind: str, args) -> int:
    from .pipeline import run_training, save_training_outputs
    from .plotting import plot_history, plot_report

    movie, static = load_dataset(args.data_dir)
    cfg = RunConfig.load(kind, args.config)
    result = run_training(kind, movie, static, cfg, args.seed)
    out = save_training_outputs(result, kind, cfg, args.out_dir)
    plot_history(result.history, out / "history.png")
    plot_report({"model": result.report, "mean baseline": result.baseline_report}, out / "eval.png")
    sys.stdout.write(result.report.to_table())
    return EXIT_OK


def cmd_train_unet(args) -> int:
    return _train("unet", args)


def cmd_train_gnn(args) -> int:
    return _train("gnn", args)


def cmd_predict(args) -> int:
    from .pipeline import clamp_and_select, load_model, scored_targets

    loaded = load_model(args.checkpoint, args.graph)
    if loaded.kind == "unet" and args.graph:
        raise ShapeError("--graph given but the checkpoint holds a U-Net")
    movie = read_tensor_file(args.movie)
    static = _load_static(args)
    table = read_tensor_file(args.clamp_table)
    part, offset = _tail(movie, args.tail)
    windows = make_windows(part, args.stride, offset=offset)
    pred = loaded.predict(part, static, windows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor_file(out / "pred_raw.gct", pred.astype(np.float32))
    write_tensor_file(out / "pred_scored.gct", clamp_and_select(pred, table).astype(np.float32))
    write_tensor_file(out / "targets_scored.gct", scored_targets(part, windows).astype(np.float32))
    print(f"windows\t{len(windows)}\nscored_shape\t{','.join(str(d) for d in (len(windows), 6) + pred.shape[2:])}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .pipeline import scored_targets

    movie = read_tensor_file(args.movie)
    train_part, _ = _head(movie, args.val_frames)
    val_part, offset = _tail(movie, args.val_frames)
    train_windows = make_windows(train_part, args.train_stride)
    base = MeanBaseline.fit(window_arrays(train_part, w)[1] for w in train_windows)
    windows = make_windows(val_part, args.stride, offset=offset)
    mean = base.predict()
    pred = np.broadcast_to(mean, (len(windows),) + mean.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor_file(out / "pred_scored.gct", select_scored(pred).astype(np.float32))
    write_tensor_file(out / "targets_scored.gct", scored_targets(val_part, windows).astype(np.float32))
    print(f"windows\t{len(windows)}")
    return EXIT_OK


def _as_scored(pred: np.ndarray) -> np.ndarray:
    """Accept either 12-frame predictions or already-scored 6-frame ones."""
    return select_scored(pred) if pred.ndim >= 4 and pred.shape[-4] == OUT_FRAMES else pred


def cmd_evaluate(args) -> int:
    from .plotting import plot_report

    pred = _as_scored(read_tensor_file(args.pred).astype(np.float64))
    target = read_tensor_file(args.target).astype(np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    report = score_frames(pred, target)
    out = Path(args.out)
    report.save(out, args.stem)
    plot_report({args.stem: report}, out / f"{args.stem}.png")
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_ensemble(args) -> int:
    a = read_tensor_file(args.a).astype(np.float64)
    b = read_tensor_file(args.b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ensemble inputs differ: {a.shape} vs {b.shape}")
    if not 0.0 <= args.lam <= 1.0:
        raise ShapeError("--lam must lie in [0, 1]")
    mixed = ensemble_predictions(a, b, args.lam)
    if args.clamp_table:
        mixed = F.clamp_predictions(mixed, read_tensor_file(args.clamp_table))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor_file(out, mixed.astype(np.float32))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import report, run_all

    results = run_all(seed=args.seed, n_graphs=args.graphs)
    text = report(results)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridcast", description="Grid traffic forecasting with U-Net and graph models")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic traffic movie and static map")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--days", type=int, default=3)
    s.add_argument("--out", required=True, help="output directory (movie.gct, static.gct)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-graph", help="road graph from the max-volume mask of a movie")
    s.add_argument("--movie", required=True)
    s.add_argument("--threshold", type=float, default=F.ROAD_THRESHOLD)
    s.add_argument("--val-frames", type=int, default=0, help="ignore this many trailing (held-out) frames")
    s.add_argument("--out", required=True, help="graph directory")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("featurize", help="write model input features for every window")
    s.add_argument("--movie", required=True)
    s.add_argument("--static", help="static map (default: static.gct next to the movie)")
    s.add_argument("--graph", help="graph directory; also writes standardized GNN features")
    s.add_argument("--threshold", type=float, default=F.ROAD_THRESHOLD)
    s.add_argument("--val-frames", type=int, default=0)
    s.add_argument("--stride", type=int, default=12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    for name, func in [("train-unet", cmd_train_unet), ("train-gnn", cmd_train_gnn)]:
        s = sub.add_parser(name, help="train with cyclic cosine annealing and snapshot averaging")
        s.add_argument("--data-dir", required=True, help="directory with movie.gct and static.gct")
        s.add_argument("--config", help="key = value configuration file")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out-dir", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("predict", help="run a checkpoint over a movie")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--movie", required=True)
    s.add_argument("--static")
    s.add_argument("--graph", help="road graph directory (required for GNN checkpoints)")
    s.add_argument("--clamp-table", required=True)
    s.add_argument("--tail", type=int, default=0, help="only use the last N frames of the movie")
    s.add_argument("--stride", type=int, default=12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("baseline", help="mean-baseline predictions for the held-out tail")
    s.add_argument("--movie", required=True)
    s.add_argument("--val-frames", type=int, default=288)
    s.add_argument("--train-stride", type=int, default=1)
    s.add_argument("--stride", type=int, default=12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("evaluate", help="6-frame MSE report of predictions against targets")
    s.add_argument("--pred", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--stem", default="eval")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ensemble", help="lam * a + (1 - lam) * b, then clamp")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--lam", type=float, default=0.5)
    s.add_argument("--clamp-table")
    s.add_argument("--out", required=True, help="output tensor file")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("gradcheck", help="finite-difference and dense-oracle self checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--graphs", type=int, default=200, help="random graphs for the kernel oracles")
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TensorFileError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GridcastError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
