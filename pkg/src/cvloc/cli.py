"""Command-line driver: synth -> project -> fuse -> retrieve -> eval, plus loss.

Exit codes: 0 success, 2 usage error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import io
from .errors import CVLError, EmptySequence, UnknownId
from .estimators import CrossViewRetriever
from .evaluation import DEFAULT_KS, batch_loss, batch_loss_grad, success_flags
from .fusion import ConvStack, fuse_sequence
from .geometry import CameraIntrinsics, CanvasSpec, FeatureMap, gvp_warp_sequence
from .matching import default_radius
from .synth import make_scene, make_trajectory, render_satellite, render_sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4


def _fmt(x) -> str:
    return repr(float(x))


def _config(args) -> dict:
    return io.load_config(args.config, args.set)


def _canvas(cfg) -> CanvasSpec:
    return CanvasSpec(int(cfg["canvas.size_px"]), float(cfg["canvas.meters_per_pixel"]),
                      float(cfg["canvas.camera_height"]))


def _sorted_files(directory: Path, pattern: str) -> list:
    return sorted(p for p in directory.glob(pattern) if not p.name.endswith((".mask", ".bias")))


def cmd_synth(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else int(cfg["seed"])
    out = Path(args.out)
    canvas = _canvas(cfg)
    K = CameraIntrinsics.from_fov(int(cfg["ground.width"]), int(cfg["ground.height"]),
                                  float(cfg["ground.hfov_deg"]))
    scene = make_scene(seed, float(cfg["scene.extent_m"]), int(cfg["scene.texture_size"]))
    (out / "db").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(exist_ok=True)

    half = 0.5 * (args.grid - 1) * args.pitch
    entries = []
    for i in range(args.grid):
        for j in range(args.grid):
            x, y = i * args.pitch - half, j * args.pitch - half
            ident = f"s{i:02d}{j:02d}"
            io.write_feature_map(out / "db" / f"{ident}.cvlt",
                                 _centered(render_satellite(scene, canvas, (x, y))))
            entries.append(io.ManifestEntry(ident, Path(f"{ident}.cvlt"), scene.to_geo(x, y)))
    io.write_manifest(out / "db" / "manifest.csv", entries)

    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng([seed, 1])
    positions = {}
    for q in range(args.n_queries):
        qid = f"q{q:03d}"
        loc = rng.uniform(-half, half, size=2) if half > 0 else np.zeros(2)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        traj = make_trajectory(args.n_frames, args.spacing, heading)
        frames = render_sequence(scene, K, traj, loc, canvas.camera_height)
        qdir = out / "queries" / qid
        qdir.mkdir(exist_ok=True)
        for k, f in enumerate(frames, start=1):
            feat = _centered(f)
            if args.noise > 0:
                feat = FeatureMap(feat.data + args.noise * noise_rng.standard_normal(feat.data.shape), feat.mask)
            io.write_feature_map(qdir / f"frame_{k:03d}.cvlt", feat)
            io.write_pgm(qdir / f"frame_{k:03d}.pgm", f.data[:, :, 0])
        io.write_poses(qdir / "poses.csv", traj.poses)
        io.write_intrinsics(qdir / "intrinsics.csv", [K] * len(frames))
        positions[qid] = scene.to_geo(*loc)
    io.write_positions(out / "queries.csv", positions)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        for key, value in {**cfg, "seed": seed}.items():
            fh.write(f"{key}={value}\n")
    return EXIT_OK


def _centered(fmap: FeatureMap) -> FeatureMap:
    # synthetic "features": intensity shifted to zero mean over [0, 1]
    return FeatureMap(fmap.data - 0.5, fmap.mask)


def cmd_project(args) -> int:
    cfg = _config(args)
    qdir, out = Path(args.query), Path(args.out)
    canvas = _canvas(cfg)
    if args.image_level:
        paths = _sorted_files(qdir, "frame_*.pgm")
        sources = [FeatureMap(io.read_pgm(p)) for p in paths]
    else:
        paths = _sorted_files(qdir, "frame_*.cvlt")
        sources = [io.read_feature_map(p) for p in paths]
    if not sources:
        raise EmptySequence(f"no frames found in {qdir}")
    poses = io.read_poses(qdir / "poses.csv")
    intrinsics = io.read_intrinsics(qdir / "intrinsics.csv")
    if len(intrinsics) == 1:
        intrinsics = intrinsics * len(sources)
    projected = gvp_warp_sequence(sources, intrinsics, poses, canvas)
    out.mkdir(parents=True, exist_ok=True)
    for k, fmap in enumerate(projected, start=1):
        io.write_feature_map(out / f"proj_{k:03d}.cvlt", fmap)
        if args.image_level:
            io.write_pgm(out / f"proj_{k:03d}.pgm", fmap.data[:, :, 0])
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _config(args)
    frames = [io.read_feature_map(p) for p in _sorted_files(Path(args.inputs), "proj_*.cvlt")]
    if not frames:
        raise EmptySequence(f"no projected frames in {args.inputs}")
    mode = "mean" if args.mean else ("pcsf" if args.identity or args.weights else cfg["fusion.mode"])
    weights = None
    if args.weights:
        wdir = Path(args.weights)
        weights = tuple(io.read_conv_stack(wdir / f"{name}.cvlt") for name in ("q", "k", "v"))
    fused = fuse_sequence(frames, weights, mode, args.scale_logits)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_feature_map(args.out, fused)
    return EXIT_OK


RANKING_HEADER = ["query_id", "rank", "db_id", "displacement_m", "displacement_n",
                  "ncc_score", "weighted_score", "distance_d"]


def cmd_retrieve(args) -> int:
    cfg = _config(args)
    entries = io.read_manifest(args.manifest)
    if not entries:
        raise CVLError(f"{args.manifest}: empty manifest")
    query_paths = []
    for p in map(Path, args.queries):
        query_paths.extend(_sorted_files(p, "*.cvlt") if p.is_dir() else [p])
    if not query_paths:
        raise EmptySequence("no query tensors given")
    lam = float(cfg["canvas.meters_per_pixel"])
    radius = args.radius if args.radius is not None else cfg["match.radius_px"]
    radius = int(radius) if radius is not None else default_radius(lam)
    uncertainty = None if args.uncertainty is None else io.read_conv_stack(args.uncertainty)
    retriever = CrossViewRetriever(radius, lam, uncertainty).fit(
        [io.read_feature_map(e.path) for e in entries], [e.id for e in entries])
    records = retriever.rank([io.read_feature_map(p) for p in query_paths],
                             [p.name[: -len(".cvlt")] if p.name.endswith(".cvlt") else p.stem
                              for p in query_paths])
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(RANKING_HEADER) + "\n")
        for rec in records:
            for rank, (dbid, a) in enumerate(zip(rec.db_ids, rec.alignments), start=1):
                fh.write(",".join([rec.query_id, str(rank), dbid, _fmt(a.m * lam), _fmt(a.n * lam),
                                   _fmt(a.ncc), _fmt(a.weighted), _fmt(a.distance)]) + "\n")
    return EXIT_OK


def read_rankings(path) -> dict:
    rows = defaultdict(list)
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows[row["query_id"]].append((int(row["rank"]), row["db_id"]))
    return {q: [d for _, d in sorted(r)] for q, r in rows.items()}


def cmd_eval(args) -> int:
    cfg = _config(args)
    threshold = args.threshold if args.threshold is not None else float(cfg["eval.threshold_m"])
    ks = [int(k) for k in args.ks.split(",")]
    rankings = read_rankings(args.rankings)
    db_pos = {e.id: e.position for e in io.read_manifest(args.manifest)}
    q_pos = io.read_positions(args.query_positions)
    missing = [q for q in q_pos if q not in rankings]
    if missing:
        raise UnknownId(f"no rankings for query {missing[0]!r}")
    hits = success_flags(rankings, db_pos, q_pos, threshold)
    n = len(hits)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("k,recall\n")
        for k in ks:
            good = sum(1 for r in hits.values() if r is not None and r <= k)
            fh.write(f"{k},{_fmt(good / n if n else 0.0)}\n")
    if args.flags:
        with open(args.flags, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(["query_id", "first_hit_rank"] + [f"success_at_{k}" for k in ks]) + "\n")
            for qid, r in hits.items():
                flags = ["1" if r is not None and r <= k else "0" for k in ks]
                fh.write(",".join([qid, "" if r is None else str(r)] + flags) + "\n")
    return EXIT_OK


def read_matrix(path) -> np.ndarray:
    rows = [[float(v) for v in row] for row in csv.reader(io._data_lines(path))]
    D = np.array(rows, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise CVLError(f"{path}: distance matrix must be square")
    if not np.all(np.isfinite(D)) or np.any(D < 0):
        raise CVLError(f"{path}: distances must be finite and nonnegative")
    return D


def cmd_loss(args) -> int:
    D = read_matrix(args.matrix)
    loss = batch_loss(D, args.alpha)
    G = batch_loss_grad(D, args.alpha)
    print(_fmt(loss))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write("query,satellite,distance,gradient\n")
            for q in range(D.shape[0]):
                for s in range(D.shape[1]):
                    fh.write(f"{q},{s},{_fmt(D[q, s])},{_fmt(G[q, s])}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvloc", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic world, queries and database")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-frames", type=int, default=4)
    p.add_argument("--spacing", type=float, default=5.0, help="meters between frames")
    p.add_argument("--grid", type=int, default=10, help="database grid side")
    p.add_argument("--pitch", type=float, default=10.0, help="database grid pitch in meters")
    p.add_argument("--n-queries", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0, help="std of additive feature noise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", parents=[common], help="warp ground frames onto the overhead canvas")
    p.add_argument("--query", required=True, help="directory with frames, poses.csv, intrinsics.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--image-level", action="store_true", help="project raw PGM images instead of features")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("fuse", parents=[common], help="fuse projected frames into one map")
    p.add_argument("--inputs", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--identity", action="store_true", help="attention with identity Q/K/V stacks")
    g.add_argument("--mean", action="store_true", help="plain masked mean")
    g.add_argument("--weights", help="directory with q.cvlt, k.cvlt, v.cvlt")
    p.add_argument("--scale-logits", action="store_true")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("retrieve", parents=[common], help="rank database entries for fused queries")
    p.add_argument("--queries", nargs="+", required=True, help="fused tensors or directories of them")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--uncertainty", help="uncertainty conv stack weights")
    g.add_argument("--no-uncertainty", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", parents=[common], help="recall@k from a rankings CSV")
    p.add_argument("--rankings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--query-positions", required=True)
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--flags")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", help="batch triplet loss and gradients for a distance matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"cvloc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CVLError, ValueError) as exc:
        print(f"cvloc: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
