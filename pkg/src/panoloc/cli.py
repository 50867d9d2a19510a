"""Command-line interface.

Subcommands: synth, build-db, retrieve, relocalize, evaluate, render-pano.
Exit codes: 0 success, 1 internal error, 2 usage or input error.
The RELOC_SEED environment variable overrides all seeds.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from panoloc.config import PipelineConfig, load_config
from panoloc.evaluate import (DEFAULT_K_LIST, DEFAULT_RR_THRESHOLDS, recall_at_k,
                              reloc_recall)
from panoloc.harness import (DEFAULT_QUERY_INTRINSICS, SceneConfig, generate_scene,
                             generate_trajectory, render_query)
from panoloc.io import (LoadError, Pose, format_pose_line, load_gray_image,
                        load_intrinsics, load_point_cloud, load_trajectory,
                        quat_to_rotation, save_intrinsics, save_pgm,
                        save_point_cloud, save_trajectory, crop_local_map,
                        sample_trajectory)
from panoloc.mapdb import build_database, load_database, save_database
from panoloc.pipeline import (camera_pose_in_map, relocalize_query,
                              retrieve_candidates)
from panoloc.projection import clahe, equalize_map_intensity, render_panorama, scale_map_intensity
from panoloc.pose import STATUS_OK

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class InputError(Exception):
    """User-facing input problem; maps to exit code 2."""


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (InputError, LoadError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoloc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--poses", type=int, default=50)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--path-shape", default="straight", choices=["straight", "loop"])
    p.add_argument("--extent", type=float, default=60.0)
    p.add_argument("--walls", type=int, default=10)
    p.add_argument("--density", type=float, default=400.0)
    p.add_argument("--texture", default="tiles",
                   choices=["checker", "blobs", "stripes", "tiles"])
    p.add_argument("--texture-scale", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--jitter-trans", type=float, default=0.5)
    p.add_argument("--jitter-rot", type=float, default=5.0)
    p.add_argument("--gain", type=float, default=1.2)
    p.add_argument("--bias", type=float, default=8.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-db", help="build a map database")
    p.add_argument("map_ply")
    p.add_argument("traj_txt")
    p.add_argument("out_dir")
    _add_config_args(p)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("retrieve", help="coarse retrieval for query images")
    p.add_argument("db_dir")
    p.add_argument("queries", nargs="+")
    _add_config_args(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("relocalize", help="relocalize query images")
    p.add_argument("db_dir")
    p.add_argument("intrinsics")
    p.add_argument("queries", nargs="+")
    p.add_argument("--dump-matches", default=None, metavar="DIR")
    _add_config_args(p)
    p.set_defaults(func=cmd_relocalize)

    p = sub.add_parser("evaluate", help="compute metrics from result files")
    p.add_argument("results")
    p.add_argument("gt")
    p.add_argument("--retrievals", default=None)
    p.add_argument("--db", default=None)
    p.add_argument("--out-tsv", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-pano", help="render one map panorama")
    p.add_argument("map_ply")
    p.add_argument("traj_txt")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_render_pano)
    return parser


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config file (section.key = value)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--no-hec", action="store_true")
    p.add_argument("--no-equalization", action="store_true")
    p.add_argument("--no-covis-cluster", action="store_true")
    p.add_argument("--no-two-stage", action="store_true")
    p.add_argument("--no-covis-filter", action="store_true")


def _resolve_config(args, base: PipelineConfig | None = None) -> PipelineConfig:
    overrides: dict[str, str] = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.no_hec:
        overrides["projection.use_hec"] = "false"
    if args.no_equalization:
        overrides["pipeline.use_equalization"] = "false"
    if args.no_covis_cluster:
        overrides["pipeline.use_covis_cluster"] = "false"
    if args.no_two_stage:
        overrides["pipeline.use_two_stage"] = "false"
    if args.no_covis_filter:
        overrides["pipeline.use_covis_filter"] = "false"
    env_seed = os.environ.get("RELOC_SEED")
    if env_seed is not None:
        overrides["ransac.seed"] = env_seed
    if args.config is not None:
        return load_config(args.config, overrides)
    cfg = base if base is not None else PipelineConfig()
    return cfg.with_overrides(overrides)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    seed = int(os.environ.get("RELOC_SEED", args.seed))
    scene_cfg = SceneConfig(seed=seed, extent=args.extent, wall_count=args.walls,
                            points_per_m2=args.density, texture=args.texture,
                            texture_scale=args.texture_scale,
                            intensity_noise_sigma=args.noise)
    out = Path(args.out)
    (out / "queries").mkdir(parents=True, exist_ok=True)

    cloud = generate_scene(scene_cfg)
    save_point_cloud(cloud, out / "map.ply")
    traj = generate_trajectory(scene_cfg, args.poses, args.path_shape, args.spacing)
    save_trajectory(traj, out / "traj.txt")
    K = DEFAULT_QUERY_INTRINSICS
    save_intrinsics(K, out / "intrinsics.cfg")

    # query poses interleave the mapping poses along the same path
    qtraj = generate_trajectory(scene_cfg, args.queries, args.path_shape,
                                args.spacing * args.poses / max(args.queries, 1))
    eq_cloud = equalize_map_intensity(cloud)
    gt_lines = []
    for i, pose in enumerate(qtraj.poses):
        img, gt = render_query(eq_cloud, pose, K,
                               jitter=(args.jitter_trans, args.jitter_rot),
                               seed=seed * 100003 + i, gain=args.gain, bias=args.bias)
        save_pgm(img, out / "queries" / f"query_{i:04d}.pgm")
        gt_lines.append(format_pose_line(i, gt))
    (out / "gt.txt").write_text("\n".join(gt_lines) + "\n")
    print(f"wrote {len(cloud)} points, {len(traj)} poses, {args.queries} queries to {out}")
    return EXIT_OK


def cmd_build_db(args) -> int:
    cfg = _resolve_config(args)
    cloud = load_point_cloud(args.map_ply)
    traj = load_trajectory(args.traj_txt)
    db = build_database(cloud, traj, cfg)
    save_database(db, args.out_dir)
    counts = np.array(sorted(db.covis.values()))
    print(f"built database: {len(db.images)} images, {len(db.cloud)} points")
    if counts.size:
        print(f"covisibility: min {counts[0]} median {int(np.median(counts))} "
              f"max {counts[-1]} over {counts.size} points")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    db = load_database(args.db_dir)
    cfg = _resolve_config(args, db.config)
    for qpath in args.queries:
        img = load_gray_image(qpath)
        cands = retrieve_candidates(img, db, cfg)
        if len(args.queries) > 1:
            print(f"# query {Path(qpath).stem}")
        for c in cands:
            print(f"{c.image_id} {c.best_patch} {c.score:.6f} {c.cluster_label}")
    return EXIT_OK


def cmd_relocalize(args) -> int:
    db = load_database(args.db_dir)
    cfg = _resolve_config(args, db.config)
    K = load_intrinsics(args.intrinsics)
    dump_dir = Path(args.dump_matches) if args.dump_matches else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    for qpath in args.queries:
        name = Path(qpath).stem
        try:
            img = load_gray_image(qpath)
        except LoadError as e:
            print(f"{name} FAILED 0 0 0 0 0 0 1 0 0.0 nan # {e}")
            continue
        dump_cb = _make_dump_cb(dump_dir, name) if dump_dir else None
        res = relocalize_query(img, db, K, cfg, dump_cb)
        if res.status == STATUS_OK:
            pose = camera_pose_in_map(res.pose)
            line = format_pose_line(0, pose).split(" ", 1)[1]
            print(f"{name} OK {line} {res.inlier_count} "
                  f"{res.inlier_ratio:.4f} {res.mean_reproj_err_px:.4f}")
        else:
            print(f"{name} FAILED 0 0 0 0 0 0 1 0 0.0 nan # {res.reason}")
        if dump_dir:
            _dump_corrs(dump_dir, name, res)
        sys.stdout.flush()
    return EXIT_OK


def _make_dump_cb(dump_dir: Path, name: str):
    def dump_cb(image_id, query_proc, map_img, cluster, qfeats, mfeats):
        vis = _side_by_side(query_proc, map_img.intensity)
        qh = query_proc.shape[0]
        for (qi, mi) in cluster.pairs:
            qx, qy = qfeats.keypoints[qi]
            mx, my = mfeats.keypoints[mi]
            _draw_segment(vis, qx, qy, query_proc.shape[1] + mx, my)
        save_pgm(vis, dump_dir / f"{name}_cand{image_id}.pgm")

    return dump_cb


def _side_by_side(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = max(a.shape[0], b.shape[0])
    out = np.zeros((h, a.shape[1] + b.shape[1]), dtype=np.uint8)
    out[: a.shape[0], : a.shape[1]] = a
    out[: b.shape[0], a.shape[1] :] = b
    return out


def _draw_segment(img: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> None:
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.clip(np.linspace(x0, x1, n).round().astype(int), 0, img.shape[1] - 1)
    ys = np.clip(np.linspace(y0, y1, n).round().astype(int), 0, img.shape[0] - 1)
    img[ys, xs] = 255


def _dump_corrs(dump_dir: Path, name: str, res) -> None:
    # written after filtering; one line per surviving correspondence
    lines = []
    for c in getattr(res, "correspondences", []):
        x, y, z = c.point_xyz
        lines.append(f"{c.query_px[0]:.2f} {c.query_px[1]:.2f} "
                     f"{x:.4f} {y:.4f} {z:.4f} {c.covis} {c.stage}")
    (dump_dir / f"{name}_corrs.txt").write_text("\n".join(lines) + "\n" if lines else "")


def cmd_evaluate(args) -> int:
    results = _parse_results(args.results)
    gt = _parse_gt(args.gt)
    if not results:
        raise InputError("empty results file")
    if sorted(results) != sorted(gt):
        raise InputError("query/ground-truth id mismatch")
    ids = sorted(results)
    pred = [results[i] for i in ids]
    gt_poses = [gt[i] for i in ids]
    report = reloc_recall(pred, gt_poses)

    rak = {}
    if args.retrievals:
        if not args.db:
            raise InputError("--retrievals requires --db for projecting poses")
        db = load_database(args.db)
        img_pos = {img.image_id: img.pose.translation for img in db.images}
        per_query = _parse_retrievals(args.retrievals)
        if sorted(per_query) != ids:
            raise InputError("retrievals/ground-truth id mismatch")
        cand_pos = [np.array([img_pos[i] for i in per_query[q]]) for q in ids]
        gt_pos = [gt[q].translation for q in ids]
        rak = recall_at_k(cand_pos, gt_pos, DEFAULT_K_LIST)
        report.recall_at_k = rak

    print(f"queries: {report.n_queries}")
    for k, v in sorted(rak.items()):
        print(f"R@{k}: {v:.4f}")
    for (tt, tr), v in report.rr.items():
        print(f"RR({tt}m/{tr}deg): {v:.4f}")
    print(f"RMSE(m): {report.rmse:.4f}  MSE(m^2): {report.mse:.4f}  "
          f"MAE(m): {report.mae:.4f}  Max(m): {report.max_err:.4f}  "
          f"(over {report.n_gated} gated queries)")

    out_tsv = args.out_tsv or "report.tsv"
    with open(out_tsv, "w") as f:
        header = [f"R@{k}" for k in sorted(rak)]
        header += [f"RR({tt}m/{tr}deg)" for tt, tr in DEFAULT_RR_THRESHOLDS]
        header += ["rmse", "mse", "mae", "max"]
        f.write("\t".join(header) + "\n")
        row = [f"{rak[k]:.6f}" for k in sorted(rak)]
        row += [f"{report.rr[t]:.6f}" for t in DEFAULT_RR_THRESHOLDS]
        row += [f"{report.rmse:.6f}", f"{report.mse:.6f}",
                f"{report.mae:.6f}", f"{report.max_err:.6f}"]
        f.write("\t".join(row) + "\n")
    return EXIT_OK


def _parse_results(path: str) -> dict[str, Pose | None]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"results file not found: {path}")
    out: dict[str, Pose | None] = {}
    with open(p) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            name, status = tokens[0], tokens[1]
            if status == STATUS_OK:
                tx, ty, tz, qx, qy, qz, qw = (float(v) for v in tokens[2:9])
                out[name] = Pose(quat_to_rotation(qx, qy, qz, qw),
                                 np.array([tx, ty, tz]))
            else:
                out[name] = None
    return out


def _parse_gt(path: str) -> dict[str, Pose]:
    traj = load_trajectory(path)
    return {f"query_{i:04d}": pose for i, pose in zip(traj.indices, traj.poses)}


def _parse_retrievals(path: str) -> dict[str, list[int]]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"retrievals file not found: {path}")
    out: dict[str, list[int]] = {}
    current = None
    with open(p) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# query "):
                current = line[len("# query "):].strip()
                out[current] = []
            elif current is not None:
                out[current].append(int(line.split()[0]))
    return out


def cmd_render_pano(args) -> int:
    cfg = _resolve_config(args)
    cloud = load_point_cloud(args.map_ply)
    traj = load_trajectory(args.traj_txt)
    if cfg.use_equalization:
        cloud = equalize_map_intensity(cloud)
    else:
        cloud = scale_map_intensity(cloud)
    poses = sample_trajectory(traj, cfg.sample_interval_m)
    if not (0 <= args.index < len(poses)):
        raise InputError(f"pose index {args.index} out of range [0, {len(poses)})")
    local = crop_local_map(cloud, poses[args.index], cfg.max_dist_m)
    img = render_panorama(local, poses[args.index], cfg.projection, args.index)
    out = img.intensity
    if cfg.use_equalization:
        out = clahe(out, cfg.clahe_clip_limit, cfg.clahe_tiles)
    save_pgm(out, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
