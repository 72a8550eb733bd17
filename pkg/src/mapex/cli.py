"""Command-line surface: worlds, datasets, codec training/eval, missions.

Every command is deterministic given its flags; ``--seed`` is required
wherever randomness exists.  Exit codes: 0 ok, 2 bad flags or invalid
input, 3 world has no free space, 4 training diverged, 5 robot made no
progress.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

# (rows, cols, half vertical FoV in degrees); the full-scale shapes exist
# for rate arithmetic, the desk shapes are sized for CPU training
SENSOR_PRESETS = {
    "paper-16x1800": (16, 1800, 45.0),
    "paper-64x512": (64, 512, 22.5),
    "desk-16x180": (16, 180, 45.0),
    "desk-32x128": (32, 128, 22.5),
}
DESK_LATENT_DIM = 64


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ------------------------------------------------------------------ worlds


def cmd_gen_world(args) -> int:
    from .grid import FREE
    from .world import WorldSpec, generate_world, save_world

    spec = WorldSpec(nx=args.nx, ny=args.ny, rooms=args.rooms,
                     levels=args.levels, voxel_size=args.svxl,
                     with_steps=args.steps)
    world = generate_world(spec, seed=args.seed)
    save_world(world, args.out)
    free = int((world.grid.cells == FREE).sum())
    dims = "x".join(str(d) for d in world.grid.dims)
    print(f"wrote {args.out}: {dims} voxels at {args.svxl} m, "
          f"{free * args.svxl ** 3:.1f} m^3 free")
    return 0


def cmd_gen_dataset(args) -> int:
    from .geometry import LidarIntrinsics, Pose
    from .grid import FREE
    from .mission import simulate_lidar
    from .remap import PAIR_SUFFIX, save_pair, voxel_aware_remap
    from .world import load_world

    rows, cols, fov = SENSOR_PRESETS[args.sensor]
    intr = LidarIntrinsics(rows=rows, cols=cols,
                           min_elevation=-math.radians(fov),
                           max_elevation=math.radians(fov),
                           max_range=args.range)
    world = load_world(args.world)
    free_mask = world.grid.cells == FREE
    if not free_mask.any():
        return _fail(f"{args.world} has no free space to scan from", 3)
    # keep a voxel of clearance around each sample: a wall within half a
    # voxel diagonal falls into the sensor's own cell of the remap lattice
    # (which is rotated with the pose), blanking the whole target image
    from scipy import ndimage
    interior = ndimage.binary_erosion(free_mask, np.ones((3, 3, 3)))
    free = np.argwhere(interior if interior.any() else free_mask)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    svxl = world.grid.voxel_size
    for i in range(args.poses):
        vox = free[rng.integers(free.shape[0])]
        pos = world.grid.origin + (vox + 0.5) * svxl
        pose = Pose.from_yaw(pos, rng.uniform(-math.pi, math.pi))
        img = simulate_lidar(world, pose, intr)
        save_pair(out / f"{i:05d}{PAIR_SUFFIX}", img,
                  voxel_aware_remap(img, args.svxl))
    manifest = {"count": args.poses, "s_vxl": args.svxl, "seed": args.seed,
                "sensor": args.sensor, "world": str(args.world)}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.poses == 0:
        print(f"warning: wrote empty dataset to {out}")
    else:
        print(f"wrote {args.poses} pairs ({rows}x{cols}) to {out}")
    return 0


# ------------------------------------------------------------------ codecs


def cmd_train_codec(args) -> int:
    from .codec import CodecConfig, compression_ratio, save_codec, train
    from .remap import load_dataset

    raw, remapped, intr = load_dataset(args.dataset)
    config = CodecConfig(rows=intr.rows, cols=intr.cols, latent_dim=args.nz,
                         max_range=intr.max_range, beta=args.beta,
                         learning_rate=args.lr, batch_size=args.batch,
                         epochs=args.epochs)
    log_path = (Path(args.out).with_suffix(".loss.csv")
                if args.log is None else args.log)
    result = train(raw, remapped, config, intr, seed=args.seed,
                   log_path=log_path)
    save_codec(args.out, result.codec)
    test = [h for h in result.history if h["split"] == "test"]
    final = test[-1] if test else result.history[-1]
    print(f"wrote {args.out} (N_z={args.nz}, "
          f"ratio {compression_ratio(intr, args.nz):.1f}:1); "
          f"final {final['split']} L={final['L']:.4f} "
          f"(recon {final['L_recon']:.4f}, KL {final['L_KL']:.4f}); "
          f"loss log {log_path}")
    return 0


def _map_similarity(target_img, recon_img, s_vxl: float) -> float:
    from .geometry import Pose, unproject
    from .grid import integrate_cloud, occupancy_similarity
    from .remap import local_grid

    grids = []
    for img in (target_img, recon_img):
        g = local_grid(img.intrinsics.max_range, s_vxl)
        cloud = unproject(img)
        if cloud.shape[0]:
            integrate_cloud(g, Pose.identity(), cloud)
        grids.append(g)
    return occupancy_similarity(*grids)


def cmd_eval_codec(args) -> int:
    import csv

    from .codec import LosslessCodec, evaluate, load_codec
    from .geometry import RangeImage
    from .remap import load_dataset, split_dataset, voxel_aware_remap

    raw, _, intr = load_dataset(args.dataset)
    _, test_idx = split_dataset(raw.shape[0], args.seed)
    if test_idx.size == 0:
        return _fail("dataset too small to hold out a test split", 2)
    svxls = [float(s) for s in args.svxl_list.split(",")]

    codecs = []
    for path in args.params:
        codec = load_codec(path)
        if (codec.config.rows, codec.config.cols) != (intr.rows, intr.cols):
            return _fail(f"{path} was trained for "
                         f"{codec.config.rows}x{codec.config.cols}, dataset "
                         f"is {intr.rows}x{intr.cols}", 2)
        codecs.append(codec)
    codecs.sort(key=lambda c: c.latent_dim)
    if args.nz_list:
        wanted = [int(n) for n in args.nz_list.split(",")]
        by_dim = {c.latent_dim: c for c in codecs}
        missing = [n for n in wanted if n not in by_dim]
        if missing:
            return _fail(f"no --params file provides N_z in {missing}", 2)
        codecs = [by_dim[n] for n in wanted]

    test_imgs = [RangeImage(intr, raw[i].copy()) for i in test_idx]
    remaps = {}  # s_vxl -> (stacked target ranges, target images)
    for s in svxls:
        imgs = [voxel_aware_remap(img, s) for img in test_imgs]
        remaps[s] = (np.stack([im.ranges for im in imgs]), imgs)

    def mean_similarity(codec, s, inputs):
        sims = [_map_similarity(target, codec.decode_latent(
                codec.encode_latent(img)), s)
                for img, target in zip(inputs, remaps[s][1])]
        return sum(sims) / len(sims)

    # baseline round-trips the remapped target itself, pinning the metric
    # ceiling at 1.0; learned rows encode the raw scan the robot actually has
    rows = [("lossless", svxls[0], "", "", "",
             repr(mean_similarity(LosslessCodec(intr), svxls[0],
                                  remaps[svxls[0]][1])))]
    for codec in codecs:
        for s in svxls:
            l, lr, lkl = evaluate(codec, raw[test_idx], remaps[s][0])
            rows.append((codec.latent_dim, s, repr(l), repr(lr), repr(lkl),
                         repr(mean_similarity(codec, s, test_imgs))))

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["nz", "s_vxl", "L", "L_recon", "L_KL", "similarity"])
        w.writerows(rows)
    print(f"wrote {args.out}: {len(rows)} rows "
          f"({len(codecs)} codecs x {len(svxls)} voxel sizes + baseline)")
    return 0


# ---------------------------------------------------------------- missions


def cmd_run_mission(args) -> int:
    from .mission import load_mission_config, run_mission

    config = load_mission_config(args.config)
    out = (Path(args.config).with_suffix("").name + "_out"
           if args.out is None else args.out)
    report, _ = run_mission(config, out_dir=out)
    print(f"mission finished in {report['duration']:.1f} s "
          f"(trigger={'yes' if report['trigger_fired'] else 'no'}, "
          f"deploy_t={report['deploy_t']}, "
          f"timed_out={report['timed_out']})")
    for name, r in sorted(report["robots"].items()):
        print(f"  {name}: explored {r['explored_m3']:.1f} m^3, "
              f"{r['keyframes']} keyframes, tx {r['bytes_tx']} B")
    print(f"  merged similarity vs truth: "
          f"{report['merged_similarity_vs_truth']:.4f}")
    print(f"  outputs in {out}/")
    return 0


def cmd_report(args) -> int:
    from . import report as rpt

    mission_dir = Path(args.mission_dir)
    if not (mission_dir / "mission.json").is_file():
        return _fail(f"{mission_dir} has no mission.json", 2)
    report = rpt.load_report(mission_dir)
    out_dir = mission_dir if args.out_dir is None else Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rpt.write_rates_csv(out_dir / "rates.csv", report, args.nz)
    figures = rpt.render_figures(mission_dir, out_dir)
    print(rpt.render_summary(report, args.nz, mission_dir, args.markdown))
    print(f"wrote {out_dir / 'rates.csv'} and "
          + ", ".join(str(p) for p in figures))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapex",
        description="task-driven map compression and two-robot exploration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a voxel world file")
    p.add_argument("--nx", type=int, default=36)
    p.add_argument("--ny", type=int, default=30)
    p.add_argument("--rooms", type=int, default=3)
    p.add_argument("--levels", type=int, default=1, choices=(1, 2))
    p.add_argument("--svxl", type=float, default=0.2)
    p.add_argument("--steps", action="store_true",
                   help="carve a stepped ramp between levels")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("gen-dataset",
                       help="render lidar scan / voxel-remap training pairs")
    p.add_argument("--world", required=True)
    p.add_argument("--poses", type=int, required=True)
    p.add_argument("--svxl", type=float, default=0.2)
    p.add_argument("--sensor", choices=sorted(SENSOR_PRESETS),
                   default="desk-16x180")
    p.add_argument("--range", type=float, default=5.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-codec", help="train a range-image codec")
    p.add_argument("--dataset", required=True)
    p.add_argument("--nz", type=int, default=DESK_LATENT_DIM)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--log", default=None,
                   help="loss log CSV (default: alongside --out)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("eval-codec",
                       help="ablation table over latent and voxel sizes")
    p.add_argument("--params", nargs="+", required=True,
                   help="one or more trained codec files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--svxl-list", default="0.2",
                   help="comma-separated voxel sizes")
    p.add_argument("--nz-list", default=None,
                   help="restrict/order rows to these latent sizes")
    p.add_argument("--seed", type=int, required=True,
                   help="test split seed (match training for honest holdout)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_codec)

    p = sub.add_parser("run-mission", help="run a two-robot mission")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (default: <config>_out)")
    p.set_defaults(func=cmd_run_mission)

    p = sub.add_parser("report", help="summarize a mission output directory")
    p.add_argument("--mission-dir", required=True)
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--nz", type=int, default=None,
                   help="latent size for the streaming-latent rate row")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .codec import NonFiniteLoss
    from .mission import ConfigInvalid, NoProgress

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as e:
        return _fail(str(e), 2)
    except NoProgress as e:
        return _fail(str(e), 5)
    except NonFiniteLoss as e:
        return _fail(str(e), 4)
    except FileNotFoundError as e:
        return _fail(str(e), 2)
    except ValueError as e:  # corrupt files, empty datasets, bad lists
        return _fail(str(e), 2)


if __name__ == "__main__":
    sys.exit(main())
