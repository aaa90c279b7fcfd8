"""Command-line interface.

    planefield synth <spec> <out>
    planefield fit <dataset> --frame N [fitting flags]
    planefield run <dataset> --mode {s,ss} [--config FILE] --out DIR [--set key=value ...]
    planefield render <checkpoint> --frame N --out IMG [--dataset DIR] [--stride K]
    planefield eval --pred PLY --gt PLY [--threshold 0.05]
    planefield export-bank <run-dir>

Global flags (before or after the subcommand): --seed, --quiet, --json.
Exit status: 0 on success, 1 on runtime errors, 2 on usage errors.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .bank import MemoryBank
from .config import load_config
from .dataio import load_dataset
from .errors import PlaneFieldError, RunError
from .field import load_checkpoint
from .fitting import FitParams, fit_planes
from .geometry import unproject
from .metrics import evaluate_clouds, report_json
from .pipeline import render_segmentation_image, run_sequence, save_segmentation
from .ply import read_labeled_ply
from .synthetic import generate_synthetic, load_scene_spec

log = logging.getLogger("planefield")


def _global_flags(parser, suppress: bool):
    # subcommands repeat the flags with suppressed defaults so that a flag
    # given before the subcommand is not reset by the subparser
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--seed", type=int, default=default(None),
                        help="random seed (default 0, or the config file's seed for run)")
    parser.add_argument("--quiet", action="store_true", default=default(False), help="only print errors")
    parser.add_argument("--json", action="store_true", default=default(False),
                        help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planefield", description="Planar-primitive field mapping")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("spec", help="preset name (room, wall) or JSON scene file")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--depth-noise", type=float, help="override depth noise sigma (m)")
    p.add_argument("--depth-scale", type=float, default=1000.0)

    p = sub.add_parser("fit", parents=[common], help="fit planes to one frame's depth")
    p.add_argument("dataset")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--stride", type=int, default=1, help="pixel stride when unprojecting")
    p.add_argument("--depth-scale", type=float, default=1000.0)
    defaults = FitParams()
    for name, kind in (("n_min", int), ("eps", float), ("eps_cluster", float), ("tau_n", float),
                       ("p_hat", float), ("k_normals", int), ("max_iterations", int),
                       ("link_factor", float)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind,
                       default=getattr(defaults, name))

    p = sub.add_parser("run", parents=[common], help="train on a dataset")
    p.add_argument("dataset")
    p.add_argument("--mode", choices=("s", "ss"), required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")

    p = sub.add_parser("render", parents=[common], help="render a segmentation image")
    p.add_argument("checkpoint")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="dataset root (default: the one recorded in the checkpoint)")
    p.add_argument("--stride", type=int, default=1)

    p = sub.add_parser("eval", parents=[common], help="compare labeled point clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--include-unlabeled", action="store_true")

    p = sub.add_parser("export-bank", parents=[common], help="print a run's memory bank")
    p.add_argument("run_dir")
    return parser


def _emit(args, payload: dict, text: str):
    if args.json:
        print(json.dumps(payload, indent=2))
    elif not args.quiet:
        print(text)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def cmd_synth(args):
    scene = load_scene_spec(args.spec)
    scene.texture_seed = _seed(args)
    if args.depth_noise is not None:
        scene.depth_noise = args.depth_noise
    cloud = generate_synthetic(scene, args.out, args.depth_scale)
    _emit(args, {"out": args.out, "frames": len(scene.poses), "planes": len(scene.planes),
                 "gt_points": len(cloud)},
          f"wrote {len(scene.poses)} frames, {len(scene.planes)} planes, "
          f"{len(cloud)} ground-truth points to {args.out}")


def cmd_fit(args):
    params = FitParams(args.n_min, args.eps, args.eps_cluster, args.tau_n, args.p_hat,
                       args.k_normals, args.max_iterations, args.link_factor).validate()
    ds = load_dataset(args.dataset, "ss", args.depth_scale)
    fr = ds.frame(args.frame)
    d = fr.depth[:: args.stride, :: args.stride]
    v, u = np.nonzero(d > 0)
    u, v = u * args.stride, v * args.stride
    pts = unproject(np.stack([u, v], axis=1).astype(float), fr.depth[v, u], ds.intrinsics, fr.pose)
    res = fit_planes(pts, params, seed=_seed(args), origins=fr.pose.origin)
    inst = [{"params": [float(x) for x in i.params], "members": int(len(i.members)),
             "inlier_rms": i.inlier_rms} for i in res.instances]
    lines = [f"{len(pts)} points, {len(inst)} planes, {len(res.unassigned)} unassigned"]
    lines += [f"  {k}: n=({p['params'][0]:.4f}, {p['params'][1]:.4f}, {p['params'][2]:.4f}) "
              f"d={p['params'][3]:.4f} members={p['members']} rms={p['inlier_rms']:.4f}"
              for k, p in enumerate(inst)]
    _emit(args, {"points": int(len(pts)), "instances": inst, "unassigned": int(len(res.unassigned))},
          "\n".join(lines))


def cmd_run(args):
    overrides = {"mode": args.mode}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = load_config(args.config, overrides)
    ds = load_dataset(args.dataset, cfg.mode, cfg.depth_scale)

    def progress(i, trainer):
        if not args.quiet and not args.json and (i % 10 == 0 or i == len(ds) - 1):
            print(f"frame {i + 1}/{len(ds)}  bank={len(trainer.bank)}", file=sys.stderr)

    art = run_sequence(ds, cfg, args.out, progress=progress)
    with open(art.report) as f:
        report = json.load(f)
    text = f"run finished: {report['steps']} steps, bank holds {report['bank_size']} planes, " \
           f"artifacts in {args.out}"
    if art.metrics:
        m = art.metrics
        text += (f"\nRI {m['ri']:.4f}  VOI {m['voi']:.4f}  SC {m['sc']:.4f}  "
                 f"F-score {m['f_score']:.4f} @ {m['threshold']} m")
    _emit(args, report, text)


def cmd_render(args):
    fld, meta = load_checkpoint(args.checkpoint)
    root = args.dataset or meta.get("dataset")
    if root is None:
        raise ValueError("checkpoint does not record a dataset; pass --dataset")
    tc = meta.get("train_config", {})
    ds = load_dataset(root, "ss", tc.get("depth_scale", 1000.0))
    if not 0 <= args.frame < len(ds):
        raise IndexError(f"frame {args.frame} out of range [0, {len(ds)})")
    kw = {k: tc[c] for k, c in (("tr", "tr"), ("t_near", "t_near"), ("t_far", "t_far"),
                                 ("step", "render_step"), ("n_band", "n_band_render")) if c in tc}
    ids, color = render_segmentation_image(fld, ds.poses[args.frame], ds.intrinsics, args.stride, **kw)
    stem, _ = os.path.splitext(args.out)
    save_segmentation(ids, color, stem)
    found = sorted(int(i) for i in np.unique(ids) if i >= 0)
    _emit(args, {"out": stem + ".png", "color": stem + "_color.png", "shape": list(ids.shape),
                 "ids": found},
          f"wrote {stem}.png and {stem}_color.png ({ids.shape[1]}x{ids.shape[0]}, ids {found})")


def cmd_eval(args):
    pred = read_labeled_ply(args.pred)
    gt = read_labeled_ply(args.gt)
    rep = evaluate_clouds(pred.points, pred.labels, gt.points, gt.labels, args.threshold,
                          args.include_unlabeled)
    text = (f"RI {rep['ri']:.4f}  VOI {rep['voi']:.4f}  SC {rep['sc']:.4f}\n"
            f"accuracy {rep['accuracy']:.4f} m  completeness {rep['completeness']:.4f} m\n"
            f"precision {rep['precision']:.4f}  recall {rep['recall']:.4f}  "
            f"F-score {rep['f_score']:.4f} @ {rep['threshold']} m")
    if args.json:
        print(report_json(rep), end="")
    elif not args.quiet:
        print(text)


def cmd_export_bank(args):
    path = os.path.join(args.run_dir, "bank.txt")
    with open(path) as f:
        text = f.read()
    bank = MemoryBank.from_snapshot(text, capacity=max(64, len(text.splitlines())))
    _emit(args, {"planes": [[float(x) for x in row] for row in bank.planes]}, text.rstrip("\n"))


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "run": cmd_run, "render": cmd_render,
            "eval": cmd_eval, "export-bank": cmd_export_bank}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (PlaneFieldError, OSError, ValueError, IndexError, KeyError) as e:
        info = e.report() if isinstance(e, RunError) else {"error": type(e).__name__, "message": str(e)}
        if args.json:
            print(json.dumps(info), file=sys.stderr)
        else:
            print(f"error: {info['error']}: {info['message']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
