"""Command-line entry point.

Subcommands wire the pipeline stages together: gen-data, fit, train,
reconstruct, ablate. Machine-readable results go to stdout or --out
files; progress logs go to stderr. Exit codes: 0 success, 2 usage or
validation error, 3 io error, 4 numerical failure.

``--threads N`` caps the BLAS/numba thread pools; it is applied before
numpy is imported, so it must appear on the command line (not the config).
``--threads 1`` gives bit-reproducible runs.
"""

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _apply_threads(argv):
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv):
            n = argv[i + 1]
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                        "NUMBA_NUM_THREADS"):
                os.environ.setdefault(var, n)


def _log(msg):
    print(msg, file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="canonavatar",
        description="Canonical-space avatar reconstruction pipeline.")
    parser.add_argument("--threads", type=int, default=None,
                        help="thread cap for BLAS/numba pools (1 = bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--train-fraction", type=float, default=0.95)
    p.add_argument("--config", default=None, help="config file for body/pose ranges")

    p = sub.add_parser("fit", help="joint shape/pose fitting for one subject")
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--noise-beta", type=float, default=0.1)
    p.add_argument("--noise-theta", type=float, default=0.1)
    p.add_argument("--noise-obs", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)

    p = sub.add_parser("train", help="train the occupancy/skinning predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="checkpoint path (.avp)")
    p.add_argument("--curve", default=None, help="loss curve csv (default <out>.csv)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("reconstruct", help="extract the canonical mesh")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True, help="output OBJ path")
    p.add_argument("--oracle", action="store_true",
                   help="use the analytic occupancy instead of the network")
    p.add_argument("--skinning", default=None, help="also export per-vertex weights CSV")
    p.add_argument("--fit", action="store_true", dest="run_fit",
                   help="re-fit shape/poses from noisy init before reconstructing")
    p.add_argument("--noise-beta", type=float, default=0.1)
    p.add_argument("--noise-theta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="cumulative ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="write the table JSON here")
    return parser


def _load_config(path):
    from .config import default_config, load_config
    return load_config(path) if path else default_config()


def cmd_gen_data(args):
    from . import synth
    cfg = _load_config(args.config)
    if args.subjects < 2:
        raise ValueError("need >= 2 subjects")
    manifest = synth.generate_dataset(
        args.subjects, args.frames, args.seed, args.out,
        image_size=args.image_size,
        beta_range=(cfg.beta_min, cfg.beta_max),
        pose_range=cfg.pose_range,
        root_rot_range=cfg.root_rot_range,
        root_trans_range=cfg.root_trans_range,
        garment_amp_max=cfg.garment_max,
        crop_margin=cfg.crop_margin)
    manifest = synth.split_dataset(manifest, args.train_fraction, args.seed)
    path = os.path.join(args.out, "manifest.json")
    synth.save_manifest(path, manifest)
    n_train = sum(1 for s in manifest["subjects"] if s["split"] == "train")
    _log(f"wrote {args.subjects} subjects ({n_train} train) to {args.out}")
    print(path)
    return EXIT_OK


def _find_subject(manifest, subject_id):
    for entry in manifest["subjects"]:
        if entry["id"] == subject_id:
            return entry
    raise ValueError(f"unknown subject {subject_id!r}")


def cmd_fit(args):
    from pathlib import Path

    from . import fit as fitmod
    from .body import load_body
    from .synth import load_frame, load_manifest

    manifest = load_manifest(Path(args.data) / "manifest.json")
    entry = _find_subject(manifest, args.subject)
    beta, _, _ = load_body(Path(args.data) / entry["body"])
    frames = [load_frame(args.data, f, entry["id"]) for f in entry["frames"]]
    problem = fitmod.make_problem(beta, [f.pose for f in frames],
                                  [f.camera for f in frames], seed=args.seed,
                                  noise_beta=args.noise_beta,
                                  noise_theta=args.noise_theta,
                                  noise_obs=args.noise_obs)
    result = fitmod.fit_joint(problem,
                              fitmod.FitConfig(max_iters=args.max_iters),
                              beta_true=beta.as_array())
    print(fitmod.fit_report_json(result))
    return EXIT_OK


def cmd_train(args):
    from pathlib import Path

    from . import training
    from .net import save_params
    from .synth import load_manifest

    cfg = _load_config(args.config)
    if args.steps is not None:
        from dataclasses import replace
        cfg = replace(cfg, steps=args.steps)
    manifest = load_manifest(Path(args.data) / "manifest.json")
    params, rows = training.train(manifest, args.data, cfg, seed=args.seed, log=_log)
    save_params(args.out, params)
    curve = args.curve or (str(args.out) + ".csv")
    training.write_loss_curve(curve, rows)
    _log(f"checkpoint written to {args.out}")
    print(json.dumps({"checkpoint": str(args.out), "curve": str(curve),
                      "final_loss": rows[-1][1], "final_val_iou": rows[-1][2]},
                     sort_keys=True))
    return EXIT_OK


def cmd_reconstruct(args):
    from pathlib import Path

    from . import fit as fitmod
    from . import recon
    from .body import ShapeParams, build_capsule_body, load_body
    from .net import load_params
    from .synth import load_frame, load_manifest

    if args.res < 16:
        raise ValueError("grid resolution must be >= 16")
    if not args.oracle and args.ckpt is None:
        raise ValueError("need --ckpt or --oracle")

    manifest = load_manifest(Path(args.data) / "manifest.json")
    entry = _find_subject(manifest, args.subject)
    beta, garment, _ = load_body(Path(args.data) / entry["body"])
    gt_body = build_capsule_body(beta, garment)
    frames = [load_frame(args.data, f, entry["id"]) for f in entry["frames"]]

    fitted_beta = beta
    if args.run_fit:
        problem = fitmod.make_problem(beta, [f.pose for f in frames],
                                      [f.camera for f in frames], seed=args.seed,
                                      noise_beta=args.noise_beta,
                                      noise_theta=args.noise_theta)
        result = fitmod.fit_joint(problem)
        fitted_beta = ShapeParams.from_array(np.clip(result.beta, 0.5, 2.0))
        frames = [type(f)(f.subject_id, f.frame_id, f.camera,
                          _pose_from_vector(result.thetas[i]), f.image)
                  for i, f in enumerate(frames)]

    if args.oracle:
        request = recon.ReconstructionRequest(frames=frames, beta=fitted_beta,
                                              resolution=args.res,
                                              oracle_body=gt_body)
    else:
        params, net_config = load_params(args.ckpt)
        request = recon.ReconstructionRequest(frames=frames, beta=fitted_beta,
                                              resolution=args.res,
                                              params=params, config=net_config)
    mesh, report = recon.reconstruct(request, out_obj=args.out, gt_body=gt_body)
    if args.skinning and not mesh.is_empty and not args.oracle:
        recon.export_skinning(mesh, request, args.skinning)
        report["skinning_path"] = args.skinning
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _pose_from_vector(vec):
    from .body import PoseParams
    import numpy as np
    rot = np.asarray(vec[:27]).reshape(9, 3)
    mags = np.linalg.norm(rot, axis=1, keepdims=True)
    scale = np.minimum(1.0, np.pi / np.maximum(mags, 1e-12))
    return PoseParams(rot * scale, vec[27:])


def cmd_ablate(args):
    from pathlib import Path

    from . import training
    from .synth import load_manifest

    cfg = _load_config(args.config)
    manifest = load_manifest(Path(args.data) / "manifest.json")
    rows = training.run_ablation(manifest, args.data, cfg, log=_log)
    text = json.dumps(rows, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "ablate": cmd_ablate,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _log(f"io error: {exc}")
        return EXIT_IO
    except Exception as exc:
        from .training import NumericalError
        if isinstance(exc, NumericalError):
            _log(f"numerical failure: {exc}")
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
