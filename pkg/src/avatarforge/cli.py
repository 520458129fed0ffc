"""Command line entry point: ``avatarforge {generate,finetune,turntable,export-mesh}``."""
import argparse
import logging
import sys
from pathlib import Path

from .exceptions import BackendError, CheckpointError, ContractError, ValidationError
from .mesh import export, marching_cubes
from .pipeline import load_config, load_field, make_base_backend, resume, run_finetune, run_generate, run_turntable

log = logging.getLogger("avatarforge")


def _config(args):
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg.validate()


def cmd_generate(args):
    cfg = _config(args)
    if args.resume:
        result = resume(args.resume, cfg)
    else:
        result = run_generate(cfg)
    print(result.checkpoint)


def cmd_finetune(args):
    cfg = _config(args)
    base = make_base_backend(cfg)
    if not base.health():
        raise BackendError("guidance backend is unavailable")
    out = Path(cfg.output_dir)
    run_finetune(cfg, base, out)
    print(out / "finetuned")


def cmd_turntable(args):
    params = load_field(args.ckpt)
    out = Path(args.output_dir or "turntable")
    paths = run_turntable(params, out, n_views=args.views, radius=args.radius,
                          resolution=args.resolution, elevation=args.elevation)
    print(f"wrote {len(paths)} views to {out}")


def cmd_export_mesh(args):
    params = load_field(args.ckpt)
    mesh = marching_cubes(params, args.grid)
    if not len(mesh.vertices):
        raise ValidationError("the field has no zero crossing inside the modeling cube")
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    print(export(mesh, out / f"avatar.{args.format}", args.format))


def build_parser():
    p = argparse.ArgumentParser(prog="avatarforge", description="Text- and image-guided 3D avatar generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="optimise an avatar field")
    g.add_argument("--config", required=True)
    g.add_argument("--resume", help="run checkpoint to continue from")
    g.add_argument("--output-dir")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("finetune", help="personalise face and body backends from an image set")
    f.add_argument("--config", required=True)
    f.add_argument("--output-dir")
    f.set_defaults(func=cmd_finetune)

    t = sub.add_parser("turntable", help="render colour views around the avatar")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--views", type=int, default=25)
    t.add_argument("--radius", type=float, default=2.5)
    t.add_argument("--elevation", type=float, default=0.0)
    t.add_argument("--resolution", type=int, default=128)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_turntable)

    m = sub.add_parser("export-mesh", help="extract and export the zero level set")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--grid", type=int, default=256)
    m.add_argument("--format", choices=("obj", "ply"), default="obj")
    m.add_argument("--output-dir")
    m.set_defaults(func=cmd_export_mesh)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ContractError, ValidationError, CheckpointError, BackendError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
