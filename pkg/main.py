#!/usr/bin/env python3
"""
Polarimetric Height - Main Runner

Command-line front end for the photo-polarimetric height toolkit: renders
synthetic scenes, decomposes polariser stacks, estimates lights, solves for
height and albedo, and runs the evaluation grid.

Scene directories hold scene.cfg, stack.phmap and (for synthetic scenes) the
ground-truth maps; later steps add iun/rho/phi.phmap, height.phmap, albedo
and a stats.jsonl log.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Ensure scripts module is importable
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np

from scripts.config import ALBEDO, DEFAULT_ETA, LOG_FORMAT, LOG_LEVEL, METHODS, PROTOCOL, RESULTS_DIR, SOLVER
from scripts.constraints import assemble, dump_constraint_csv, label_specular
from scripts.errors import PolHeightError, ValidationError
from scripts.export import (
    append_stats,
    export_albedo,
    export_height,
    get_export_summary,
    summarise_table,
    write_metrics_csv,
)
from scripts.evaluate import compute_metrics, estimate_scene_lights, reconstruct, run_table2
from scripts.albedo import estimate_albedo
from scripts.lightest import SphericalLight
from scripts.maps import parse_scalar, parse_vector, read_float_map, read_key_value, write_key_value
from scripts.optics import as_light, normals_from_gradients
from scripts.poldecomp import decompose_stack, load_polarisation, save_polarisation
from scripts.solver import build_gradient_operator
from scripts.synth import load_scene, load_scene_config, render_stack, save_scene, scene_config_from_entries


def setup_logging(verbose: bool = False):
    """Configure logging for the application."""
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL, logging.INFO)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )
    return logging.getLogger(__name__)


# === Scene helpers ===

def _scene_eta(scene_dir: Path, override: Optional[float]) -> float:
    if override is not None:
        return override
    entries = read_key_value(scene_dir / "scene.cfg")
    return parse_scalar(entries.get("eta", DEFAULT_ETA), float, "eta")


def _scene_lights(scene_dir: Path, args) -> List[np.ndarray]:
    entries = read_key_value(scene_dir / "scene.cfg")
    lights = []
    for name in "st":
        flag = getattr(args, f"light_{name}", None)
        text = flag if flag is not None else entries.get(f"light_{name}")
        if text is not None:
            lights.append(as_light(parse_vector(text)))
    if not lights:
        raise ValidationError(f"No light directions in {scene_dir / 'scene.cfg'} and none given")
    return lights


def _polarisation(scene_dir: Path, logger):
    """Decomposed scene, decomposing first if the maps are missing."""
    if not (scene_dir / "rho.phmap").exists():
        logger.info("No polarisation maps found, decomposing stack...")
        scene = load_scene(scene_dir)
        n_l, n_c, n_p, h, w = scene["images"].shape
        pol = decompose_stack(scene["images"].reshape(n_l * n_c, n_p, h, w), scene["angles"])
        save_polarisation(pol, scene_dir)
        return pol
    return load_polarisation(scene_dir)


def _ground_truth_normals(scene_dir: Path) -> Optional[np.ndarray]:
    path = scene_dir / "gradient_gt.phmap"
    if not path.exists():
        return None
    gradient = read_float_map(path)
    return normals_from_gradients(gradient[..., 0], gradient[..., 1])


# === Subcommands ===

def cmd_synth(args, logger) -> int:
    overrides = {
        "size": args.size,
        "surface": args.surface,
        "albedo": args.albedo,
        "channels": args.channels,
        "noise_sigma": args.sigma,
        "seed": args.seed,
        "bit_depth": args.bit_depth,
        "eta": args.eta,
        "light_s": args.light_s,
        "light_t": args.light_t,
    }
    entries: Dict[str, str] = {k: str(v) for k, v in overrides.items() if v is not None}
    if args.invert:
        entries["invert"] = "true"

    if args.config:
        cfg = load_scene_config(args.config, entries)
    else:
        cfg = scene_config_from_entries(entries)
    stack = render_stack(cfg)
    files = save_scene(stack, args.out, previews=args.previews)
    for name, path in files.items():
        logger.info(f"  ✓ {name}: {path}")
    return 0


def cmd_decompose(args, logger) -> int:
    scene_dir = Path(args.scene)
    scene = load_scene(scene_dir)
    n_l, n_c, n_p, h, w = scene["images"].shape
    pol = decompose_stack(scene["images"].reshape(n_l * n_c, n_p, h, w), scene["angles"], mode=args.mode)
    files = save_polarisation(pol, scene_dir)
    append_stats(scene_dir / "stats.jsonl", {"step": "decompose", **pol.stats})
    logger.info(f"✓ Decomposed {n_l * n_c} channel(s), {int(pol.mask.sum())} pixels in domain")
    for name, path in files.items():
        logger.info(f"  ✓ {name}: {path}")
    return 0


def cmd_estimate_light(args, logger) -> int:
    scene_dir = Path(args.scene)
    pol = _polarisation(scene_dir, logger)
    eta = _scene_eta(scene_dir, args.eta)
    found = estimate_scene_lights(pol, eta, build_gradient_operator(pol.mask), seed=args.seed)
    estimate = found["estimate"]
    s, t = found["lights"]

    report = {
        "light_s": SphericalLight.from_vector(s).as_dict(),
        "light_t": SphericalLight.from_vector(t).as_dict(),
        "objective": estimate.objective,
        "scores": found["resolution"]["scores"],
    }
    print(json.dumps(report))
    write_key_value(scene_dir / "lights_estimated.cfg", {"light_s": s, "light_t": t})
    append_stats(scene_dir / "stats.jsonl", {"step": "estimate-light", **report, **estimate.stats})
    logger.info(f"✓ s = {np.round(s, 4).tolist()}, t = {np.round(t, 4).tolist()}")
    return 0


def cmd_reconstruct(args, logger) -> int:
    scene_dir = Path(args.scene)
    out_dir = Path(args.out) if args.out else scene_dir
    pol = _polarisation(scene_dir, logger)
    eta = _scene_eta(scene_dir, args.eta)
    G = build_gradient_operator(pol.mask, args.stencil)

    if args.lights == "estimated":
        lights = estimate_scene_lights(pol, eta, G, seed=args.seed)["lights"]
    else:
        lights = _scene_lights(scene_dir, args)

    albedo = None
    if args.albedo == "known":
        path = scene_dir / "albedo_gt.phmap"
        if not path.exists():
            raise ValidationError(f"--albedo known needs {path}")
        grid = read_float_map(path)
        albedo = grid[None] if grid.ndim == 2 else grid.transpose(2, 0, 1)

    spec = label_specular(pol.i_un, pol.mask, args.specular_percentile) if args.specular_percentile else None

    if args.dump_constraints and args.variant != "prop13":
        field_ = assemble(args.variant, pol, lights=lights, albedo=albedo, spec=spec, eta=eta)
        dump_constraint_csv(field_, out_dir / f"constraints_{args.variant}.csv")

    solution = reconstruct(args.variant, pol, lights, eta, albedo=albedo, spec=spec, G=G, lam=args.lam)
    export_height(solution.z, out_dir, preview=not args.no_preview)

    record = {"step": "reconstruct", **solution.stats}
    if (scene_dir / "height_gt.phmap").exists():
        metrics = compute_metrics(solution.z, read_float_map(scene_dir / "height_gt.phmap"),
                                  _ground_truth_normals(scene_dir), mask=pol.mask, G=G)
        record.update(metrics)
        print(json.dumps({"variant": args.variant, **metrics}))
        logger.info(f"✓ height RMS {metrics['height_rms']:.4f} px, normal MAE {metrics['normal_mae']:.3f} deg")
    append_stats(out_dir / "stats.jsonl", record)
    summary = get_export_summary(out_dir)
    logger.info(f"✓ {len(summary['files'])} file(s) in {summary['directory']}")
    return 0


def cmd_albedo(args, logger) -> int:
    scene_dir = Path(args.scene)
    out_dir = Path(args.out) if args.out else scene_dir
    pol = _polarisation(scene_dir, logger)
    z = read_float_map(Path(args.height) if args.height else scene_dir / "height.phmap")
    lights = _scene_lights(scene_dir, args)
    spec = label_specular(pol.i_un, pol.mask, args.specular_percentile) if args.specular_percentile else None

    albedo, stats = estimate_albedo(z, pol, lights, spec=spec, lam=args.lam)
    export_albedo(albedo, out_dir, preview=not args.no_preview)
    append_stats(out_dir / "stats.jsonl", {"step": "albedo", **stats})
    logger.info(f"✓ Albedo range [{stats['min']:.3f}, {stats['max']:.3f}]")
    return 0


def cmd_eval(args, logger) -> int:
    scene_dir = Path(args.scene)
    z = read_float_map(Path(args.height) if args.height else scene_dir / "height.phmap")
    z_gt = read_float_map(scene_dir / "height_gt.phmap")
    mask = np.ones(z_gt.shape, dtype=bool)
    if (scene_dir / "iun.phmap").exists():
        mask = load_polarisation(scene_dir).mask
    metrics = compute_metrics(z, z_gt, _ground_truth_normals(scene_dir), mask=mask,
                              G=build_gradient_operator(mask, args.stencil))
    print(json.dumps(metrics))
    logger.info(f"✓ height RMS {metrics['height_rms']:.4f} px, normal MAE {metrics['normal_mae']:.3f} deg")
    return 0


def cmd_table2(args, logger) -> int:
    sigmas = [float(v) for v in parse_vector(args.sigmas)] if args.sigmas else PROTOCOL["sigmas"]
    methods = args.methods.split(",") if args.methods else METHODS
    frame = run_table2(seed=args.seed, size=args.size, sigmas=sigmas, methods=methods, timing=args.timing)
    write_metrics_csv(frame, args.out)
    logger.info("\n" + summarise_table(frame).round(3).to_string())
    return 0


class CliParser(argparse.ArgumentParser):
    """Usage errors raise ValidationError so they exit 1 like other bad input."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _report_error(e: PolHeightError) -> int:
    print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": e.exit_code}),
          file=sys.stderr)
    return e.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        description='Polarimetric Height - surface height from photo-polarimetric images'
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Enable verbose/debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Render a synthetic scene')
    p.add_argument('--config', help='key = value scene file')
    p.add_argument('--out', required=True, help='Scene directory to write')
    p.add_argument('--size', type=int)
    p.add_argument('--surface', choices=['plane', 'gaussian-peak', 'from-file'])
    p.add_argument('--albedo', choices=['uniform', 'checkerboard'])
    p.add_argument('--channels', type=int)
    p.add_argument('--sigma', type=float, help='Noise std as a fraction of full scale')
    p.add_argument('--bit-depth', type=int, help='0 disables quantisation')
    p.add_argument('--eta', type=float)
    p.add_argument('--light-s', help='e.g. 1,0,5')
    p.add_argument('--light-t', help='e.g. -1,-2,7')
    p.add_argument('--seed', type=int)
    p.add_argument('--invert', action='store_true', help='Concave mirror of the surface')
    p.add_argument('--previews', action='store_true', help='Also write PNG previews')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('decompose', help='Polarisation image from the polariser stack')
    p.add_argument('scene')
    p.add_argument('--mode', choices=['single', 'multi'], default='multi')
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser('estimate-light', help='Estimate both light directions')
    p.add_argument('scene')
    p.add_argument('--eta', type=float)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_estimate_light)

    p = sub.add_parser('reconstruct', help='Solve for surface height')
    p.add_argument('scene')
    p.add_argument('--variant', choices=METHODS, default='prop1')
    p.add_argument('--eta', type=float)
    p.add_argument('--lights', choices=['known', 'estimated'], default='known')
    p.add_argument('--light-s', help='Override light s, e.g. 1,0,5')
    p.add_argument('--light-t', help='Override light t')
    p.add_argument('--albedo', choices=['known', 'unknown'], default='unknown')
    p.add_argument('--stencil', choices=['forward', 'central'], default=SOLVER['stencil'])
    p.add_argument('--specular-percentile', type=float, help='Label pixels above this percentile specular')
    p.add_argument('--lambda', dest='lam', type=float, default=ALBEDO['lambda'])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--dump-constraints', action='store_true')
    p.add_argument('--no-preview', action='store_true')
    p.add_argument('--out', help='Output directory (default: scene directory)')
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser('albedo', help='Recover albedo from a height map')
    p.add_argument('scene')
    p.add_argument('--height', help='Height map (default: <scene>/height.phmap)')
    p.add_argument('--light-s')
    p.add_argument('--light-t')
    p.add_argument('--specular-percentile', type=float)
    p.add_argument('--lambda', dest='lam', type=float, default=ALBEDO['lambda'])
    p.add_argument('--no-preview', action='store_true')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_albedo)

    p = sub.add_parser('eval', help='Compare a height map with the ground truth')
    p.add_argument('scene')
    p.add_argument('--height')
    p.add_argument('--stencil', choices=['forward', 'central'], default=SOLVER['stencil'])
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('table2', help='Run the full evaluation grid')
    p.add_argument('--seed', type=int, default=7)
    p.add_argument('--size', type=int, default=PROTOCOL['size'])
    p.add_argument('--sigmas', help='Comma separated, e.g. 0,0.005,0.02')
    p.add_argument('--methods', help='Comma separated subset of ' + ','.join(METHODS))
    p.add_argument('--timing', action='store_true', help='Record wall_ms (output no longer reproducible)')
    p.add_argument('--out', default=str(RESULTS_DIR / 'table2.csv'))
    p.set_defaults(handler=cmd_table2)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as e:
        parser.print_usage(sys.stderr)
        return _report_error(e)
    logger = setup_logging(args.verbose)

    try:
        return args.handler(args, logger)
    except PolHeightError as e:
        logger.error(f"✗ {args.command} failed: {e}")
        return _report_error(e)


if __name__ == "__main__":
    sys.exit(main())
