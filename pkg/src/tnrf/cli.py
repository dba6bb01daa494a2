"""Command-line entry point: ``tnrf <command> [flags]``.

Exit status is 0 on success, 1 for invalid input (bad flags, paths or
values) and 2 for failures while running.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from . import correspondence as corr
from . import evaluation
from .dataset import (
    SyntheticFamilySpec,
    View,
    encode_srgb8,
    generate_synthetic_family,
    load_dataset,
    load_oracle,
    toy_chair_spec,
    write_synthetic_family,
)
from .exceptions import BackgroundPixelError, DomainError, LoadError, ValidationError
from .render import render_view, write_render
from .trainer import TrainConfig, init_training, load_config, save_config, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
INPUT_ERRORS = (ValidationError, LoadError, DomainError, BackgroundPixelError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _existing_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"no such file: {p}")
    return p


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"no such directory: {p}")
    return p


def _instance_list(text: str, n: int) -> List[int]:
    if text == "all":
        return list(range(n))
    try:
        out = [int(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"bad instance list {text!r}") from None
    for v in out:
        if not 0 <= v < n:
            raise ValidationError(f"instance {v} out of range [0, {n})")
    return out


# -- cameras stored next to a checkpoint --------------------------------------------------


def _camera_json(view: View) -> dict:
    return {
        "extrinsic": [float(a) for a in view.extrinsic.ravel()],
        "intrinsic": [float(a) for a in view.intrinsic.ravel()],
        "near": view.near,
        "far": view.far,
        "height": view.height,
        "width": view.width,
    }


def _camera_from_json(c: dict) -> View:
    return View(
        np.zeros((c["height"], c["width"], 3)),
        np.array(c["extrinsic"]).reshape(3, 4),
        np.array(c["intrinsic"]).reshape(3, 3),
        c["near"],
        c["far"],
    )


def _cameras(args, ckpt_path: Path) -> List[List[View]]:
    if getattr(args, "data", None):
        return [o.views for o in load_dataset(_existing_dir(args.data))]
    path = ckpt_path.parent / "cameras.json"
    if not path.is_file():
        raise ValidationError(f"no cameras: pass --data or keep {path} next to the checkpoint")
    with open(path) as f:
        return [[_camera_from_json(c) for c in obj] for obj in json.load(f)]


def _load_state(args):
    path = _existing_file(args.ckpt)
    return path, ckpt.load_checkpoint(path)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_object(state, index: int) -> int:
    if not 0 <= index < state.num_objects:
        raise ValidationError(f"object {index} out of range [0, {state.num_objects})")
    return index


# -- commands -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec:
        with open(_existing_file(args.spec)) as f:
            spec = SyntheticFamilySpec.from_dict(json.load(f))
    else:
        spec = toy_chair_spec()
    if args.seed is not None:
        spec.seed = args.seed
    for name in ("instances", "views", "image_size"):
        val = getattr(args, name)
        if val is not None:
            setattr(spec, {"instances": "instance_count", "views": "views_per_instance"}.get(name, name), val)
    objects, oracle = generate_synthetic_family(spec)
    root = write_synthetic_family(objects, oracle, _out(args))
    with open(root / "family_spec.json", "w") as f:
        json.dump(spec.to_dict(), f, indent=1)
    print(f"wrote {len(objects)} objects to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _existing_dir(args.data)
    config = load_config(_existing_file(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        config.max_steps = args.steps
    dataset = load_dataset(data)
    out = _out(args)
    ckpt_path = out / "ckpt"
    if args.resume and ckpt_path.is_file():
        state = ckpt.load_checkpoint(ckpt_path)
        state.config.max_steps = config.max_steps
    else:
        if config.batch_objects > len(dataset):
            raise ValidationError(
                f"batch_objects={config.batch_objects} exceeds {len(dataset)} objects"
            )
        state = init_training(config, dataset)
    save_config(state.config, out / "config.toml")
    with open(out / "cameras.json", "w") as f:
        json.dump([[_camera_json(v) for v in o.views] for o in dataset], f)

    def every(st, m):
        if args.checkpoint_every and st.step % args.checkpoint_every == 0:
            ckpt.save_checkpoint(st, ckpt_path)
        if args.log_every and st.step % args.log_every == 0:
            print(f"step {st.step} rec {m['rec']:.6f} total {m['total']:.6f}", flush=True)
        return False

    train(state, dataset, metrics_path=out / "metrics.csv", callback=every)
    ckpt.save_checkpoint(state, ckpt_path)
    print(f"trained to step {state.step}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    path, state = _load_state(args)
    obj = _check_object(state, args.object)
    views = _cameras(args, path)[obj]
    if not 0 <= args.view < len(views):
        raise ValidationError(f"view {args.view} out of range [0, {len(views)})")
    camera = views[args.view]
    res = (args.resolution, args.resolution) if args.resolution else None
    samples = args.samples or state.config.samples_per_ray
    image, depth, opacity = render_view(state.model, state.latents(obj), camera, res, samples,
                                        state.config.background)
    prefix = _out(args) / f"obj{obj:03d}_view{args.view:03d}"
    for p in write_render(prefix, image, depth, opacity, (camera.near, camera.far)):
        print(p)
    return EXIT_OK


def cmd_extract(args) -> int:
    _, state = _load_state(args)
    obj = _check_object(state, args.object)
    z = state.latents(obj).shape_code
    mesh = corr.extract_mesh(state.model, z, args.grid, args.level)
    if not mesh.is_empty:
        mesh.colors = corr.template_coordinate_colors(corr.to_template(state.model, mesh.vertices, z))
    path = _out(args) / f"mesh_obj{obj:03d}.ply"
    corr.write_ply(path, mesh)
    print(f"{path}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return EXIT_OK


def _query_points(args, state, source: int, rng) -> np.ndarray:
    if args.points:
        pts = np.loadtxt(_existing_file(args.points), delimiter=",", ndmin=2)
        if pts.shape[1] != 3:
            raise ValidationError("points file needs 3 columns")
        return pts
    mesh = corr.extract_mesh(state.model, state.latents(source).shape_code, args.grid, args.level)
    if mesh.is_empty:
        raise ValidationError(f"instance {source} has an empty surface")
    if args.queries and args.queries < len(mesh.vertices):
        pick = np.sort(rng.choice(len(mesh.vertices), args.queries, replace=False))
        return mesh.vertices[pick]
    return mesh.vertices


def cmd_correspond(args) -> int:
    _, state = _load_state(args)
    i, j = _check_object(state, args.source), _check_object(state, args.target)
    rng = np.random.default_rng(args.seed or 0)
    q = _query_points(args, state, i, rng)
    cmap = corr.correspond(state.model, state.latents(i), state.latents(j), q, args.grid, args.level,
                           source_instance=i, target_instance=j)
    path = _out(args) / f"correspond_{i:03d}_{j:03d}.csv"
    corr.write_correspondence_csv(path, cmap)
    print(f"{path}: {len(q)} correspondences, mean template distance {cmap.distances_in_template.mean():.6g}")
    return EXIT_OK


def cmd_transfer_keypoints(args) -> int:
    path, state = _load_state(args)
    src, annotations = corr.read_keypoints(_existing_file(args.keypoints))
    _check_object(state, src)
    targets = _instance_list(args.targets, state.num_objects)
    cams = _cameras(args, path)
    result = corr.transfer_keypoints(
        state.model, state.latents, annotations, targets, source_views=cams[src],
        target_views={t: cams[t] for t in targets}, grid_resolution=args.grid, level=args.level,
        n_samples=state.config.samples_per_ray,
    )
    out = _out(args) / "keypoints_transfer.json"
    with open(out, "w") as f:
        json.dump(result, f, indent=1)
    print(out)
    return EXIT_OK


def cmd_transfer_texture(args) -> int:
    path, state = _load_state(args)
    i, j = _check_object(state, args.source), _check_object(state, args.target)
    views = []
    if args.views:
        cams = _cameras(args, path)[j]
        for v in _instance_list(args.views, len(cams)):
            views.append((v, cams[v]))
    mesh, images = corr.transfer_texture(
        state.model, state.latents(i), state.latents(j), args.grid, args.level,
        [c for _, c in views], state.config.samples_per_ray, state.config.background,
    )
    out = _out(args)
    ply = out / f"texture_{i:03d}_to_{j:03d}.ply"
    corr.write_ply(ply, mesh)
    print(ply)
    for (v, _), img in zip(views, images):
        p = out / f"texture_{i:03d}_to_{j:03d}_view{v:03d}.png"
        Image.fromarray(encode_srgb8(img)).save(p)
        print(p)
    return EXIT_OK


def cmd_eval_corr(args) -> int:
    _, state = _load_state(args)
    data = _existing_dir(args.data)
    gt = data / "gt_family.json"
    if not gt.is_file():
        raise ValidationError(f"{gt} not found; eval-corr needs a synthetic dataset")
    oracle = load_oracle(gt)
    if len(oracle) != state.num_objects:
        raise ValidationError(
            f"checkpoint has {state.num_objects} objects, ground truth has {len(oracle)}"
        )
    pairs = evaluation.parse_pairs(args.pairs, state.num_objects)
    scores = evaluation.evaluate_pairs(state.model, state.latents, oracle, pairs, args.queries,
                                       args.seed or 0, args.grid, args.level)
    path = _out(args) / "eval_corr.csv"
    evaluation.write_scores(path, scores)
    summary = evaluation.summarize(scores)
    print(f"{path}: mean error {summary['mean_error']:.4f} of bbox diagonal "
          f"(baseline {summary['baseline_mean_error']:.4f})")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="TrainConfig TOML file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (falls back to TNRF_THREADS)")

    mesh_flags = _Parser(add_help=False)
    mesh_flags.add_argument("--grid", type=int, default=corr.DEFAULT_GRID)
    mesh_flags.add_argument("--level", type=float, default=corr.DEFAULT_LEVEL)

    parser = _Parser(prog="tnrf", description="Template-conditioned radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic box family")
    p.add_argument("--spec", default=None, help="family spec JSON (default: toy chair)")
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render color/depth/opacity PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--object", type=int, required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract", parents=[common, mesh_flags], help="marching-cubes mesh as PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--object", type=int, required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("correspond", parents=[common, mesh_flags], help="dense correspondence CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--points", default=None, help="CSV of x,y,z query points on the source")
    p.add_argument("--queries", type=int, default=0, help="subsample source mesh vertices")
    p.set_defaults(func=cmd_correspond)

    p = sub.add_parser("transfer-keypoints", parents=[common, mesh_flags], help="keypoint transfer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--targets", default="all")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_transfer_keypoints)

    p = sub.add_parser("transfer-texture", parents=[common, mesh_flags], help="texture transfer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--views", default=None, help="target views to render, e.g. 0,3 or all")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_transfer_texture)

    p = sub.add_parser("eval-corr", parents=[common, mesh_flags], help="score against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", default="all")
    p.add_argument("--queries", type=int, default=500)
    p.set_defaults(func=cmd_eval_corr)
    return parser


def _set_threads(n: Optional[int]):
    if n is None:
        env = os.environ.get("TNRF_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ValidationError(f"TNRF_THREADS={env!r} is not an integer") from None
    if n is not None:
        if n < 1:
            raise ValidationError("--threads must be at least 1")
        torch.set_num_threads(n)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_INVALID
    try:
        _set_threads(args.threads)
        return args.func(args)
    except INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - top-level boundary
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
