"""Command-line drivers: synth, fit, distill, reconstruct, render, edit, eval.

Every command is a pure function of its input files, config and ``--seed``.
Invalid configuration exits with status 2, runtime failures with status 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .basis import QUANTILES, coefficient_statistics, edit_coefficient, fit_pca, project, reconstruct_linear
from .blendshape import PoseParams, reconstruct
from .fitting import FitConfig, compute_iou, fit
from .geometry import Region, TriMesh, chamfer3d
from .io import ConfigError
from .losses import LossWeights
from .raster import Camera, RasterConfig, rasterize_soft
from .synth import synth_head

logger = logging.getLogger("headfit")


# -- config handling --------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = io.read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("--config", str(exc)) from None
    if not isinstance(data, dict):
        raise ConfigError("--config", "top level must be a JSON object")
    return data


def _check_keys(data: dict, allowed, prefix: str = "") -> None:
    for key in sorted(data):
        if key not in allowed:
            raise ConfigError(prefix + key, "unknown key")


def _number(data: dict, key: str, default, kind=float, prefix: str = ""):
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(prefix + key, f"expected a number, got {value!r}")
    if kind is int and value != int(value):
        raise ConfigError(prefix + key, f"expected an integer, got {value!r}")
    return kind(value)


def _build(factory, key: str, **kwargs):
    """Run a validating constructor, reporting failures against ``key``."""
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from None


def _raster_config(data) -> RasterConfig:
    if data is None:
        return RasterConfig()
    if not isinstance(data, dict):
        raise ConfigError("raster", "expected an object")
    _check_keys(data, {"sigma", "eps"}, "raster.")
    sigma = _number(data, "sigma", 1e-4, prefix="raster.")
    eps = _number(data, "eps", 1e-7, prefix="raster.")
    _build(RasterConfig, "raster.sigma", sigma=sigma)
    _build(RasterConfig, "raster.eps", eps=eps)
    return RasterConfig(sigma, eps)


def _loss_weights(data) -> LossWeights:
    if data is None:
        return LossWeights()
    if not isinstance(data, dict):
        raise ConfigError("weights", "expected an object")
    names = set(LossWeights().as_dict())
    _check_keys(data, names | {"occupancy_reduction"}, "weights.")
    kwargs = {}
    for key in sorted(names & set(data)):
        kwargs[key] = _number(data, key, 0.0, prefix="weights.")
        if not (kwargs[key] >= 0 and np.isfinite(kwargs[key])):
            raise ConfigError("weights." + key, "must be a finite nonnegative number")
    if "occupancy_reduction" in data:
        kwargs["occupancy_reduction"] = data["occupancy_reduction"]
    return _build(LossWeights, "weights", **kwargs)


def _image_size(data: dict, default=128):
    size = data.get("image_size", default)
    if isinstance(size, list):
        if len(size) != 2:
            raise ConfigError("image_size", "expected one or two integers")
        return tuple(_number({"v": s}, "v", 0, int, "image_size") for s in size)
    size = _number(data, "image_size", default, int)
    if size < 1:
        raise ConfigError("image_size", "must be positive")
    return size


def _fit_config(data: dict, seed: int) -> FitConfig:
    allowed = {"iterations", "lr", "shape_lr", "lr_decay", "beta1", "beta2", "optimize_shape", "weights", "raster"}
    _check_keys(data, allowed)
    kwargs = {}
    if "iterations" in data:
        kwargs["iterations"] = _number(data, "iterations", 500, int)
    for key in ("lr", "shape_lr", "lr_decay", "beta1", "beta2"):
        if key in data:
            kwargs[key] = _number(data, key, 0.0)
    if "optimize_shape" in data:
        if not isinstance(data["optimize_shape"], bool):
            raise ConfigError("optimize_shape", "expected true or false")
        kwargs["optimize_shape"] = data["optimize_shape"]
    for key in kwargs:
        try:
            FitConfig(**{key: kwargs[key]})
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
    return FitConfig(weights=_loss_weights(data.get("weights")), raster=_raster_config(data.get("raster")),
                     seed=seed, **kwargs)


def _config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def _report(args, config: dict, metrics: dict) -> dict:
    return {"metrics": metrics, "meta": {"command": args.command, "seed": args.seed,
                                         "config_hash": _config_hash(config)}}


def _read_input(reader, path, *extra):
    try:
        return reader(path, *extra)
    except FileNotFoundError:
        raise RuntimeError(f"missing input file {path}") from None


# -- commands ---------------------------------------------------------------

def cmd_synth(args, config: dict) -> None:
    _check_keys(config, {"image_size", "raster", "subdivisions", "rms_fraction"})
    raster = _raster_config(config.get("raster"))
    size = _image_size(config)
    subdiv = _number(config, "subdivisions", 3, int)
    if not 0 <= subdiv <= 6:
        raise ConfigError("subdivisions", "must lie in [0, 6]")
    rms = _number(config, "rms_fraction", 0.05)
    if not rms >= 0:
        raise ConfigError("rms_fraction", "must be nonnegative")

    head = synth_head(args.seed, size, raster, subdiv, rms)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_model(out / "model", head.model, head.mesh)
    io.write_json(out / "params.json", head.params.to_dict())
    io.write_json(out / "camera.json", head.camera.to_dict())
    io.write_silhouette(out / "mask_full.pgm", head.target_full)
    io.write_silhouette(out / "mask_hair.pgm", head.target_hair)
    io.write_field(out / "gt_field.bin", head.gt_displacements)
    io.write_obj(out / "gt_mesh.obj", head.mesh, head.gt_vertices)
    io.write_json(out / "manifest.json", {
        "seed": args.seed, "image_size": size, "raster": {"sigma": raster.sigma, "eps": raster.eps},
        "n_vertices": head.mesh.n_vertices, "n_triangles": head.mesh.n_triangles,
        "region_counts": {r.key: int(head.mesh.regions.mask(r).sum()) for r in Region},
        "partition_rules": {
            "neck": "y < -0.55", "ears": "|x| > 0.8 and -0.3 < y < 0.15",
            "face": "z > 0.25 and -0.55 <= y <= 0.35, not ears", "hair": "all other vertices",
            "frame": "unit sphere before scaling by head axes [0.9, 1.1, 1.0]",
        },
    })


def cmd_fit(args, config: dict) -> None:
    cfg = _fit_config(config, args.seed)
    model = _read_input(io.load_model, args.model)
    mesh = _read_input(io.load_template, args.model)
    params = PoseParams.from_dict(_read_input(io.read_json, args.params))
    camera = Camera.from_dict(_read_input(io.read_json, args.camera))
    full = _read_input(io.read_silhouette, args.mask_full)
    hair = _read_input(io.read_silhouette, args.mask_hair)
    cfg = replace(cfg, image_size=full.shape)
    result = fit(model, mesh, params, full, hair, camera, cfg)
    io.write_field(args.out, result.field.displacements)
    if args.log:
        io.write_trace(args.log, result.trace)
    if args.report:
        verts = result.vertices
        o_full = rasterize_soft(mesh, verts, camera, cfg.raster, full.shape)
        o_hair = rasterize_soft(mesh, verts, camera, cfg.raster, full.shape,
                                mesh.triangles_within(Region.HAIR, Region.FACE, Region.EARS))
        io.write_json(args.report, _report(args, config, {
            "iou_full": compute_iou(o_full, full), "iou_hair": compute_iou(o_hair, hair),
            "loss_initial": result.trace[0].total, "loss_final": result.trace[-1].total,
            "terms_final": result.trace[-1].terms,
        }))


def cmd_distill(args, config: dict) -> None:
    _check_keys(config, {"center"})
    center = config.get("center", True)
    if not isinstance(center, bool):
        raise ConfigError("center", "expected true or false")
    files = sorted(Path(args.fields).glob("*.bin"))
    if not files:
        raise RuntimeError(f"no .bin offset fields in {args.fields}")
    fields = [io.read_field(f) for f in files]
    if len({f.shape for f in fields}) != 1:
        raise RuntimeError("offset fields disagree in vertex count")
    regions = _read_input(io.read_obj, args.template).regions
    if regions is None:
        raise RuntimeError(f"{args.template} has no region sidecar")
    data = np.stack([f.reshape(-1) for f in fields], axis=1)
    basis = fit_pca(data, regions, args.k_hair, args.k_neck, center)
    io.save_basis(args.out, basis)
    eta = project(basis, data)
    recon = basis.mean[:, None] + basis.components @ eta
    rms = np.sqrt((data**2).mean(axis=0))
    err = np.sqrt(((recon - data) ** 2).mean(axis=0))
    stats = coefficient_statistics(eta.T)
    io.write_json(Path(args.out) / "coefficients.json", {
        "fields": [f.name for f in files], "coefficients": eta.T.tolist(),
        "statistics": {k: v.tolist() for k, v in stats.items()},
    })
    io.write_json(Path(args.out) / "report.json", _report(args, config, {
        "captured_variance": basis.captured_variance(),
        "total_variance": float(((data - basis.mean[:, None]) ** 2).sum()),
        "relative_error": (err / np.where(rms > 0, rms, 1.0)).tolist(),
    }))


def _load_coefficients(path, basis) -> np.ndarray:
    data = _read_input(io.read_json, path)
    if isinstance(data, dict):
        if "coefficients" not in data:
            raise ConfigError("coefficients", "missing from coefficient file")
        data = data["coefficients"]
    eta = np.asarray(data, dtype=np.float64)
    if eta.ndim != 1 or eta.size != basis.n_components:
        raise ConfigError("coefficients", f"expected a list of {basis.n_components} numbers")
    return eta


def cmd_reconstruct(args, config: dict) -> None:
    _check_keys(config, set())
    model = _read_input(io.load_model, args.model)
    mesh = _read_input(io.load_template, args.model)
    params = PoseParams.from_dict(_read_input(io.read_json, args.params))
    verts = reconstruct(model, params)
    if args.field is not None:
        verts = verts + _read_input(io.read_field, args.field)
    elif args.basis is not None:
        if args.coeffs is None:
            raise ConfigError("--coeffs", "required together with --basis")
        basis = _read_input(io.load_basis, args.basis)
        verts = verts + reconstruct_linear(basis, _load_coefficients(args.coeffs, basis))
    if verts.shape != mesh.vertices.shape:
        raise RuntimeError("offset field does not match the model vertex count")
    io.write_obj(args.out, mesh, verts)


def cmd_render(args, config: dict) -> None:
    _check_keys(config, {"image_size", "raster"})
    size = _image_size(config, args.size)
    raster = _raster_config(config.get("raster"))
    mesh = _read_input(io.read_obj, args.mesh)
    camera = Camera.from_dict(_read_input(io.read_json, args.camera)) if args.camera else Camera()
    triangles = None
    if args.hair:
        if mesh.regions is None:
            raise RuntimeError("--hair needs a region sidecar next to the mesh")
        triangles = mesh.triangles_within(Region.HAIR, Region.FACE, Region.EARS)
    io.write_silhouette(args.out, rasterize_soft(mesh, mesh.vertices, camera, raster, size, triangles))


def cmd_edit(args, config: dict) -> None:
    _check_keys(config, set())
    basis = _read_input(io.load_basis, args.basis)
    eta = _load_coefficients(args.coeffs, basis)
    for item in args.set:
        key, sep, raw = item.partition("=")
        try:
            k = int(key)
        except ValueError:
            raise ConfigError("--set", f"bad component index in {item!r}") from None
        if not sep or not 0 <= k < basis.n_components:
            raise ConfigError("--set", f"expected k=VALUE with 0 <= k < {basis.n_components}, got {item!r}")
        if raw in QUANTILES:
            if args.stats is None:
                raise ConfigError("--stats", f"needed to resolve order statistic {raw!r}")
            stats = _read_input(io.read_json, args.stats)
            stats = stats.get("statistics", stats)
            value = stats[raw][k]
        else:
            try:
                value = float(raw)
            except ValueError:
                raise ConfigError("--set", f"bad value in {item!r}") from None
        eta, _ = edit_coefficient(basis, eta, k, value)
    io.write_field(args.out, reconstruct_linear(basis, eta))
    if args.coeffs_out:
        io.write_json(args.coeffs_out, {"coefficients": eta.tolist()})


def cmd_eval(args, config: dict) -> None:
    _check_keys(config, {"image_size", "raster"})
    raster = _raster_config(config.get("raster"))
    mesh = _read_input(io.read_obj, args.mesh)
    metrics = {}
    if args.reference:
        ref = _read_input(io.read_obj, args.reference)
        metrics["chamfer3d"] = chamfer3d(mesh.vertices, ref.vertices)
    if args.mask_full or args.mask_hair:
        if not args.camera:
            raise ConfigError("--camera", "required for IoU evaluation")
        camera = Camera.from_dict(_read_input(io.read_json, args.camera))
        for name, path, hair in (("iou_full", args.mask_full, False), ("iou_hair", args.mask_hair, True)):
            if not path:
                continue
            target = _read_input(io.read_silhouette, path)
            tris = mesh.triangles_within(Region.HAIR, Region.FACE, Region.EARS) if hair else None
            metrics[name] = compute_iou(rasterize_soft(mesh, mesh.vertices, camera, raster, target.shape, tris),
                                        target)
    if args.trace:
        trace = _read_input(io.read_trace, args.trace)
        if trace:
            metrics["loss_initial"] = trace[0]["total"]
            metrics["loss_final"] = trace[-1]["total"]
    text = io.dumps(_report(args, config, metrics))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="run seed (all randomness derives from it)")
    shared.add_argument("--config", help="JSON config file")
    shared.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="headfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic head fixture")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", parents=[shared], help="fit offsets to target silhouettes")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--mask-full", required=True)
    p.add_argument("--mask-hair", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True, help="output field.bin")
    p.add_argument("--log", help="JSON-lines trace")
    p.add_argument("--report", help="JSON report with final IoU and losses")

    p = sub.add_parser("distill", parents=[shared], help="fit a PCA basis to offset fields")
    p.add_argument("--fields", required=True, help="directory of field .bin files")
    p.add_argument("--template", required=True, help="OBJ with region sidecar")
    p.add_argument("--k-hair", type=int, default=50)
    p.add_argument("--k-neck", type=int, default=10)
    p.add_argument("--out", required=True, help="output basis directory")

    p = sub.add_parser("reconstruct", parents=[shared], help="model mesh plus optional offsets as OBJ")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--field")
    p.add_argument("--basis")
    p.add_argument("--coeffs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", parents=[shared], help="soft silhouette of an OBJ mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--camera")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--hair", action="store_true", help="render hair, face and ear triangles only")
    p.add_argument("--out", required=True, help=".pgm or .png")

    p = sub.add_parser("edit", parents=[shared], help="set basis coefficients and write the field")
    p.add_argument("--basis", required=True)
    p.add_argument("--coeffs", required=True)
    p.add_argument("--set", action="append", required=True, metavar="k=VALUE",
                   help="VALUE is a number or one of " + ", ".join(QUANTILES))
    p.add_argument("--stats", help="coefficients.json from distill, for order-statistic values")
    p.add_argument("--coeffs-out")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[shared], help="Chamfer and IoU report")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference")
    p.add_argument("--camera")
    p.add_argument("--mask-full")
    p.add_argument("--mask-hair")
    p.add_argument("--trace")
    p.add_argument("--out", help="report path (stdout if omitted)")
    return parser


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "distill": cmd_distill, "reconstruct": cmd_reconstruct,
            "render": cmd_render, "edit": cmd_edit, "eval": cmd_eval}


def _set_threads(n: int) -> None:
    if n < 0:
        raise ConfigError("--threads", "must be nonnegative")
    if n:
        import numba
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        _set_threads(args.threads)
        COMMANDS[args.command](args, _load_config(args.config))
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure of the underlying operation
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
