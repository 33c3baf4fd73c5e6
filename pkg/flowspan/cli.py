# Copyright (c) 2024 flowspan developers
"""
The `flowspan` command line.

Every command writes its outputs, and a ``manifest.json`` describing the
run, to a flat output directory. Exit status is 0 on success, 2 for bad
usage or unreadable input and 1 for internal or numerical failures.
"""

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy
from threadpoolctl import threadpool_limits

from .basis import BasisException, FlowBasis, ObjectEmbedding
from .embedding import (
    DEFAULT_LAMBDA_EMBED,
    DEFAULT_LAMBDA_SPATIAL,
    BilateralConfig,
    EmbeddingException,
    embedding_gradient_magnitude,
    embedding_pca,
    read_seeds,
    segment_from_seeds,
)
from .flowio import (
    FlowIOException,
    colorize_disparity,
    colorize_flow,
    read_basis_stack,
    read_disparity,
    read_embedding_stack,
    read_flo,
    read_mask,
    read_pfm,
    write_basis_stack,
    write_flo,
    write_label_map,
    write_pfm,
    write_rgb_png,
)
from .geometry import (
    CameraMotion,
    DisparityMap,
    FlowField,
    GeometryException,
    ImageShape,
    Intrinsics,
    PrincipalPoint,
    make_grid,
)
from .gradients import LossConfig, NearThresholdSingularValue, gradient_check
from .impl.exceptions import FlowspanException
from .impl.family.analytic import family_for
from .impl.store import atomic_write_text, ensure_directory, write_json
from .metrics import MetricsException, depth_from_disparity, evaluate_depth
from .motion import recover_camera_motion
from .projection import (
    DEFAULT_EPSILON,
    EnvironmentEpsilon,
    assemble,
    dual_solve_loss,
    orthonormalize,
    project,
)
from .scenes import (
    DEFAULT_MOTION_STEP,
    SceneException,
    cube_scene,
    instantaneous_flow,
    plane_scene,
    reproject_flow,
    two_object_scene,
    write_scene,
)

logger = getLogger(__name__)


EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

DEFAULT_GRADCHECK_TOLERANCE = 1e-4
"""``gradcheck`` fails if the relative error exceeds this."""

MANIFEST = "manifest.json"


class UsageError(FlowspanException):
    """An exception raised by the `flowspan.cli` module for bad arguments."""


_INPUT_ERRORS = (
    UsageError,
    GeometryException,
    BasisException,
    FlowIOException,
    MetricsException,
    EmbeddingException,
    SceneException,
    # Paths we cannot read, create or write.
    OSError,
)


@dataclass
class RunManifest:
    """
    Everything needed to reproduce a run.

    Parameters
    ----------
    command
        The subcommand.
    inputs
        Input paths by role.
    parameters
        All numerical settings, seed included.
    outputs
        Paths written, relative to the output directory.
    results
        Scalars computed by the run, such as a loss.
    versions
        Package versions.
    """

    command: str
    inputs: Dict[str, Optional[str]] = field(default_factory=dict)
    parameters: Dict[str, Any] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        self.versions = _versions()
        return write_json(directory / MANIFEST, asdict(self))


def _versions() -> Dict[str, str]:
    try:
        flowspan_version = metadata.version("flowspan")
    except metadata.PackageNotFoundError:
        flowspan_version = "unknown"
    return {
        "flowspan": flowspan_version,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
    }


def _shape(text: str) -> ImageShape:
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"Expected a shape like '64x48' (HxW), got '{text}'.") from exc
    return ImageShape(height, width)


def _principal_point(text: str) -> PrincipalPoint:
    try:
        cx, cy = (float(part) for part in text.split(","))
    except ValueError as exc:
        raise UsageError(f"Expected a principal point 'cx,cy', got '{text}'.") from exc
    return PrincipalPoint(cx, cy)


def _camera(args, shape: ImageShape) -> Union[Intrinsics, PrincipalPoint]:
    if args.unknown_focal:
        if args.pp is not None:
            return _principal_point(args.pp)
        if args.intrinsics is not None:
            return Intrinsics.from_string(args.intrinsics).principal_point
        return PrincipalPoint.centered(shape)
    if args.intrinsics is None:
        raise UsageError("Give --intrinsics fx,fy,cx,cy or --unknown-focal.")
    return Intrinsics.from_string(args.intrinsics)


def _read_embedding(args) -> Optional[ObjectEmbedding]:
    if getattr(args, "embedding", None) is None:
        return None
    embedding = read_embedding_stack(args.embedding)
    expected = getattr(args, "A", None)
    if expected is not None and embedding.dim != expected:
        raise UsageError(
            f"--A {expected} but the embedding has {embedding.dim} channels."
        )
    return embedding


def _inline_basis(
    args, disparity: DisparityMap, embedding: Optional[ObjectEmbedding]
) -> FlowBasis:
    camera = _camera(args, disparity.shape)
    family = family_for(
        camera, embedding=embedding is not None, object_rotation=args.object_rotation
    )
    basis = family.build(make_grid(disparity.shape), disparity, embedding)
    logger.info("Built %s basis with %d fields.", family.name, len(basis))
    return basis


def _camera_parameters(args) -> Dict[str, Any]:
    return {
        "intrinsics": args.intrinsics,
        "unknown_focal": args.unknown_focal,
        "pp": args.pp,
        "object_rotation": args.object_rotation,
    }


def cmd_basis(args) -> int:
    out = ensure_directory(args.out)
    disparity = read_disparity(args.disparity)
    embedding = _read_embedding(args)

    basis = _inline_basis(args, disparity, embedding)
    write_basis_stack(out, basis)

    manifest = RunManifest(
        "basis",
        {"disparity": args.disparity, "embedding": args.embedding},
        dict(_camera_parameters(args), A=None if embedding is None else embedding.dim),
        ["basis.json"] + sorted(p.name for p in out.glob("*.flo")),
        {"cardinality": len(basis), "labels": basis.labels},
    )
    manifest.write(out)

    print(len(basis))
    return EXIT_OK


def cmd_project(args) -> int:
    out = ensure_directory(args.out)
    flow = read_flo(args.flow)

    if args.basis is not None:
        basis = read_basis_stack(args.basis)
        embedding = None
    else:
        if args.disparity is None:
            raise UsageError("Give --basis DIR or --disparity with camera options.")
        embedding = _read_embedding(args)
        basis = _inline_basis(args, read_disparity(args.disparity), embedding)

    subspace = orthonormalize(assemble(basis), args.eps, mode=args.eps_mode)
    result = project(subspace, flow)

    residual = flow - result.reconstructed
    write_flo(out / "reconstructed.flo", result.reconstructed)
    write_pfm(out / "residual.pfm", residual.magnitude())
    atomic_write_text(
        out / "coefficients.csv", result.coefficient_series().to_csv(header=True)
    )

    results = {
        "loss": result.residual_norm,
        "rank": result.rank,
        "singular_values": result.singular_values.tolist(),
    }

    if args.dual and embedding is not None:
        camera_only = _inline_basis(args, read_disparity(args.disparity), None)
        dual = dual_solve_loss(
            camera_only,
            basis,
            flow,
            args.eps,
            camera_weight=args.camera_weight,
            full_weight=args.full_weight,
            mode=args.eps_mode,
        )
        results["dual_loss"] = asdict(dual)
        print(f"dual loss: {dual.total:.6g}")

    RunManifest(
        "project",
        {
            "flow": args.flow,
            "basis": args.basis,
            "disparity": args.disparity,
            "embedding": getattr(args, "embedding", None),
        },
        dict(_camera_parameters(args), eps=args.eps, eps_mode=args.eps_mode),
        ["reconstructed.flo", "residual.pfm", "coefficients.csv"],
        results,
    ).write(out)

    print(f"loss: {result.residual_norm:.6g}")
    return EXIT_OK


def _scene(args):
    shape = _shape(args.shape)
    if args.intrinsics is not None:
        intrinsics = Intrinsics.from_string(args.intrinsics)
    else:
        intrinsics = Intrinsics.centered(shape, float(max(shape.height, shape.width)))

    if args.scene == "cube":
        scene = cube_scene(shape, intrinsics)
    elif args.scene == "plane":
        scene = plane_scene(shape, intrinsics)
    else:
        scene = two_object_scene(shape, intrinsics)

    object_motions = None
    if args.object_motion:
        object_motions = [CameraMotion.from_string(spec) for spec in args.object_motion]

    return scene.with_motion(CameraMotion.from_string(args.motion), object_motions)


def cmd_synth(args) -> int:
    out = ensure_directory(args.out)
    scene = _scene(args)

    write_scene(out, scene)
    write_pfm(out / "disparity.pfm", scene.disparity)
    write_flo(out / "flow_exact.flo", reproject_flow(scene, args.step))
    write_flo(out / "flow_instantaneous.flo", args.step * instantaneous_flow(scene))

    masks = [f"mask_{k:02d}.pgm" for k in range(len(scene.objects))]
    RunManifest(
        "synth",
        {},
        {
            "scene": args.scene,
            "shape": args.shape,
            "intrinsics": args.intrinsics,
            "motion": args.motion,
            "object_motion": args.object_motion,
            "step": args.step,
            "seed": args.seed,
        },
        [
            "scene.json",
            "depth.pfm",
            "disparity.pfm",
            "flow_exact.flo",
            "flow_instantaneous.flo",
        ]
        + masks,
    ).write(out)

    return EXIT_OK


def cmd_analyze(args) -> int:
    flow = read_flo(args.flow)
    disparity = read_disparity(args.disparity)
    embedding = _read_embedding(args)

    basis = _inline_basis(args, disparity, embedding)
    subspace = orthonormalize(assemble(basis), args.eps, mode=args.eps_mode)
    result = project(subspace, flow)
    motion = recover_camera_motion(result, disparity, embedding)

    record = motion.to_record()
    record["loss"] = result.residual_norm

    print(motion.to_frame().to_string(index=False))
    if args.json:
        print(json.dumps(record, indent=2))

    if args.out is not None:
        out = ensure_directory(args.out)
        write_json(out / "motion.json", record)
        RunManifest(
            "analyze",
            {
                "flow": args.flow,
                "disparity": args.disparity,
                "embedding": args.embedding,
            },
            dict(_camera_parameters(args), eps=args.eps, eps_mode=args.eps_mode),
            ["motion.json"],
            {"loss": result.residual_norm},
        ).write(out)

    return EXIT_OK


def _random_problem(rng: np.random.Generator, shape: ImageShape, family: str, dim: int):
    disparity = DisparityMap(rng.uniform(0.2, 1.0, shape.as_tuple()))
    flow = FlowField(rng.normal(size=(shape.height, shape.width, 2)))
    focal = float(max(shape.height, shape.width))
    intrinsics = Intrinsics(
        focal * rng.uniform(0.8, 1.2),
        focal * rng.uniform(0.8, 1.2),
        shape.width * rng.uniform(0.3, 0.7),
        shape.height * rng.uniform(0.3, 0.7),
    )

    camera: Union[Intrinsics, PrincipalPoint] = intrinsics
    if family == "unknown-focal":
        camera = intrinsics.principal_point

    embedding = None
    if family == "embedding":
        embedding = rng.normal(size=(shape.height, shape.width, dim))
        embedding /= np.linalg.norm(embedding, axis=-1, keepdims=True)

    return disparity, embedding, camera, flow


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    shape = _shape(args.shape)
    config = LossConfig(mode=args.eps_mode)

    worst = 0.0
    checked = 0
    for trial in range(args.trials):
        disparity, embedding, camera, flow = _random_problem(
            rng, shape, args.family, args.A
        )
        try:
            check = gradient_check(
                disparity,
                embedding,
                camera,
                flow,
                args.eps,
                config,
                max_coordinates=args.max_coordinates,
                rng=rng,
            )
        except NearThresholdSingularValue as exc:
            logger.warning("Skipping trial %d: %s", trial, exc)
            continue
        checked += 1
        worst = max(worst, check.max_relative_error)
        if not check.passed(args.tolerance):
            logger.warning(
                "Trial %d: relative error %.3g at %s.",
                trial,
                check.max_relative_error,
                check.worst_coordinate,
            )

    print(f"max relative error: {worst:.3g} over {checked} trials")

    if args.out is not None:
        out = ensure_directory(args.out)
        RunManifest(
            "gradcheck",
            {},
            {
                "shape": args.shape,
                "family": args.family,
                "A": args.A,
                "trials": args.trials,
                "eps": args.eps,
                "eps_mode": args.eps_mode,
                "max_coordinates": args.max_coordinates,
                "tolerance": args.tolerance,
                "seed": args.seed,
            },
            [],
            {"max_relative_error": worst, "trials_checked": checked},
        ).write(out)

    if checked == 0:
        logger.error("No trial could be checked at eps=%g.", args.eps)
        return EXIT_INTERNAL

    return EXIT_OK if worst <= args.tolerance else EXIT_INTERNAL


def cmd_metrics(args) -> int:
    pred = read_pfm(args.pred)
    if args.pred_is_disparity:
        pred = depth_from_disparity(pred)
    gt = read_pfm(args.gt)
    valid = None if args.mask is None else read_mask(args.mask).as_bool()

    report = evaluate_depth(pred, gt, valid, args.alignment, crop=args.crop)

    print(report.to_frame().to_string(index=False))
    print(json.dumps(report.to_record()))

    if args.out is not None:
        out = ensure_directory(args.out)
        write_json(out / "metrics.json", report.to_record())
        RunManifest(
            "metrics",
            {"pred": args.pred, "gt": args.gt, "mask": args.mask},
            {
                "alignment": args.alignment,
                "crop": args.crop,
                "pred_is_disparity": args.pred_is_disparity,
            },
            ["metrics.json"],
            report.to_record(),
        ).write(out)

    return EXIT_OK


def cmd_segment(args) -> int:
    out = ensure_directory(args.out)
    embedding = read_embedding_stack(args.embedding)
    seeds = read_seeds(args.seeds)
    config = BilateralConfig(args.lambda_spatial, args.lambda_embed)

    labels = segment_from_seeds(embedding, seeds, config)
    name = f"labels.{args.format}"
    write_label_map(out / name, labels)

    RunManifest(
        "segment",
        {"embedding": args.embedding, "seeds": args.seeds},
        {"lambda_spatial": args.lambda_spatial, "lambda_embed": args.lambda_embed},
        [name],
        {"labels": sorted(int(x) for x in np.unique(labels))},
    ).write(out)

    return EXIT_OK


def cmd_colorize(args) -> int:
    out = ensure_directory(args.out)
    outputs = []

    if args.flow is not None:
        rgb = colorize_flow(read_flo(args.flow), args.max_magnitude)
        write_rgb_png(out / "flow.png", rgb)
        outputs.append("flow.png")
    if args.disparity is not None:
        rgb = colorize_disparity(read_disparity(args.disparity))
        write_rgb_png(out / "disparity.png", rgb)
        outputs.append("disparity.png")
    if args.embedding is not None:
        embedding = read_embedding_stack(args.embedding)
        k = min(3, embedding.dim)
        pca = embedding_pca(embedding, k)
        image = np.zeros(embedding.shape.as_tuple() + (3,))
        image[..., :k] = pca.image
        write_rgb_png(out / "embedding_pca.png", image)
        gradient = embedding_gradient_magnitude(embedding)
        write_rgb_png(out / "embedding_gradient.png", colorize_disparity(gradient))
        outputs += ["embedding_pca.png", "embedding_gradient.png"]

    if not outputs:
        raise UsageError("Give at least one of --flow, --disparity or --embedding.")

    RunManifest(
        "colorize",
        {"flow": args.flow, "disparity": args.disparity, "embedding": args.embedding},
        {"max_magnitude": args.max_magnitude},
        outputs,
    ).write(out)

    return EXIT_OK


def _add_camera_options(parser: argparse.ArgumentParser):
    parser.add_argument("--intrinsics", help="Known intrinsics as fx,fy,cx,cy.")
    parser.add_argument(
        "--unknown-focal",
        action="store_true",
        help="Use the eight-field unknown-focal basis.",
    )
    parser.add_argument(
        "--pp", help="Principal point cx,cy; defaults to the image center."
    )
    parser.add_argument("--embedding", help="Embedding stack directory.")
    parser.add_argument("--A", type=int, help="Expected embedding dimension.")
    parser.add_argument(
        "--object-rotation",
        action="store_true",
        help="Let each embedded object rotate.",
    )


def _add_eps_options(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--eps",
        type=float,
        default=None,
        help=(
            f"Singular-value threshold (default {DEFAULT_EPSILON:g} "
            "or $FLOWSPAN_EPSILON)."
        ),
    )
    parser.add_argument(
        "--eps-mode", choices=["absolute", "relative"], default="absolute"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowspan",
        description="Optical flow subspaces from disparity and embeddings.",
    )
    parser.add_argument("--seed", type=int, default=0, help="Random seed.")
    parser.add_argument("--threads", type=int, default=None, help="Limit BLAS threads.")
    parser.add_argument(
        "--quiet", action="store_true", help="Only log warnings and errors."
    )

    commands = parser.add_subparsers(dest="command", required=True)

    basis = commands.add_parser("basis", help="Write a basis stack.")
    basis.add_argument("--disparity", required=True, help="Disparity PFM.")
    _add_camera_options(basis)
    basis.add_argument("--out", required=True)
    basis.set_defaults(handler=cmd_basis)

    proj = commands.add_parser("project", help="Project a flow onto a basis.")
    proj.add_argument("--flow", required=True, help="Observed flow .flo file.")
    proj.add_argument("--basis", help="Basis stack directory.")
    proj.add_argument("--disparity", help="Disparity PFM, to build the basis inline.")
    _add_camera_options(proj)
    _add_eps_options(proj)
    proj.add_argument(
        "--dual",
        action="store_true",
        help="Also report the camera-only plus full loss.",
    )
    proj.add_argument("--camera-weight", type=float, default=0.5)
    proj.add_argument("--full-weight", type=float, default=1.0)
    proj.add_argument("--out", required=True)
    proj.set_defaults(handler=cmd_project)

    synth = commands.add_parser(
        "synth", help="Generate a synthetic scene and its flows."
    )
    synth.add_argument(
        "--scene", choices=["cube", "plane", "two-objects"], default="cube"
    )
    synth.add_argument("--shape", default="64x64", help="Image shape HxW.")
    synth.add_argument(
        "--intrinsics", help="fx,fy,cx,cy; defaults to a centered camera."
    )
    synth.add_argument("--motion", default="", help="Scene motion, e.g. 'tx=1,wz=0.1'.")
    synth.add_argument(
        "--object-motion",
        action="append",
        help="Motion of each object, in order; repeat once per object.",
    )
    synth.add_argument("--step", type=float, default=DEFAULT_MOTION_STEP)
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_synth)

    analyze = commands.add_parser("analyze", help="Recover motion from a flow.")
    analyze.add_argument("--flow", required=True)
    analyze.add_argument("--disparity", required=True)
    _add_camera_options(analyze)
    _add_eps_options(analyze)
    analyze.add_argument(
        "--json", action="store_true", help="Also print a JSON record."
    )
    analyze.add_argument("--out")
    analyze.set_defaults(handler=cmd_analyze)

    gradcheck = commands.add_parser(
        "gradcheck", help="Check gradients on random problems."
    )
    gradcheck.add_argument("--shape", default="8x8")
    gradcheck.add_argument(
        "--family",
        choices=["camera", "unknown-focal", "embedding"],
        default="unknown-focal",
    )
    gradcheck.add_argument("--A", type=int, default=2, help="Embedding dimension.")
    gradcheck.add_argument("--trials", type=int, default=3)
    gradcheck.add_argument("--max-coordinates", type=int, default=None)
    gradcheck.add_argument(
        "--tolerance", type=float, default=DEFAULT_GRADCHECK_TOLERANCE
    )
    _add_eps_options(gradcheck)
    gradcheck.add_argument("--out")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    metrics = commands.add_parser("metrics", help="Evaluate predicted depth.")
    metrics.add_argument("--pred", required=True, help="Predicted depth PFM.")
    metrics.add_argument("--gt", required=True, help="Ground-truth depth PFM.")
    metrics.add_argument("--mask", help="Valid-pixel mask PGM.")
    metrics.add_argument(
        "--pred-is-disparity", action="store_true", help="Invert the prediction first."
    )
    metrics.add_argument("--alignment", choices=["median", "none"], default="median")
    metrics.add_argument("--crop", type=int, default=0)
    metrics.add_argument("--out")
    metrics.set_defaults(handler=cmd_metrics)

    segment = commands.add_parser(
        "segment", help="Segment from seeds in bilateral space."
    )
    segment.add_argument(
        "--embedding", required=True, help="Embedding stack directory."
    )
    segment.add_argument(
        "--seeds", required=True, help="Text file of 'label u v' lines."
    )
    segment.add_argument("--lambda-spatial", type=float, default=DEFAULT_LAMBDA_SPATIAL)
    segment.add_argument("--lambda-embed", type=float, default=DEFAULT_LAMBDA_EMBED)
    segment.add_argument("--format", choices=["png", "pgm"], default="png")
    segment.add_argument("--out", required=True)
    segment.set_defaults(handler=cmd_segment)

    colorize = commands.add_parser(
        "colorize", help="Render flow, disparity or embedding."
    )
    colorize.add_argument("--flow")
    colorize.add_argument("--disparity")
    colorize.add_argument("--embedding")
    colorize.add_argument("--max-magnitude", type=float, default=None)
    colorize.add_argument("--out", required=True)
    colorize.set_defaults(handler=cmd_colorize)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        if getattr(args, "eps", "unset") is None:
            args.eps = EnvironmentEpsilon.epsilon()
        with threadpool_limits(limits=args.threads):
            return args.handler(args)
    except _INPUT_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except FlowspanException as exc:
        logger.error("%s", exc)
        return EXIT_INTERNAL
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        logger.exception("Numerical failure: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
