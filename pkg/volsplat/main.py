import argparse
import logging
import sys

from volsplat.commands import cmd_compare, cmd_fit, cmd_gradcheck, cmd_make_scene, cmd_render
from volsplat.config import settings
from volsplat.exceptions import EXIT_USAGE, VolsplatError
from volsplat.models import AmplitudeModel
from volsplat.schemas import GradientMode, JacobianMode, Variant
from volsplat.synthetic import SyntheticKind

logging.basicConfig(
    level=logging.DEBUG if settings.debug else logging.INFO,
    format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)

VARIANT_CHOICES = [v.value for v in Variant]
KIND_CHOICES = [k.value for k in SyntheticKind]


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_synthetic_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--count", type=int, help="blob_cloud Gaussian count")
    parser.add_argument("--views", type=int, help="orbit rig size")
    parser.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    parser.add_argument("--theta", type=float, help="post-activation θ of the synthetic Gaussians")


def _add_dataset_flags(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--dataset", help="NeRF-synthetic style directory")
    source.add_argument("--synthetic", choices=KIND_CHOICES, help="render a synthetic scene as the dataset")
    parser.add_argument("--background", choices=["white", "black"], default="white")
    parser.add_argument("--downscale", type=int, default=1)
    parser.add_argument("--reference-variant", choices=VARIANT_CHOICES, default=Variant.OTS_MARCHER.value)
    parser.add_argument("--test-every", type=int, default=8)
    _add_synthetic_flags(parser)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="volsplat", description="Differentiable splatting and ray marching of 3D Gaussians")
    parser.add_argument("--threads", type=int, help=f"worker cap (default {settings.threads})")
    sub = parser.add_subparsers(dest="command", required=True)

    render = sub.add_parser("render", help="render one view to PNG")
    scene = render.add_mutually_exclusive_group(required=True)
    scene.add_argument("--scene", help="PLY file or checkpoint")
    scene.add_argument("--synthetic", choices=KIND_CHOICES)
    render.add_argument("--variant", choices=VARIANT_CHOICES, required=True)
    render.add_argument("--camera", help="JSON camera or list of cameras")
    render.add_argument("--view", type=int, default=0)
    render.add_argument("--output", required=True)
    render.add_argument("--filter-variance", type=float)
    render.add_argument("--jacobian-mode", choices=[m.value for m in JacobianMode])
    render.add_argument("--bins-per-gaussian", type=int)
    _add_synthetic_flags(render)
    render.set_defaults(handler=cmd_render)

    fit = sub.add_parser("fit", help="fit a fixed number of Gaussians to a dataset")
    fit.add_argument("--config", help="JSON TrainConfig")
    fit.add_argument("--output", required=True)
    fit.add_argument("--variant", choices=VARIANT_CHOICES)
    fit.add_argument("--gaussians", type=int)
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, dotted keys allowed")
    fit.add_argument("--resume", help="checkpoint to continue from")
    fit.add_argument("--progress", action="store_true")
    _add_dataset_flags(fit)
    fit.set_defaults(handler=cmd_fit)

    grad = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    grad.add_argument("--variant", choices=VARIANT_CHOICES + ["all"], default="all")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    grad.add_argument("--tolerance", type=float)
    grad.add_argument("--perturbation", type=float)
    grad.add_argument("--gradient-mode", choices=[m.value for m in GradientMode], default=GradientMode.DETACHED.value)
    grad.add_argument("--corrupt", action="store_true", help="scale the analytic gradient to check the harness")
    grad.add_argument("--report", required=True)
    grad.set_defaults(handler=cmd_gradcheck)

    compare = sub.add_parser("compare", help="fit several variants and Gaussian counts")
    compare.add_argument("--variants", nargs="+", choices=VARIANT_CHOICES, required=True)
    compare.add_argument("--counts", nargs="+", type=int, required=True)
    compare.add_argument("--iterations", type=int, default=3000)
    compare.add_argument("--config", help="JSON TrainConfig shared by every row")
    compare.add_argument("--set", action="append", metavar="KEY=VALUE")
    compare.add_argument("--output", required=True)
    compare.add_argument("--progress", action="store_true")
    _add_dataset_flags(compare)
    compare.set_defaults(handler=cmd_compare)

    make = sub.add_parser("make-scene", help="write a synthetic scene and its camera rig")
    make.add_argument("kind", choices=KIND_CHOICES)
    make.add_argument("--output", required=True)
    make.add_argument("--model", choices=[m.value for m in AmplitudeModel])
    make.add_argument("--render-dataset", action="store_true")
    make.add_argument("--reference-variant", choices=VARIANT_CHOICES, default=Variant.OTS_MARCHER.value)
    make.add_argument("--test-every", type=int, default=8)
    _add_synthetic_flags(make)
    make.set_defaults(handler=cmd_make_scene)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            logger.error("--threads must be >= 1")
            return EXIT_USAGE
        settings.threads = args.threads
    logger.info("Starting %s %s", settings.app_name, args.command)
    try:
        return args.handler(args)
    except VolsplatError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
