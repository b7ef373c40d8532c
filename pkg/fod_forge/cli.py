"""Command line entry point: one subcommand per stage plus pipeline, eval and plot."""

import argparse
import json
import logging
import sys
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from fod_forge.config import PipelineConfig, default_log_level, load_config
from fod_forge.errors import ConfigurationError, ForgeError
from fod_forge.evalmetrics import DetectionParams, evaluate_testset, load_report
from fod_forge.gtproject import radiograph_label_mask
from fod_forge.phantom import FOREIGN, load_phantom
from fod_forge.pipeline.formatters import format_summary_as_markdown
from fod_forge.pipeline.service import PipelineService
from fod_forge.pipeline.stages import ABSOLUTE, INPUT_KINDS, STAGES, Layout
from fod_forge.plotting import plot_histograms, plot_results
from fod_forge.recon import load_recon
from fod_forge.utils.store import load_json_store, load_raw, object_dir_name, raw_exists
from fod_forge.volseg import histogram

logger = logging.getLogger("fod_forge")


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or default_log_level()),
        format="%(levelname)s: %(message)s",
        force=True,
    )


def _merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def apply_overrides(config: PipelineConfig, updates: Dict[str, Any]) -> PipelineConfig:
    """Re-validate the config with command line values layered on top"""
    try:
        return PipelineConfig.model_validate(_merge(config.model_dump(), updates))
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e


def _read_table(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    with open(path, "rb") as f:
        return tomllib.load(f)


def _stage_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    updates: Dict[str, Any] = {
        "output_dir": getattr(args, "out", None),
        "master_seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
    }
    geom = getattr(args, "geom", None)
    if geom is not None:
        table = _read_table(geom)
        updates["geometry"] = table.get("geometry", table)
    sections = {
        "phantom": {"count": getattr(args, "count", None)},
        "spectrum": {"spectrum_csv": getattr(args, "spectrum", None)},
        "sirt": {"iterations": getattr(args, "iters", None)},
        "segmentation": {
            "method": getattr(args, "method", None),
            "theta": getattr(args, "theta", None),
            "sweep": getattr(args, "sweep", None),
        },
        "ground_truth": {
            "absolute": getattr(args, "absolute", None),
            "resize": getattr(args, "resize", None),
            "export_png": getattr(args, "png", None),
        },
        "dataset": {
            "strategy": getattr(args, "strategy", None),
            "objects": getattr(args, "objects", None),
            "total": getattr(args, "total", None),
            "seed": getattr(args, "dataset_seed", None),
        },
    }
    for name, values in sections.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            updates[name] = values
    return updates


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _resize(text: str) -> Optional[int]:
    return None if text.lower() == "none" else int(text)


def _stage_inputs(args: argparse.Namespace) -> Dict[str, Path]:
    """Artifact directories taken from another run instead of --out"""
    return {kind: getattr(args, kind) for kind in INPUT_KINDS if getattr(args, kind, None) is not None}


def run_stages(args: argparse.Namespace, only: Optional[List[str]]) -> int:
    config = apply_overrides(load_config(args.config), _stage_overrides(args))
    state = PipelineService().run(
        config, only=only, force=args.force, threads=args.threads, inputs=_stage_inputs(args)
    )
    print(format_summary_as_markdown(state["summaries"].get("report", {})))
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    return run_stages(args, args.only)


def cmd_stage(args: argparse.Namespace) -> int:
    return run_stages(args, [args.command])


def cmd_eval(args: argparse.Namespace) -> int:
    if args.pred is None and args.target is None:
        return run_stages(args, ["eval"])
    if args.pred is None or args.target is None:
        raise ConfigurationError("--pred and --target must be given together")
    params = None
    if any(v is not None for v in (args.eta, args.delta, args.min_size, args.connectivity)):
        defaults = DetectionParams()
        try:
            params = DetectionParams(
                eta=args.eta if args.eta is not None else defaults.eta,
                delta=args.delta if args.delta is not None else defaults.delta,
                min_component_px=args.min_size if args.min_size is not None else defaults.min_component_px,
                connectivity=args.connectivity or defaults.connectivity,
            )
        except ValidationError as e:
            raise ConfigurationError(f"invalid detection parameters: {e}") from e
    report = evaluate_testset(
        args.pred,
        args.target,
        params,
        out_path=args.out or Path("report.json"),
        allow_missing=args.allow_missing,
    )
    print(
        f"ACC {report.mean_accuracy:.4f}  detection {report.detection_rate:.1f}%  "
        f"false positives {report.false_positive_rate:.1f}%  Jaccard {report.mean_jaccard:.4f}"
    )
    return 0


def plot_object_histograms(config: PipelineConfig, object_id: int, out_dir: Path) -> List[Path]:
    """Reconstruction and radiograph histograms of one object, split by foreign-object label"""
    layout = Layout(Path(config.output_dir))
    phantom = load_phantom(layout.phantom(object_id))
    thresholds = load_json_store(layout.thresholds).get(object_dir_name(object_id), {})
    written = []

    recon = load_recon(layout.recon(object_id))
    recon_hist = histogram(recon.values, config.segmentation.n_bins, label_mask=phantom.mask(FOREIGN))
    written.append(
        plot_histograms(
            recon_hist,
            Path(out_dir) / f"{object_dir_name(object_id)}_recon_hist.png",
            thresholds,
            title=f"object {object_id} reconstruction",
        )
    )

    radiographs, _ = load_raw(layout.scan(object_id))
    if raw_exists(layout.gt(ABSOLUTE, object_id)):
        labels = load_raw(layout.gt(ABSOLUTE, object_id))[0][0].astype(bool)
    else:
        labels = radiograph_label_mask(phantom, config.geometry.to_geometry(), 0)
    radiograph_hist = histogram(radiographs[0], config.segmentation.n_bins, label_mask=labels)
    written.append(
        plot_histograms(
            radiograph_hist,
            Path(out_dir) / f"{object_dir_name(object_id)}_radiograph_hist.png",
            title=f"object {object_id} radiograph, angle 0",
            x_label="absorbance",
        )
    )
    return written


def cmd_plot(args: argparse.Namespace) -> int:
    if args.histograms is not None:
        config = apply_overrides(load_config(args.config), {"output_dir": args.root})
        for path in plot_object_histograms(config, args.histograms, args.out):
            print(path)
        return 0
    if not args.reports:
        raise ConfigurationError("plot needs --reports or --histograms")
    reports = [load_report(path) for path in args.reports]
    table = plot_results(reports, args.out, x_key=args.x_key)
    print(table.to_string(index=False))
    return 0


def _add_common(parser: argparse.ArgumentParser, out_help: str = "artifact root directory") -> None:
    parser.add_argument("--config", type=Path, help="TOML or JSON pipeline configuration")
    parser.add_argument("--out", type=Path, help=out_help)
    parser.add_argument("--threads", type=int, help="parallelism (default: FOD_FORGE_THREADS or CPU count)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--force", action="store_true", help="recompute even when cached")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fod-forge",
        description="Generate CT-based training data for X-ray foreign-object detection",
    )
    parser.add_argument("--log-level", help="logging level (default: FOD_FORGE_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate labelled phantoms")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("scan", help="simulate noisy corrected radiographs")
    _add_common(p)
    p.add_argument("--geom", type=Path, help="geometry table (TOML or JSON)")
    p.add_argument("--spectrum", type=Path, help="spectrum CSV (energy_keV, weight)")
    p.add_argument("--phantoms", type=Path, help="read phantoms from this directory")
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("recon", help="SIRT reconstruction")
    _add_common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--scans", type=Path, help="read scans from this directory")
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("segment", help="threshold reconstructions")
    _add_common(p)
    p.add_argument("--method", choices=["otsu", "fixed"])
    p.add_argument("--theta", type=float)
    p.add_argument("--sweep", type=_float_list, help="comma-separated thresholds")
    p.add_argument("--recons", type=Path, help="read reconstructions from this directory")
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("gt", help="project segmentations into 2D ground truth")
    _add_common(p)
    p.add_argument("--geom", type=Path)
    p.add_argument("--absolute", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--resize", type=_resize, help="training image size, or 'none'")
    p.add_argument("--png", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--segmentations", type=Path, help="read segmentations from this directory")
    p.add_argument("--phantoms", type=Path, help="read phantoms from this directory")
    p.add_argument("--scans", type=Path, help="read scans from this directory")
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("dataset", help="sample training, validation and test sets")
    _add_common(p)
    p.add_argument("--strategy", choices=["workflow", "manual", "mixed"])
    p.add_argument("--objects", type=int)
    p.add_argument("--total", type=int)
    p.add_argument("--dataset-seed", type=int)
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("eval", help="score predicted masks against targets")
    _add_common(p, "report path with --pred/--target (default report.json), else the artifact root")
    p.add_argument("--pred", type=Path)
    p.add_argument("--target", type=Path)
    p.add_argument("--eta", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--connectivity", type=int, choices=[4, 8])
    p.add_argument("--allow-missing", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="result curves or histograms")
    p.add_argument("--config", type=Path)
    p.add_argument("--reports", type=Path, nargs="*")
    p.add_argument("--x-key", default="objects")
    p.add_argument("--histograms", type=int, metavar="OBJECT_ID")
    p.add_argument("--root", type=Path, help="artifact root for --histograms")
    p.add_argument("--out", type=Path, default=Path("plots"))
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("pipeline", help="run every stage with caching")
    _add_common(p)
    p.add_argument("--only", nargs="+", choices=list(STAGES))
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except ForgeError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
