"""
Summary assembly and markdown formatting for the terminal
"""

from typing import Any, Dict, List

from fod_forge.config import PipelineConfig
from fod_forge.utils.store import load_json_store
from .stages import Layout


def build_summary(config: PipelineConfig, layout: Layout, execution_log: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Collect the run's stage statuses, Jaccard scores and evaluation aggregates"""
    jaccard = load_json_store(layout.gt_jaccard)
    report = load_json_store(layout.eval_dir / "report.json")
    evaluation = {}
    if report:
        evaluation = {
            key: report.get(key, 0)
            for key in (
                "mean_accuracy",
                "detection_rate",
                "false_positive_rate",
                "mean_jaccard",
                "n_images",
                "n_target_components",
                "n_predicted_components",
            )
        }
    return {
        "config_hash": config.config_hash(),
        "master_seed": config.master_seed,
        "objects": len(config.phantom.object_ids),
        "stages": {entry["node"]: entry["status"] for entry in execution_log},
        "jaccard": jaccard.get("mean", {}),
        "jaccard_per_object": jaccard.get("per_object", {}),
        "eval": evaluation,
    }


def format_summary_as_markdown(summary: Dict[str, Any]) -> str:
    """
    Format a pipeline summary as markdown
    """
    lines = ["# fod-forge run\n"]
    lines.append(f"**Config hash:** `{summary.get('config_hash', '')[:12]}`  ")
    lines.append(f"**Master seed:** {summary.get('master_seed')}  ")
    lines.append(f"**Objects:** {summary.get('objects')}\n")

    stages = summary.get("stages", {})
    if stages:
        lines.append("## Stages\n")
        lines.append("| Stage | Status |")
        lines.append("|---|---|")
        for stage, status in stages.items():
            lines.append(f"| {stage} | {status} |")
        lines.append("")

    jaccard = summary.get("jaccard", {})
    if jaccard:
        lines.append("## Workflow vs absolute ground truth\n")
        lines.append("| Segmentation | Mean Jaccard |")
        lines.append("|---|---|")
        for variant, value in jaccard.items():
            lines.append(f"| {variant} | {value:.4f} |")
        lines.append("")

    evaluation = summary.get("eval", {})
    if evaluation:
        lines.append("## Test set\n")
        lines.append(f"- Average class accuracy: {evaluation['mean_accuracy']:.4f}")
        lines.append(
            f"- Detection rate: {evaluation['detection_rate']:.1f}% of {evaluation['n_target_components']} objects"
        )
        lines.append(
            f"- False positive detection rate: {evaluation['false_positive_rate']:.1f}%"
            f" of {evaluation['n_predicted_components']} detections"
        )
        lines.append(f"- Mean Jaccard: {evaluation['mean_jaccard']:.4f}")
        lines.append(f"- Images: {evaluation['n_images']}")

    return "\n".join(lines)
