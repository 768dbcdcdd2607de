"""Helper functions for reporting pipeline results.

Formatting mirrors what the CLI prints; the writers produce the CSV, JSON
and manifest files every stage leaves behind.
"""

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

from noisebridge.purify import PSNR_CAP, EvalReport
from noisebridge.verify import VerificationResult

PathLike = Union[str, Path]


def _fmt(value: Optional[float], digits: int = 2) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return f"{value:.{digits}f}"


def format_eval_report(report: EvalReport, title: str = "Evaluation") -> str:
    """Human readable summary of one evaluation.

    Example:
        >>> print(format_eval_report(report))  # doctest: +SKIP
        # Evaluation
        Images: 500, inference steps: 1, condition: none
        ...
    """
    parts = [
        f"# {title}",
        f"Images: {report.n_images}, inference steps: {report.n_inference_steps}, condition: {report.condition_mode}",
        "---",
        f"- Clean accuracy (purified): {_fmt(report.clean_acc)}%",
        f"- Robust accuracy, undefended: {_fmt(report.robust_acc_undefended)}%",
        f"- Robust accuracy, purified: {_fmt(report.robust_acc_purified)}%",
    ]
    if report.psnr_db is not None:
        parts.append(f"- PSNR: {_fmt(min(report.psnr_db, PSNR_CAP))} dB, SSIM: {_fmt(report.ssim, 4)}")
    parts.append(f"- Median seconds per image: {_fmt(report.per_image_seconds, 5)}")
    if report.edge_seconds:
        parts.append(f"  (edge construction: {_fmt(report.edge_seconds, 5)} s)")
    if report.speedup is not None:
        parts.append(f"- DDIM baseline: {_fmt(report.ddim_seconds, 5)} s, speedup x{_fmt(report.speedup, 1)}")
    return "\n".join(parts)


def format_sweep(reports: Sequence[EvalReport]) -> str:
    lines = ["steps  clean%  robust%  seconds"]
    for report in reports:
        lines.append(
            f"{report.n_inference_steps:>5}  {_fmt(report.clean_acc):>6}  "
            f"{_fmt(report.robust_acc_purified):>7}  {_fmt(report.per_image_seconds, 5)}"
        )
    return "\n".join(lines)


def format_verification(results: Sequence[VerificationResult]) -> str:
    """One line per checked schedule plus a verdict."""
    lines = []
    for result in results:
        status = "ok" if result.passed else "FAILED"
        lines.append(
            f"N={result.n_steps:<4} residual={result.max_recursion_residual:.3e} "
            f"eps_a={result.max_eps_a_coefficient:.3e} k_T={result.terminal_k:.1e} "
            f"limit={result.limit_gap:.1e} solver={result.solver_gap:.1e} {status}"
        )
    failed = sum(not result.passed for result in results)
    lines.append(f"{len(results) - failed}/{len(results)} schedules passed")
    return "\n".join(lines)


def write_csv(path: PathLike, rows: Iterable[Mapping[str, Any]], header: Optional[List[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    header = header or (list(rows[0].keys()) if rows else [])
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if row.get(key) is None else row.get(key) for key in header})
    return path


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(
    output_dir: PathLike,
    stage: str,
    config_hash: str,
    files: Sequence[PathLike],
    summary: Optional[Dict[str, Any]] = None,
) -> Path:
    """Record which files a stage produced under ``manifests/<stage>.json``.

    Paths are stored relative to ``output_dir`` so manifests of identical
    runs compare equal.
    """
    output_dir = Path(output_dir)
    relative = sorted({str(Path(f).relative_to(output_dir)) if Path(f).is_relative_to(output_dir) else str(f) for f in files})
    manifest = {
        "command": stage,
        "config_hash": config_hash,
        "files": relative,
        "summary": summary or {},
    }
    return write_json(output_dir / "manifests" / f"{stage}.json", manifest)


__all__ = [
    "format_eval_report",
    "format_sweep",
    "format_verification",
    "write_csv",
    "write_json",
    "write_manifest",
]
