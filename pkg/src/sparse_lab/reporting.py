"""Metrics CSV, curve files, and the per-run manifest.

All emitted text is deterministic: LF newlines, comma separators, and
minimal round-trip-exact decimal rendering, so re-emitting from the same
checkpoints reproduces files byte for byte.  Wall-clock telemetry is kept
out of metrics.csv (stored per round in the checkpoints and summarized in
the manifest) so that identical configurations yield identical CSVs.
"""

from __future__ import annotations

import json
import platform
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .probes import ProbeResult, load_probes
from .sketch import PhaseReport, SketchRun, detect_phases
from .util import TOOL_VERSION, fmt_num, fmt_sig17

METRICS_HEADER = (
    "run_id,round,sparsity,epsilon,lambda,seed,"
    "train_loss,train_acc,test_loss,test_acc,y_exc_l1,wall_seconds"
)
CURVE_METRICS = ("train_loss", "train_acc", "test_loss", "test_acc", "y_exc_l1")


@dataclass(frozen=True)
class RunManifest:
    """Provenance card written next to every run's checkpoints."""

    run_id: str
    config_hash: str
    tool_version: str
    started_at: str
    finished_at: str | None
    host: str

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "host": self.host,
        }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _host_info() -> str:
    return f"{platform.node()} {platform.platform()} python-{sys.version.split()[0]}"


def write_manifest(run_dir: str | Path, run_id: str, config_hash: str) -> None:
    """Create the manifest at run start; an existing one is left in place."""
    path = Path(run_dir) / "manifest.json"
    if path.exists():
        return
    manifest = RunManifest(
        run_id=run_id,
        config_hash=config_hash,
        tool_version=TOOL_VERSION,
        started_at=_now(),
        finished_at=None,
        host=_host_info(),
    )
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def finalize_manifest(run_dir: str | Path) -> None:
    path = Path(run_dir) / "manifest.json"
    payload = json.loads(path.read_text())
    payload["finished_at"] = _now()
    path.write_text(json.dumps(payload, indent=2) + "\n")


def emit_metrics_csv(
    run: SketchRun,
    probes: list[ProbeResult] | None,
    path: str | Path,
) -> None:
    """Write one CSV row per round under the fixed 12-column header.

    Probe values align with rounds 0..R-1 (the excess removed from each
    trained round by the next mask); rounds without a probe get an empty
    field.  The wall_seconds column is always empty: wall time is telemetry,
    recorded in the round checkpoints, and including it would break the
    byte-identity of reruns.
    """
    if not run.rounds:
        raise ValueError("run has no rounds to emit")
    cfg = run.config
    lines = [METRICS_HEADER]
    for m in run.rounds:
        y_exc = ""
        if probes is not None and m.round < len(probes):
            y_exc = fmt_num(probes[m.round].y_exc_l1)
        lines.append(
            ",".join(
                (
                    cfg.run_id,
                    str(m.round),
                    fmt_num(m.sparsity),
                    fmt_num(cfg.epsilon),
                    fmt_num(cfg.train.weight_decay),
                    str(cfg.train.seed),
                    fmt_num(m.final_train_loss),
                    fmt_num(m.final_train_acc),
                    fmt_num(m.test_loss),
                    fmt_num(m.test_acc),
                    y_exc,
                    "",
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def parse_metrics_csv(path: str | Path) -> list[dict]:
    """Parse an emitted metrics.csv back into per-row dicts (None for empty)."""
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header in {path}")
    cols = METRICS_HEADER.split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(cols):
            raise ValueError(f"malformed row in {path}: {line!r}")
        row: dict = dict(zip(cols, cells))
        for key in cols:
            if key == "run_id":
                continue
            if row[key] == "":
                row[key] = None
            elif key in ("round", "seed"):
                row[key] = int(row[key])
            else:
                row[key] = float(row[key])
        rows.append(row)
    return rows


def reemit_metrics_csv(rows: list[dict], path: str | Path) -> None:
    """Re-serialize parsed rows; byte-identical to the original emission."""
    lines = [METRICS_HEADER]
    for row in rows:
        cells = []
        for key in METRICS_HEADER.split(","):
            value = row[key]
            if value is None:
                cells.append("")
            elif key == "run_id":
                cells.append(str(value))
            elif key in ("round", "seed"):
                cells.append(str(value))
            else:
                cells.append(fmt_num(value))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def emit_curves(
    runs: list[SketchRun],
    metric: str,
    out_dir: str | Path,
    probes_by_run: dict[str, list[ProbeResult]] | None = None,
) -> list[Path]:
    """Write one ``<run_id>.<metric>.curve.csv`` per run, plus pairs.txt.

    Curve rows are (sparsity, value) sorted by sparsity ascending, rendered
    with 17 significant digits.  pairs.txt lists vanilla/L2 run id pairs
    matched on (epsilon, seed) for overlay plotting.
    """
    if metric not in CURVE_METRICS:
        raise ValueError(
            f"unknown metric {metric!r}; valid metrics: {', '.join(CURVE_METRICS)}"
        )
    specs = {run.config.dataset for run in runs}
    if len(specs) > 1:
        raise ValueError("curve overlays require all runs to share one dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for run in runs:
        rows: list[tuple[float, float]] = []
        for m in run.rounds:
            if metric == "y_exc_l1":
                series = (probes_by_run or {}).get(run.config.run_id)
                if series is None or m.round >= len(series):
                    continue
                value = series[m.round].y_exc_l1
            elif metric == "train_loss":
                value = m.final_train_loss
            elif metric == "train_acc":
                value = m.final_train_acc
            elif metric == "test_loss":
                value = m.test_loss
            else:
                value = m.test_acc
            rows.append((m.sparsity, value))
        rows.sort(key=lambda r: r[0])
        path = out_dir / f"{run.config.run_id}.{metric}.curve.csv"
        lines = [f"sparsity,{metric}"]
        lines.extend(f"{fmt_sig17(s)},{fmt_sig17(v)}" for s, v in rows)
        path.write_text("\n".join(lines) + "\n", newline="\n")
        written.append(path)

    pairs = []
    for run in runs:
        if run.config.train.weight_decay != 0.0:
            continue
        key = (run.config.epsilon, run.config.train.seed)
        for other in runs:
            if other.config.train.weight_decay == 0.0:
                continue
            if (other.config.epsilon, other.config.train.seed) == key:
                pairs.append((run.config.run_id, other.config.run_id))
    pairs.sort()
    pairs_path = out_dir / "pairs.txt"
    pairs_path.write_text("".join(f"{a},{b}\n" for a, b in pairs), newline="\n")
    written.append(pairs_path)
    return written


def write_phase_report(run_dir: str | Path, report: PhaseReport) -> None:
    path = Path(run_dir) / "phase.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def finalize_run_dir(run: SketchRun, run_dir: str | Path) -> None:
    """Emit metrics.csv (merging stored probes, if any), phase.json, and
    stamp the manifest.  Idempotent and deterministic for a finished run."""
    run_dir = Path(run_dir)
    probes = load_probes(run_dir)
    emit_metrics_csv(run, probes, run_dir / "metrics.csv")
    if run.phase_annotation is not None:
        write_phase_report(run_dir, run.phase_annotation)
    finalize_manifest(run_dir)


def load_run(run_dir: str | Path) -> SketchRun:
    """Reconstruct a SketchRun from a checkpoint directory without training."""
    from .sketch import _scan_completed_rounds, read_config

    run_dir = Path(run_dir)
    cfg = read_config(run_dir)
    rounds = _scan_completed_rounds(run_dir, cfg.config_hash())
    run = SketchRun(config=cfg, rounds=rounds)
    if len(rounds) >= 4:
        run.phase_annotation = detect_phases(run)
    return run
