"""File-based telemetry ingestion.

All inputs are JSON Lines (one record per line) plus two JSON documents:

- metrics.jsonl: ``{"service": str, "metric": str, "ts": int_ms, "value": number}``
- traces.jsonl: ``{"trace_id": str, "span_id": str, "parent_span_id": str|null,
  "service": str, "start": int_ms, "duration_ms": number, "status": "ok"|"error"}``
- logs.jsonl: ``{"service": str, "ts": int_ms, "message": str}``
- topology.json: ``{"services": [str], "edges": [[caller, callee]]}``
- manifest.json: ``{"incident_id": str, "normal": {"start", "end", "metrics",
  "traces", "logs"}, "abnormal": {...}, "topology": path}``

Paths inside a manifest are resolved relative to the manifest's directory.
Non-finite or non-numeric metric values are dropped and counted rather than
rejected; everything else malformed is collected per line and raised as one
``MalformedFile`` error listing the first 100 offending lines.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .model import (
    LogRecord,
    MetricSeries,
    SelfLoopEdge,
    ServiceTopology,
    Span,
    TelemetryBundle,
    UnknownEdgeEndpoint,
    WindowData,
    validate_bundle,
)

logger = logging.getLogger(__name__)

MAX_REPORTED_LINES = 100


class IngestionError(Exception):
    """Base class for ingestion failures."""


class MalformedFile(IngestionError):
    """A file could not be parsed; carries up to 100 offending lines."""

    def __init__(self, path: str | Path, problems: Sequence[tuple[int, str]]):
        self.path = str(path)
        self.problems = list(problems)[:MAX_REPORTED_LINES]
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.problems[:5])
        more = f" (+{len(self.problems) - 5} more)" if len(self.problems) > 5 else ""
        super().__init__(f"{self.path}: {lines}{more}")


class BundleViolation(IngestionError):
    """A parsed bundle failed validation against its topology."""

    def __init__(self, message: str, violations: Sequence[Any]):
        self.violations = list(violations)[:MAX_REPORTED_LINES]
        super().__init__(f"{message}: {len(violations)} violation(s), first: {self.violations[0]}")


class WindowViolation(BundleViolation):
    """Records fell outside their declared window or windows overlap."""


# Topology structural errors are defined with the core model; ingestion
# surfaces them unchanged.
SelfLoop = SelfLoopEdge
UnknownEndpoint = UnknownEdgeEndpoint


@dataclass(frozen=True)
class WindowFiles:
    """Window bounds plus the three telemetry files inside it."""

    start: int
    end: int
    metrics: Path
    traces: Path
    logs: Path


@dataclass(frozen=True)
class IncidentManifest:
    """Locations of everything needed to load one incident."""

    incident_id: str
    normal: WindowFiles
    abnormal: WindowFiles
    topology: Path
    counts: Mapping[str, Mapping[str, int]] | None = None

    @classmethod
    def load(cls, path: str | Path) -> "IncidentManifest":
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise MalformedFile(path, [(exc.lineno, exc.msg)]) from exc
        base = path.parent

        def window(block: Mapping[str, Any]) -> WindowFiles:
            return WindowFiles(
                start=int(block["start"]),
                end=int(block["end"]),
                metrics=base / block["metrics"],
                traces=base / block["traces"],
                logs=base / block["logs"],
            )

        try:
            manifest = cls(
                incident_id=data["incident_id"],
                normal=window(data["normal"]),
                abnormal=window(data["abnormal"]),
                topology=base / data["topology"],
                counts=data.get("counts"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFile(path, [(0, f"bad manifest structure: {exc}")]) from exc
        for p in (
            manifest.topology,
            manifest.normal.metrics,
            manifest.normal.traces,
            manifest.normal.logs,
            manifest.abnormal.metrics,
            manifest.abnormal.traces,
            manifest.abnormal.logs,
        ):
            if not p.exists():
                raise IngestionError(f"manifest references missing file: {p}")
        return manifest


@dataclass(frozen=True)
class IngestStats:
    """Counters accumulated while parsing one incident."""

    dropped_metric_values: int = 0
    metric_points: int = 0
    spans: int = 0
    log_records: int = 0


@dataclass(frozen=True)
class LoadedIncident:
    """Everything ``load_incident`` produces."""

    incident_id: str
    bundle: TelemetryBundle
    topology: ServiceTopology
    stats: IngestStats
    warnings: tuple[str, ...] = ()


def load_topology(path: str | Path) -> ServiceTopology:
    """Parse topology.json; duplicate edges collapse, self-loops are rejected."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(path, [(exc.lineno, exc.msg)]) from exc
    try:
        services = data["services"]
        edges = [tuple(e) for e in data["edges"]]
    except (KeyError, TypeError) as exc:
        raise MalformedFile(path, [(0, f"bad topology structure: {exc}")]) from exc
    return ServiceTopology(services, edges)


def _iter_jsonl(path: Path) -> Iterable[tuple[int, Any]]:
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            yield lineno, line


def read_metrics_jsonl(path: str | Path) -> tuple[list[MetricSeries], int]:
    """Parse one metrics file into per-(service, metric) series.

    Returns the series list and the count of dropped records (non-numeric
    or non-finite values). Points keep file order within each series.
    """
    path = Path(path)
    problems: list[tuple[int, str]] = []
    dropped = 0
    grouped: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for lineno, line in _iter_jsonl(path):
        try:
            rec = json.loads(line)
            service = rec["service"]
            metric = rec["metric"]
            ts = int(rec["ts"])
            if not isinstance(service, str) or not service or not isinstance(metric, str):
                raise ValueError("bad service/metric field")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            problems.append((lineno, str(exc)))
            continue
        value = rec.get("value")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            dropped += 1
            continue
        grouped.setdefault((service, metric), []).append((ts, float(value)))
    if problems:
        raise MalformedFile(path, problems)
    series = [
        MetricSeries(service=s, metric_name=m, points=tuple(pts))
        for (s, m), pts in sorted(grouped.items())
    ]
    return series, dropped


def read_spans_jsonl(path: str | Path) -> list[Span]:
    path = Path(path)
    problems: list[tuple[int, str]] = []
    spans: list[Span] = []
    for lineno, line in _iter_jsonl(path):
        try:
            rec = json.loads(line)
            spans.append(Span.from_dict(rec))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            problems.append((lineno, str(exc)))
    if problems:
        raise MalformedFile(path, problems)
    return spans


def read_logs_jsonl(path: str | Path) -> list[LogRecord]:
    path = Path(path)
    problems: list[tuple[int, str]] = []
    records: list[LogRecord] = []
    for lineno, line in _iter_jsonl(path):
        try:
            rec = json.loads(line)
            message = rec["message"]
            if not isinstance(message, str) or not message:
                raise ValueError("empty log message")
            records.append(LogRecord(service=rec["service"], timestamp=int(rec["ts"]), message=message))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            problems.append((lineno, str(exc)))
    if problems:
        raise MalformedFile(path, problems)
    return records


def derive_topology_from_traces(spans: Sequence[Span]) -> ServiceTopology:
    """Build a call graph from parent/child span pairs.

    An edge (caller, callee) is added for every parent/child span pair
    whose services differ; same-service pairs are suppressed (no self
    loops). Spans whose parent_span_id is missing from their trace are
    treated as roots and reported through the module logger.
    """
    if not spans:
        raise ValueError("cannot derive a topology from zero spans")
    by_trace: dict[str, dict[str, Span]] = {}
    for span in spans:
        by_trace.setdefault(span.trace_id, {})[span.span_id] = span
    services = {span.service for span in spans}
    edges: set[tuple[str, str]] = set()
    for span in spans:
        if span.parent_span_id is None:
            continue
        parent = by_trace[span.trace_id].get(span.parent_span_id)
        if parent is None:
            logger.warning(
                "orphan parent ref: span %s/%s names missing parent %s; treated as root",
                span.trace_id,
                span.span_id,
                span.parent_span_id,
            )
            continue
        if parent.service != span.service:
            edges.add((parent.service, span.service))
    return ServiceTopology(services, edges)


def load_incident(manifest: IncidentManifest | str | Path) -> LoadedIncident:
    """Parse a full incident directory into a validated bundle.

    The topology file wins over the trace-derived graph; disagreements are
    logged as a discrepancy report. Raises ``MalformedFile`` on unparseable
    lines and ``WindowViolation`` / ``BundleViolation`` when the parsed
    bundle fails validation.
    """
    if not isinstance(manifest, IncidentManifest):
        manifest = IncidentManifest.load(manifest)
    topology = load_topology(manifest.topology)

    normal_metrics, dropped_n = read_metrics_jsonl(manifest.normal.metrics)
    abnormal_metrics, dropped_a = read_metrics_jsonl(manifest.abnormal.metrics)
    normal_spans = read_spans_jsonl(manifest.normal.traces)
    abnormal_spans = read_spans_jsonl(manifest.abnormal.traces)
    normal_logs = read_logs_jsonl(manifest.normal.logs)
    abnormal_logs = read_logs_jsonl(manifest.abnormal.logs)

    bundle = TelemetryBundle(
        normal=WindowData(
            start=manifest.normal.start,
            end=manifest.normal.end,
            metrics=tuple(normal_metrics),
            spans=tuple(normal_spans),
            logs=tuple(normal_logs),
        ),
        abnormal=WindowData(
            start=manifest.abnormal.start,
            end=manifest.abnormal.end,
            metrics=tuple(abnormal_metrics),
            spans=tuple(abnormal_spans),
            logs=tuple(abnormal_logs),
        ),
    )

    warnings: list[str] = []
    all_spans = list(normal_spans) + list(abnormal_spans)
    if all_spans:
        derived = derive_topology_from_traces(all_spans)
        extra_edges = sorted(set(derived.edges) - set(topology.edges))
        extra_services = sorted(set(derived.services) - set(topology.services))
        if extra_edges or extra_services:
            note = (
                f"trace-derived graph disagrees with topology file: "
                f"extra services {extra_services}, extra edges {extra_edges}"
            )
            warnings.append(note)
            logger.warning("%s", note)

    report = validate_bundle(bundle, topology)
    if not report.ok:
        window_kinds = {"out_of_window", "window_order"}
        if any(v.kind in window_kinds for v in report.violations):
            raise WindowViolation(f"incident {manifest.incident_id}", report.violations)
        raise BundleViolation(f"incident {manifest.incident_id}", report.violations)

    stats = IngestStats(
        dropped_metric_values=dropped_n + dropped_a,
        metric_points=sum(len(s.points) for s in normal_metrics + abnormal_metrics),
        spans=len(all_spans),
        log_records=len(normal_logs) + len(abnormal_logs),
    )
    return LoadedIncident(
        incident_id=manifest.incident_id,
        bundle=bundle,
        topology=topology,
        stats=stats,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Writers. The simulator and the fixed-point tests share these so that
# everything on disk follows one schema.


def write_topology(topo: ServiceTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topo.to_dict(), indent=2, sort_keys=True) + "\n")


def write_metrics_jsonl(series: Iterable[MetricSeries], path: str | Path) -> int:
    n = 0
    with Path(path).open("w") as fh:
        for s in series:
            for ts, value in s.points:
                fh.write(
                    json.dumps(
                        {"service": s.service, "metric": s.metric_name, "ts": ts, "value": value}
                    )
                    + "\n"
                )
                n += 1
    return n


def write_spans_jsonl(spans: Iterable[Span], path: str | Path) -> int:
    n = 0
    with Path(path).open("w") as fh:
        for span in spans:
            fh.write(json.dumps(span.to_dict()) + "\n")
            n += 1
    return n


def write_logs_jsonl(records: Iterable[LogRecord], path: str | Path) -> int:
    n = 0
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(
                json.dumps({"service": rec.service, "ts": rec.timestamp, "message": rec.message})
                + "\n"
            )
            n += 1
    return n


def write_manifest(manifest_dict: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest_dict, indent=2, sort_keys=True) + "\n")


def write_bundle(
    incident_id: str,
    bundle: TelemetryBundle,
    topology: ServiceTopology,
    out_dir: str | Path,
) -> Path:
    """Write a bundle back to disk in the standard incident layout.

    Returns the manifest path. Used by tests to check that load -> write ->
    load is a fixed point, and by tools that need to snapshot a bundle.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_topology(topology, out / "topology.json")
    counts: dict[str, dict[str, int]] = {}
    for label, window in (("normal", bundle.normal), ("abnormal", bundle.abnormal)):
        counts[label] = {
            "metrics": write_metrics_jsonl(window.metrics, out / f"{label}_metrics.jsonl"),
            "spans": write_spans_jsonl(window.spans, out / f"{label}_traces.jsonl"),
            "logs": write_logs_jsonl(window.logs, out / f"{label}_logs.jsonl"),
        }
    manifest = {
        "incident_id": incident_id,
        "normal": {
            "start": bundle.normal.start,
            "end": bundle.normal.end,
            "metrics": "normal_metrics.jsonl",
            "traces": "normal_traces.jsonl",
            "logs": "normal_logs.jsonl",
        },
        "abnormal": {
            "start": bundle.abnormal.start,
            "end": bundle.abnormal.end,
            "metrics": "abnormal_metrics.jsonl",
            "traces": "abnormal_traces.jsonl",
            "logs": "abnormal_logs.jsonl",
        },
        "topology": "topology.json",
        "counts": counts,
    }
    manifest_path = out / "manifest.json"
    write_manifest(manifest, manifest_path)
    return manifest_path
