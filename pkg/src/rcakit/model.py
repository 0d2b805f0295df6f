"""Shared domain types for microservice incident root-cause analysis.

Everything here is immutable after construction and safe to share across
threads. All types round-trip through ``to_dict`` / ``from_dict`` so that
reports and fixtures can be serialized as plain JSON.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

ServiceId = str

SPAN_STATUSES = ("ok", "error")
EVIDENCE_KINDS = ("self", "upstream", "downstream")
VERDICT_OUTCOMES = ("confirmed", "redirected", "rejected")

REPORT_SCHEMA_VERSION = 1


class TopologyError(ValueError):
    """Raised when a service topology violates a structural invariant."""


class SelfLoopEdge(TopologyError):
    """An edge whose caller and callee are the same service."""


class UnknownEdgeEndpoint(TopologyError):
    """An edge endpoint that is not a declared service."""


def validate_service_name(name: str) -> str:
    if not isinstance(name, str) or not name.strip():
        raise ValueError(f"service name must be a non-empty string, got {name!r}")
    return name


class ServiceTopology:
    """Directed service-dependency graph: an edge (a, b) means a calls b.

    Children of a service are its callees, parents are its callers. Edges
    are deduplicated, self-loops are rejected, and endpoints must be
    declared services.
    """

    __slots__ = ("_services", "_edges", "_children", "_parents")

    def __init__(self, services: Iterable[ServiceId], edges: Iterable[tuple[ServiceId, ServiceId]]):
        svc = tuple(sorted({validate_service_name(s) for s in services}))
        svc_set = set(svc)
        edge_set: set[tuple[str, str]] = set()
        for caller, callee in edges:
            if caller == callee:
                raise SelfLoopEdge(f"self-loop edge on service {caller!r}")
            if caller not in svc_set:
                raise UnknownEdgeEndpoint(f"edge caller {caller!r} is not a declared service")
            if callee not in svc_set:
                raise UnknownEdgeEndpoint(f"edge callee {callee!r} is not a declared service")
            edge_set.add((caller, callee))
        children: dict[str, list[str]] = {s: [] for s in svc}
        parents: dict[str, list[str]] = {s: [] for s in svc}
        for caller, callee in sorted(edge_set):
            children[caller].append(callee)
            parents[callee].append(caller)
        object.__setattr__(self, "_services", svc)
        object.__setattr__(self, "_edges", tuple(sorted(edge_set)))
        object.__setattr__(self, "_children", {s: tuple(c) for s, c in children.items()})
        object.__setattr__(self, "_parents", {s: tuple(p) for s, p in parents.items()})

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("ServiceTopology is immutable")

    @property
    def services(self) -> tuple[ServiceId, ...]:
        return self._services

    @property
    def edges(self) -> tuple[tuple[ServiceId, ServiceId], ...]:
        return self._edges

    def __contains__(self, service: ServiceId) -> bool:
        return service in self._children

    def __len__(self) -> int:
        return len(self._services)

    def children(self, service: ServiceId) -> tuple[ServiceId, ...]:
        return self._children[service]

    def parents(self, service: ServiceId) -> tuple[ServiceId, ...]:
        return self._parents[service]

    def neighborhood(self, service: ServiceId) -> tuple[ServiceId, ...]:
        """The service plus its direct parents and children, sorted."""
        near = {service}
        near.update(self._parents[service])
        near.update(self._children[service])
        return tuple(sorted(near))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ServiceTopology):
            return NotImplemented
        return self._services == other._services and self._edges == other._edges

    def __hash__(self) -> int:
        return hash((self._services, self._edges))

    def __repr__(self) -> str:
        return f"ServiceTopology({len(self._services)} services, {len(self._edges)} edges)"

    def to_dict(self) -> dict[str, Any]:
        return {"services": list(self._services), "edges": [list(e) for e in self._edges]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ServiceTopology":
        return cls(data["services"], [tuple(e) for e in data["edges"]])


@dataclass(frozen=True)
class MetricSeries:
    """One named metric for one service: ordered (timestamp_ms, value) points."""

    service: ServiceId
    metric_name: str
    points: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "points", tuple((int(t), float(v)) for t, v in self.points)
        )

    def timestamps(self) -> list[int]:
        return [t for t, _ in self.points]

    def values(self) -> list[float]:
        return [v for _, v in self.points]

    def to_dict(self) -> dict[str, Any]:
        return {
            "service": self.service,
            "metric_name": self.metric_name,
            "points": [[t, v] for t, v in self.points],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricSeries":
        return cls(data["service"], data["metric_name"], tuple((p[0], p[1]) for p in data["points"]))


@dataclass(frozen=True)
class Span:
    """One service invocation observed in a distributed trace."""

    trace_id: str
    span_id: str
    parent_span_id: str | None
    service: ServiceId
    start: int
    duration_ms: float
    status: str = "ok"

    def __post_init__(self) -> None:
        if self.status not in SPAN_STATUSES:
            raise ValueError(f"span status must be one of {SPAN_STATUSES}, got {self.status!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "span_id": self.span_id,
            "parent_span_id": self.parent_span_id,
            "service": self.service,
            "start": self.start,
            "duration_ms": self.duration_ms,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Span":
        return cls(
            trace_id=data["trace_id"],
            span_id=data["span_id"],
            parent_span_id=data.get("parent_span_id"),
            service=data["service"],
            start=int(data["start"]),
            duration_ms=float(data["duration_ms"]),
            status=data.get("status", "ok"),
        )


@dataclass(frozen=True)
class LogRecord:
    """One raw log line emitted by a service."""

    service: ServiceId
    timestamp: int
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"service": self.service, "timestamp": self.timestamp, "message": self.message}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LogRecord":
        return cls(data["service"], int(data["timestamp"]), data["message"])


@dataclass(frozen=True)
class WindowData:
    """All telemetry observed inside one time window [start, end)."""

    start: int
    end: int
    metrics: tuple[MetricSeries, ...] = ()
    spans: tuple[Span, ...] = ()
    logs: tuple[LogRecord, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "spans", tuple(self.spans))
        object.__setattr__(self, "logs", tuple(self.logs))

    def to_dict(self) -> dict[str, Any]:
        return {
            "start": self.start,
            "end": self.end,
            "metrics": [m.to_dict() for m in self.metrics],
            "spans": [s.to_dict() for s in self.spans],
            "logs": [r.to_dict() for r in self.logs],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WindowData":
        return cls(
            start=int(data["start"]),
            end=int(data["end"]),
            metrics=tuple(MetricSeries.from_dict(m) for m in data["metrics"]),
            spans=tuple(Span.from_dict(s) for s in data["spans"]),
            logs=tuple(LogRecord.from_dict(r) for r in data["logs"]),
        )


@dataclass(frozen=True)
class TelemetryBundle:
    """A sealed incident snapshot: a normal window and an abnormal window."""

    normal: WindowData
    abnormal: WindowData

    def to_dict(self) -> dict[str, Any]:
        return {"normal": self.normal.to_dict(), "abnormal": self.abnormal.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TelemetryBundle":
        return cls(WindowData.from_dict(data["normal"]), WindowData.from_dict(data["abnormal"]))


@dataclass(frozen=True)
class ScoreBreakdown:
    """Per-modality contributions behind one hypothesis score.

    The identity ``w_m*metric_term + w_t*trace_term + w_l*log_term
    + propagation_delta + regularizer_delta == final score`` holds exactly,
    where the weights are the fusion config in effect.
    """

    metric_term: float
    trace_term: float
    log_term: float
    propagation_delta: float
    regularizer_delta: float

    def to_dict(self) -> dict[str, float]:
        return {
            "metric_term": self.metric_term,
            "trace_term": self.trace_term,
            "log_term": self.log_term,
            "propagation_delta": self.propagation_delta,
            "regularizer_delta": self.regularizer_delta,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScoreBreakdown":
        return cls(
            metric_term=float(data["metric_term"]),
            trace_term=float(data["trace_term"]),
            log_term=float(data["log_term"]),
            propagation_delta=float(data["propagation_delta"]),
            regularizer_delta=float(data["regularizer_delta"]),
        )


@dataclass(frozen=True)
class Hypothesis:
    """One candidate root-cause service, with its drafting score breakdown."""

    service: ServiceId
    drafting_score: float
    score_breakdown: ScoreBreakdown
    rank: int

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not math.isfinite(self.drafting_score) or self.drafting_score < 0:
            raise ValueError(f"drafting_score must be finite and >= 0, got {self.drafting_score}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "service": self.service,
            "drafting_score": self.drafting_score,
            "score_breakdown": self.score_breakdown.to_dict(),
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Hypothesis":
        return cls(
            service=data["service"],
            drafting_score=float(data["drafting_score"]),
            score_breakdown=ScoreBreakdown.from_dict(data["score_breakdown"]),
            rank=int(data["rank"]),
        )


@dataclass(frozen=True)
class EvidenceItem:
    """One observation a verifier used when judging a hypothesis."""

    kind: str
    subject: ServiceId
    description: str
    strength: float

    def __post_init__(self) -> None:
        if self.kind not in EVIDENCE_KINDS:
            raise ValueError(f"evidence kind must be one of {EVIDENCE_KINDS}, got {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "subject": self.subject,
            "description": self.description,
            "strength": self.strength,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvidenceItem":
        return cls(data["kind"], data["subject"], data["description"], float(data["strength"]))


@dataclass(frozen=True)
class Verdict:
    """A verifier's judgment on one hypothesis.

    ``outcome`` is "confirmed", "redirected" (with ``target`` set to a
    topology neighbor), or "rejected". ``fallback`` marks verdicts that a
    remote backend could not produce and that were degraded to the
    deterministic verifier.
    """

    hypothesis: ServiceId
    outcome: str
    confidence: float
    evidence: tuple[EvidenceItem, ...] = ()
    target: ServiceId | None = None
    source: str = "deterministic"
    fallback: bool = False
    fallback_reason: str | None = None

    def __post_init__(self) -> None:
        if self.outcome not in VERDICT_OUTCOMES:
            raise ValueError(f"outcome must be one of {VERDICT_OUTCOMES}, got {self.outcome!r}")
        if self.outcome == "redirected" and not self.target:
            raise ValueError("redirected verdict requires a target service")
        if self.outcome != "redirected" and self.target is not None:
            raise ValueError(f"{self.outcome} verdict must not carry a target")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        object.__setattr__(self, "evidence", tuple(self.evidence))

    def to_dict(self) -> dict[str, Any]:
        return {
            "hypothesis": self.hypothesis,
            "outcome": self.outcome,
            "confidence": self.confidence,
            "evidence": [e.to_dict() for e in self.evidence],
            "target": self.target,
            "source": self.source,
            "fallback": self.fallback,
            "fallback_reason": self.fallback_reason,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Verdict":
        return cls(
            hypothesis=data["hypothesis"],
            outcome=data["outcome"],
            confidence=float(data["confidence"]),
            evidence=tuple(EvidenceItem.from_dict(e) for e in data["evidence"]),
            target=data.get("target"),
            source=data.get("source", "deterministic"),
            fallback=bool(data.get("fallback", False)),
            fallback_reason=data.get("fallback_reason"),
        )


@dataclass(frozen=True)
class RankedCause:
    """One entry of the final diagnosis ranking."""

    service: ServiceId
    score: float
    rationale: str

    def to_dict(self) -> dict[str, Any]:
        return {"service": self.service, "score": self.score, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RankedCause":
        return cls(data["service"], float(data["score"]), data["rationale"])


@dataclass(frozen=True)
class DiagnosisReport:
    """Final ranked root-cause list plus the verdicts that produced it."""

    incident_id: str
    ranked_causes: tuple[RankedCause, ...]
    verdicts: tuple[Verdict, ...]
    timing_ms: Mapping[str, float] = field(default_factory=dict)
    config: Mapping[str, Any] | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranked_causes", tuple(self.ranked_causes))
        object.__setattr__(self, "verdicts", tuple(self.verdicts))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        object.__setattr__(self, "timing_ms", dict(self.timing_ms))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "incident_id": self.incident_id,
            "ranked_causes": [c.to_dict() for c in self.ranked_causes],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "timing_ms": dict(self.timing_ms),
            "config": dict(self.config) if self.config is not None else None,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DiagnosisReport":
        version = data.get("schema_version", REPORT_SCHEMA_VERSION)
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version}")
        return cls(
            incident_id=data["incident_id"],
            ranked_causes=tuple(RankedCause.from_dict(c) for c in data["ranked_causes"]),
            verdicts=tuple(Verdict.from_dict(v) for v in data["verdicts"]),
            timing_ms=dict(data.get("timing_ms", {})),
            config=data.get("config"),
            warnings=tuple(data.get("warnings", ())),
        )


@dataclass(frozen=True)
class Violation:
    """One well-formedness problem found in a telemetry bundle."""

    kind: str
    subject: str
    detail: str

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind, "subject": self.subject, "detail": self.detail}


@dataclass(frozen=True)
class ValidationReport:
    """All violations found by ``validate_bundle``; empty means well-formed."""

    violations: tuple[Violation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "violations", tuple(self.violations))

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def to_dict(self) -> dict[str, Any]:
        return {"violations": [v.to_dict() for v in self.violations]}


def _check_window_records(
    window: WindowData, label: str, topo: ServiceTopology, out: list[Violation]
) -> None:
    for series in window.metrics:
        subject = f"{label}/metric/{series.service}/{series.metric_name}"
        if series.service not in topo:
            out.append(Violation("unknown_service", subject, f"service {series.service!r} not in topology"))
        prev: int | None = None
        for ts, value in series.points:
            if prev is not None and ts <= prev:
                out.append(
                    Violation("non_monotone_series", subject, f"timestamp {ts} not after {prev}")
                )
            prev = ts
            if not window.start <= ts < window.end:
                out.append(
                    Violation("out_of_window", subject, f"timestamp {ts} outside [{window.start}, {window.end})")
                )
            if not math.isfinite(value):
                out.append(Violation("nonfinite_value", subject, f"value {value!r} at {ts}"))
    span_ids_by_trace: dict[str, set[str]] = {}
    for span in window.spans:
        span_ids_by_trace.setdefault(span.trace_id, set()).add(span.span_id)
    for span in window.spans:
        subject = f"{label}/span/{span.trace_id}/{span.span_id}"
        if span.service not in topo:
            out.append(Violation("unknown_service", subject, f"service {span.service!r} not in topology"))
        if not window.start <= span.start < window.end:
            out.append(
                Violation("out_of_window", subject, f"start {span.start} outside [{window.start}, {window.end})")
            )
        if span.duration_ms < 0:
            out.append(Violation("negative_duration", subject, f"duration {span.duration_ms}"))
        if span.parent_span_id is not None and span.parent_span_id not in span_ids_by_trace.get(
            span.trace_id, set()
        ):
            out.append(
                Violation("orphan_parent", subject, f"parent span {span.parent_span_id!r} missing from trace")
            )
    for idx, record in enumerate(window.logs):
        subject = f"{label}/log/{record.service}/{idx}"
        if record.service not in topo:
            out.append(Violation("unknown_service", subject, f"service {record.service!r} not in topology"))
        if not window.start <= record.timestamp < window.end:
            out.append(
                Violation(
                    "out_of_window", subject, f"timestamp {record.timestamp} outside [{window.start}, {window.end})"
                )
            )
        if not record.message:
            out.append(Violation("empty_message", subject, "log message is empty"))


def validate_bundle(bundle: TelemetryBundle, topo: ServiceTopology) -> ValidationReport:
    """Report every well-formedness violation in a bundle.

    Pure and idempotent: problems are reported, never raised, and the
    bundle is not modified. An empty report means the bundle satisfies
    all ingestion invariants against the given topology.
    """
    out: list[Violation] = []
    if bundle.normal.end > bundle.abnormal.start:
        out.append(
            Violation(
                "window_order",
                "bundle",
                f"normal window ends at {bundle.normal.end}, after abnormal start {bundle.abnormal.start}",
            )
        )
    _check_window_records(bundle.normal, "normal", topo, out)
    _check_window_records(bundle.abnormal, "abnormal", topo, out)
    return ValidationReport(tuple(out))
