"""Trace-based anomaly scoring.

Spans are grouped into trees per trace, the root-to-leaf path with the
largest accumulated positive latency residual is extracted per tree, and
services are ranked with a mass-weighted PageRank over the service
topology. Residual = observed span duration minus the service's
normal-window mean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from .model import ServiceId, ServiceTopology, Span, TelemetryBundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PageRankConfig:
    """Damped mass-weighted PageRank settings.

    ``flow`` chooses the walk orientation: "toward_callees" (default)
    pushes rank from symptomatic callers down to the backends they depend
    on; "toward_callers" runs the opposite orientation.
    """

    damping: float = 0.85
    max_iters: int = 100
    tol: float = 1e-10
    flow: str = "toward_callees"

    def __post_init__(self) -> None:
        if not 0.0 < self.damping < 1.0:
            raise ValueError(f"damping must be in (0, 1), got {self.damping}")
        if self.flow not in ("toward_callees", "toward_callers"):
            raise ValueError(f"unknown flow {self.flow!r}")


@dataclass(frozen=True)
class BaselineLatency:
    """Per-service mean span duration over the normal window."""

    means: Mapping[ServiceId, float]
    counts: Mapping[ServiceId, int]

    def mean(self, service: ServiceId) -> float | None:
        return self.means.get(service)


@dataclass(frozen=True)
class TraceTree:
    """Spans of one trace arranged by parent links under a single root."""

    trace_id: str
    root: Span
    children_by_span: Mapping[str, tuple[Span, ...]]
    notes: tuple[str, ...] = ()

    def children_of(self, span: Span) -> tuple[Span, ...]:
        return self.children_by_span.get(span.span_id, ())

    def spans(self) -> list[Span]:
        out: list[Span] = []
        stack = [self.root]
        while stack:
            span = stack.pop()
            out.append(span)
            stack.extend(reversed(self.children_of(span)))
        return out


@dataclass(frozen=True)
class CriticalPath:
    """The root-to-leaf path of one trace carrying the most positive residual."""

    trace_id: str
    services: tuple[ServiceId, ...]
    residuals: tuple[float, ...]
    mass: float


@dataclass(frozen=True)
class PageRankResult:
    scores: Mapping[ServiceId, float]
    converged: bool
    iterations: int


@dataclass(frozen=True)
class TraceAnalysis:
    """Everything the trace pipeline produces for one incident."""

    baseline: BaselineLatency
    critical_paths: tuple[CriticalPath, ...]
    masses: Mapping[ServiceId, float]
    pagerank: PageRankResult
    top_residuals: Mapping[ServiceId, tuple[tuple[str, float], ...]]
    warnings: tuple[str, ...] = ()


def _sort_key(span: Span) -> tuple[int, str]:
    return (span.start, span.span_id)


def build_trace_trees(spans: Sequence[Span]) -> list[TraceTree]:
    """Group spans into one tree per (trace, root).

    Spans without a parent, or whose parent is missing from the trace, or
    that sit on a parent cycle, become roots of their own trees with a note
    attached. Child ordering is deterministic: by start time then span id.
    """
    by_trace: dict[str, list[Span]] = {}
    for span in spans:
        by_trace.setdefault(span.trace_id, []).append(span)

    trees: list[TraceTree] = []
    for trace_id in sorted(by_trace):
        members = by_trace[trace_id]
        by_id = {s.span_id: s for s in members}
        roots: list[tuple[Span, str | None]] = []
        children: dict[str, list[Span]] = {}
        for span in members:
            parent_id = span.parent_span_id
            if parent_id is None:
                roots.append((span, None))
            elif parent_id not in by_id or parent_id == span.span_id:
                roots.append((span, f"orphan parent ref {parent_id!r}; span treated as root"))
            else:
                children.setdefault(parent_id, []).append(span)

        # Spans reachable from a root are consumed; anything left sits on a
        # parent cycle and is broken deterministically at its smallest span id.
        reachable: set[str] = set()

        def mark(root: Span) -> None:
            stack = [root]
            while stack:
                node = stack.pop()
                if node.span_id in reachable:
                    continue
                reachable.add(node.span_id)
                stack.extend(children.get(node.span_id, ()))

        for root, _ in roots:
            mark(root)
        leftovers = sorted((s for s in members if s.span_id not in reachable), key=_sort_key)
        while leftovers:
            breaker = min(leftovers, key=lambda s: s.span_id)
            children_list = children.get(breaker.parent_span_id or "", None)
            if children_list is not None and breaker in children_list:
                children_list.remove(breaker)
            roots.append((breaker, "parent cycle broken; span treated as root"))
            mark(breaker)
            leftovers = [s for s in leftovers if s.span_id not in reachable]

        multi_root_note = (
            f"trace {trace_id} has {len(roots)} roots; split into separate trees"
            if len(roots) > 1
            else None
        )
        child_map = {pid: tuple(sorted(kids, key=_sort_key)) for pid, kids in children.items()}
        for root, note in sorted(roots, key=lambda item: _sort_key(item[0])):
            notes = tuple(n for n in (note, multi_root_note) if n)
            for n in notes:
                logger.warning("trace %s: %s", trace_id, n)
            trees.append(
                TraceTree(trace_id=trace_id, root=root, children_by_span=child_map, notes=notes)
            )
    return trees


def compute_baseline(normal_spans: Sequence[Span]) -> BaselineLatency:
    """Per-service mean span duration over the normal window."""
    sums: dict[ServiceId, float] = {}
    counts: dict[ServiceId, int] = {}
    for span in normal_spans:
        sums[span.service] = sums.get(span.service, 0.0) + span.duration_ms
        counts[span.service] = counts.get(span.service, 0) + 1
    means = {svc: sums[svc] / counts[svc] for svc in sums}
    return BaselineLatency(means=means, counts=counts)


def critical_path(tree: TraceTree, baseline: BaselineLatency) -> CriticalPath:
    """Extract the root-to-leaf path maximizing accumulated positive residual.

    Residuals are signed (observed duration minus baseline mean) but only
    their positive part contributes to the path mass; ties between child
    branches break toward the earliest start time. Services missing a
    baseline use 0 with a warning.
    """

    def residual(span: Span) -> float:
        base = baseline.mean(span.service)
        if base is None:
            logger.warning(
                "no baseline for service %s; residual uses 0 baseline", span.service
            )
            base = 0.0
        return span.duration_ms - base

    # Iterative post-order accumulation of the best downstream mass.
    best_mass: dict[str, float] = {}
    best_child: dict[str, Span | None] = {}
    order: list[Span] = []
    stack = [tree.root]
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(tree.children_of(node))
    for node in reversed(order):
        kids = tree.children_of(node)
        chosen: Span | None = None
        chosen_mass = 0.0
        for kid in kids:  # already sorted by (start, span_id)
            kid_mass = best_mass[kid.span_id]
            if chosen is None or kid_mass > chosen_mass:
                chosen = kid
                chosen_mass = kid_mass
        best_child[node.span_id] = chosen
        best_mass[node.span_id] = max(residual(node), 0.0) + chosen_mass

    services: list[ServiceId] = []
    residuals: list[float] = []
    node: Span | None = tree.root
    while node is not None:
        services.append(node.service)
        residuals.append(residual(node))
        node = best_child[node.span_id]
    mass = sum(max(r, 0.0) for r in residuals)
    return CriticalPath(
        trace_id=tree.trace_id,
        services=tuple(services),
        residuals=tuple(residuals),
        mass=mass,
    )


def accumulate_masses(
    paths: Sequence[CriticalPath], services: Sequence[ServiceId]
) -> dict[ServiceId, float]:
    """Per-service sum of the masses of all critical paths containing it."""
    masses = {svc: 0.0 for svc in services}
    for path in paths:
        for svc in set(path.services):
            if svc in masses:
                masses[svc] += path.mass
    return masses


def service_pagerank(
    paths: Sequence[CriticalPath],
    topo: ServiceTopology,
    cfg: PageRankConfig | None = None,
) -> PageRankResult:
    """Mass-weighted PageRank over the service topology.

    The walk moves along call edges (orientation per ``cfg.flow``); from
    each service the outgoing rank splits across neighbors proportionally
    to their accumulated critical-path mass. Rank at dangling services, or
    at services whose neighbors carry zero total mass, is recycled across
    all services proportionally to mass (uniformly when no path carries
    mass, which reduces the whole walk to the classical unweighted form).
    The result is a probability distribution over services.
    """
    cfg = cfg or PageRankConfig()
    services = list(topo.services)
    n = len(services)
    if n == 0:
        return PageRankResult(scores={}, converged=True, iterations=0)
    if n == 1:
        return PageRankResult(scores={services[0]: 1.0}, converged=True, iterations=0)
    index = {svc: i for i, svc in enumerate(services)}
    mass_map = accumulate_masses(paths, services)
    mass = np.array([mass_map[svc] for svc in services], dtype=float)

    walk: dict[int, list[int]] = {i: [] for i in range(n)}
    for caller, callee in topo.edges:
        if cfg.flow == "toward_callees":
            walk[index[caller]].append(index[callee])
        else:
            walk[index[callee]].append(index[caller])

    transition = np.zeros((n, n))
    recycling = np.zeros(n, dtype=bool)
    for u in range(n):
        targets = walk[u]
        total = float(mass[targets].sum()) if targets else 0.0
        if not targets or total <= 0.0:
            recycling[u] = True
            continue
        for v in targets:
            transition[u, v] = mass[v] / total

    total_mass = float(mass.sum())
    recycle_dist = mass / total_mass if total_mass > 0 else np.full(n, 1.0 / n)

    d = cfg.damping
    teleport = (1.0 - d) / n
    x = np.full(n, 1.0 / n)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        recycled = float(x[recycling].sum())
        x_new = teleport + d * (transition.T @ x + recycled * recycle_dist)
        if float(np.max(np.abs(x_new - x))) < cfg.tol:
            x = x_new
            converged = True
            break
        x = x_new
    if not converged:
        logger.warning("pagerank did not converge in %d iterations", cfg.max_iters)
    x = x / x.sum()
    return PageRankResult(
        scores={svc: float(x[i]) for svc, i in index.items()},
        converged=converged,
        iterations=iterations,
    )


def analyze_traces(
    bundle: TelemetryBundle,
    topo: ServiceTopology,
    cfg: PageRankConfig | None = None,
) -> TraceAnalysis:
    """Full trace pipeline: baseline, critical paths, masses, PageRank."""
    cfg = cfg or PageRankConfig()
    warnings: list[str] = []
    baseline = compute_baseline(bundle.normal.spans)
    missing = sorted(
        {s.service for s in bundle.abnormal.spans} - set(baseline.means)
    )
    if missing:
        warnings.append(f"no baseline latency for services {missing}; residuals use 0 baseline")

    trees = build_trace_trees(bundle.abnormal.spans)
    for tree in trees:
        warnings.extend(f"trace {tree.trace_id}: {note}" for note in tree.notes)
    paths = tuple(critical_path(tree, baseline) for tree in trees)
    masses = accumulate_masses(paths, topo.services)
    pagerank = service_pagerank(paths, topo, cfg)
    if not pagerank.converged:
        warnings.append(f"pagerank did not converge in {cfg.max_iters} iterations")

    per_service: dict[ServiceId, list[tuple[str, float]]] = {}
    for path in paths:
        for svc, res in zip(path.services, path.residuals):
            per_service.setdefault(svc, []).append((path.trace_id, res))
    top_residuals = {
        svc: tuple(sorted(items, key=lambda it: (-it[1], it[0]))[:3])
        for svc, items in per_service.items()
    }
    return TraceAnalysis(
        baseline=baseline,
        critical_paths=paths,
        masses=masses,
        pagerank=pagerank,
        top_residuals=top_residuals,
        warnings=tuple(warnings),
    )
