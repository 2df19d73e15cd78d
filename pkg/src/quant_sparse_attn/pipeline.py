"""Planning and replay of the head-wise estimation/attention pipeline.

Each head passes through three stages: a quantized Q.K launch on the
accelerator (heads in the same scale bucket share one fused launch), a
top-k on the general-purpose processor, then sparse attention. Dependencies
per head: npu -> topk -> qkv. Times are cost-model milliseconds, never
wall-clock.

Lane models:

* ``three-clock``: the planner recurrences as written. Accelerator launches
  queue back to back; topk and qkv advance separate clocks, so the topk of
  one head may overlap the qkv of another.
* ``single``: topk and qkv share one clock on the general-purpose processor.
* ``sequential``: nothing overlaps; the serialized baseline.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from quant_sparse_attn.tensor_core import ValidationError

LANES = ("three-clock", "single", "sequential")
DEFAULT_PERMUTATION_LIMIT = 10**6
INF = math.inf


class ScheduleError(RuntimeError):
    """A schedule breaks a stage dependency or double-books a lane."""


class PlanningLimitError(RuntimeError):
    """Exhaustive planning refused: too many orderings."""


@dataclass(frozen=True)
class CostProfile:
    """Measured fused-launch costs plus per-head topk and qkv costs (ms)."""

    npu_points: tuple[tuple[int, float], ...]
    topk_times: tuple[float, ...]
    qkv_times: tuple[float, ...]

    def __post_init__(self):
        pts = tuple(sorted((int(c), float(t)) for c, t in self.npu_points))
        if not pts:
            raise ValidationError("need at least one accelerator cost point")
        if any(c < 1 for c, _ in pts) or len({c for c, _ in pts}) != len(pts):
            raise ValidationError("cost points need distinct head counts >= 1")
        if any(t <= 0 for _, t in pts):
            raise ValidationError("accelerator times must be positive")
        if any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            raise ValidationError("accelerator time must be nondecreasing in head count")
        object.__setattr__(self, "npu_points", pts)
        object.__setattr__(self, "topk_times", tuple(float(x) for x in self.topk_times))
        object.__setattr__(self, "qkv_times", tuple(float(x) for x in self.qkv_times))
        if len(self.topk_times) != len(self.qkv_times):
            raise ValidationError("topk_times and qkv_times must cover the same heads")
        if any(t <= 0 for t in self.topk_times + self.qkv_times):
            raise ValidationError("stage times must be positive")

    @property
    def num_heads(self) -> int:
        return len(self.topk_times)

    @classmethod
    def from_ratios(cls, npu_points, topk_time: float, qkv_full_time: float,
                    ratios: Sequence[float]) -> "CostProfile":
        """qkv cost of each head scales linearly with its retained ratio."""
        return cls(tuple(npu_points), (topk_time,) * len(ratios),
                   tuple(qkv_full_time * r for r in ratios))

    def to_dict(self) -> dict:
        return {
            "npu_points": [[c, t] for c, t in self.npu_points],
            "topk_times": list(self.topk_times),
            "qkv_times": list(self.qkv_times),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CostProfile":
        try:
            return cls(tuple(tuple(p) for p in doc["npu_points"]), tuple(doc["topk_times"]),
                       tuple(doc["qkv_times"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed cost profile: {exc}") from exc


def npu_time_of(profile: CostProfile, head_count: int) -> float:
    """Piecewise-linear in the measured points.

    Below the first point the first cost applies. Beyond the last point the
    last segment's marginal cost per head continues; with a single point the
    cost is taken as proportional to head count.
    """
    if head_count < 1:
        raise ValidationError("head_count must be >= 1")
    pts = profile.npu_points
    if len(pts) == 1:
        c, t = pts[0]
        return t if head_count <= c else t * head_count / c
    if head_count <= pts[0][0]:
        return pts[0][1]
    for (c0, t0), (c1, t1) in zip(pts, pts[1:]):
        if head_count <= c1:
            return t0 + (t1 - t0) * (head_count - c0) / (c1 - c0)
    (c0, t0), (c1, t1) = pts[-2], pts[-1]
    return t1 + (t1 - t0) / (c1 - c0) * (head_count - c1)


@dataclass(frozen=True)
class FusedGroup:
    """Heads sharing one accelerator launch.

    `npu_time` overrides the profile's head-count lookup for launches whose
    cost is measured directly.
    """

    bucket: int
    heads: tuple[int, ...]
    npu_time: Optional[float] = None


def launch_cost(group: FusedGroup, profile: CostProfile) -> float:
    if group.npu_time is not None:
        return group.npu_time
    return npu_time_of(profile, len(group.heads))


def form_groups(head_buckets: Sequence[int]) -> list[FusedGroup]:
    """Group heads sharing a bucket, ordered by ascending bucket index."""
    members: dict[int, list[int]] = defaultdict(list)
    for head, bucket in enumerate(head_buckets):
        members[int(bucket)].append(head)
    return [FusedGroup(b, tuple(members[b])) for b in sorted(members)]


def singleton_groups(num_heads: int) -> list[FusedGroup]:
    return [FusedGroup(h, (h,)) for h in range(num_heads)]


@dataclass(frozen=True)
class Event:
    processor: str  # "npu" or "cpu"
    kind: str  # "npu", "topk" or "qkv"
    ident: int  # group position in npu_order for npu events, head id otherwise
    start: float
    finish: float


@dataclass
class Schedule:
    npu_order: list[FusedGroup]
    cpu_order: list[int]
    makespan: float
    lane: str = "three-clock"
    events: list[Event] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [
            {"processor": e.processor, "kind": e.kind, "id": e.ident, "start": e.start, "finish": e.finish}
            for e in self.events
        ]


@dataclass
class _Clock:
    npu: float = 0.0
    topk: float = 0.0
    qkv: float = 0.0

    def copy(self) -> "_Clock":
        return _Clock(self.npu, self.topk, self.qkv)


def _launch(clock: _Clock, cost: float, lane: str) -> tuple[float, float]:
    start = max(clock.npu, clock.qkv) if lane == "sequential" else clock.npu
    return start, start + cost


def _run_head(clock: _Clock, npu_ready: float, topk_t: float, qkv_t: float,
              lane: str) -> tuple[float, float, float, float]:
    """(topk_start, topk_finish, qkv_start, qkv_finish) for one head."""
    if lane == "three-clock":
        topk_start = max(npu_ready, clock.topk)
        topk_finish = topk_start + topk_t
        qkv_start = max(clock.qkv, topk_finish)
    else:
        topk_start = max(npu_ready, clock.qkv)
        topk_finish = topk_start + topk_t
        qkv_start = topk_finish
    return topk_start, topk_finish, qkv_start, qkv_start + qkv_t


def _check_lane(lane: str) -> None:
    if lane not in LANES:
        raise ValidationError(f"lane must be one of {LANES}, got {lane!r}")


def _cpu_plan(clock: _Clock, group: FusedGroup, profile: CostProfile, lane: str) -> tuple[list[int], _Clock]:
    """Greedy head order within one launched group (clock.npu is that group's finish)."""
    clock = clock.copy()
    order: list[int] = []
    remaining = sorted(group.heads)
    while remaining:
        t_min, chosen = INF, -1
        for head in remaining:
            *_, qkv_finish = _run_head(clock, clock.npu, profile.topk_times[head], profile.qkv_times[head], lane)
            if qkv_finish < t_min:
                t_min, chosen = qkv_finish, head
        _, topk_finish, _, qkv_finish = _run_head(
            clock, clock.npu, profile.topk_times[chosen], profile.qkv_times[chosen], lane
        )
        clock.topk, clock.qkv = topk_finish, qkv_finish
        order.append(chosen)
        remaining.remove(chosen)
    return order, clock


def _validate_groups(groups: Sequence[FusedGroup], profile: CostProfile) -> None:
    if not groups:
        raise ValidationError("need at least one fused group")
    heads = [h for g in groups for h in g.heads]
    if any(not g.heads for g in groups):
        raise ValidationError("fused groups must be non-empty")
    if len(set(heads)) != len(heads):
        raise ValidationError("a head appears in more than one group")
    if any(not 0 <= h < profile.num_heads for h in heads):
        raise ValidationError("group references a head outside the cost profile")


def plan_greedy(groups: Sequence[FusedGroup], profile: CostProfile, lane: str = "three-clock") -> Schedule:
    """Greedy pipeline planning.

    Each step tries every unscheduled group as the next launch, orders its
    heads greedily, and keeps the group whose resulting qkv clock is lowest.
    Ties keep the earlier group (list position) and the lower head id.
    O(G^2 * H^2) for G groups of up to H heads.
    """
    _check_lane(lane)
    _validate_groups(groups, profile)
    clock = _Clock()
    pending = list(range(len(groups)))
    npu_order: list[FusedGroup] = []
    cpu_order: list[int] = []
    while pending:
        t_min, chosen = INF, -1
        for gi in pending:
            trial = clock.copy()
            _, trial.npu = _launch(clock, launch_cost(groups[gi], profile), lane)
            _, after = _cpu_plan(trial, groups[gi], profile, lane)
            if after.qkv < t_min:
                t_min, chosen = after.qkv, gi
        group = groups[chosen]
        _, clock.npu = _launch(clock, launch_cost(group, profile), lane)
        order, clock = _cpu_plan(clock, group, profile, lane)
        npu_order.append(group)
        cpu_order.extend(order)
        pending.remove(chosen)
    return _realize(npu_order, cpu_order, profile, lane, clock.qkv)


def plan_sequential(groups: Sequence[FusedGroup], profile: CostProfile) -> Schedule:
    """Fully serialized baseline: groups and heads in the given order, no overlap."""
    _validate_groups(groups, profile)
    cpu_order = [h for g in groups for h in g.heads]
    result = _replay(list(groups), cpu_order, profile, "sequential")
    return Schedule(list(groups), cpu_order, result[0], "sequential", result[1])


def serialized_makespan(groups: Sequence[FusedGroup], profile: CostProfile) -> float:
    return plan_sequential(groups, profile).makespan


def permutation_count(groups: Sequence[FusedGroup]) -> int:
    count = math.factorial(len(groups))
    for g in groups:
        count *= math.factorial(len(g.heads))
    return count


def plan_bruteforce(groups: Sequence[FusedGroup], profile: CostProfile, lane: str = "three-clock",
                    limit: int = DEFAULT_PERMUTATION_LIMIT) -> Schedule:
    """Minimum-makespan schedule over every group order and every within-group head order.

    Same recurrences as the greedy planner. Branches whose partial qkv clock
    already reaches the best makespan are cut; this cannot discard a strictly
    better schedule because the qkv clock never decreases. Ties keep the
    first schedule in lexicographic enumeration order.
    """
    _check_lane(lane)
    _validate_groups(groups, profile)
    total = permutation_count(groups)
    if total > limit:
        raise PlanningLimitError(f"{total} orderings exceed the limit of {limit}")
    head_perms = [list(itertools.permutations(sorted(g.heads))) for g in groups]
    best: list = [INF, None, None]

    def descend(clock: _Clock, remaining: list[int], npu_order: list[int], cpu_order: list[int]) -> None:
        if clock.qkv >= best[0]:
            return
        if not remaining:
            best[:] = [clock.qkv, list(npu_order), list(cpu_order)]
            return
        for gi in remaining:
            launched = clock.copy()
            _, launched.npu = _launch(clock, launch_cost(groups[gi], profile), lane)
            rest = [g for g in remaining if g != gi]
            for perm in head_perms[gi]:
                c = launched.copy()
                for head in perm:
                    _, c.topk, _, c.qkv = _run_head(c, c.npu, profile.topk_times[head], profile.qkv_times[head], lane)
                descend(c, rest, npu_order + [gi], cpu_order + list(perm))

    descend(_Clock(), list(range(len(groups))), [], [])
    return _realize([groups[i] for i in best[1]], best[2], profile, lane, best[0])


def _replay(npu_order: list[FusedGroup], cpu_order: list[int], profile: CostProfile,
            lane: str) -> tuple[float, list[Event]]:
    """Recompute every event time from the two orders alone."""
    _check_lane(lane)
    group_of: dict[int, int] = {}
    for gi, g in enumerate(npu_order):
        for h in g.heads:
            if h in group_of:
                raise ScheduleError(f"head {h} appears in two launches")
            group_of[h] = gi
    if sorted(cpu_order) != sorted(group_of):
        raise ScheduleError("cpu order and accelerator launches cover different heads")
    events: list[Event] = []
    clock = _Clock()
    npu_finish: list[float] = []
    if lane == "sequential":
        pos = 0
        for gi, g in enumerate(npu_order):
            start, clock.npu = _launch(clock, launch_cost(g, profile), lane)
            events.append(Event("npu", "npu", gi, start, clock.npu))
            block = cpu_order[pos:pos + len(g.heads)]
            if sorted(block) != sorted(g.heads):
                raise ScheduleError("sequential schedule must run each launch's heads contiguously")
            pos += len(g.heads)
            for h in block:
                ts, tf, qs, qf = _run_head(clock, clock.npu, profile.topk_times[h], profile.qkv_times[h], lane)
                events += [Event("cpu", "topk", h, ts, tf), Event("cpu", "qkv", h, qs, qf)]
                clock.topk, clock.qkv = tf, qf
        return clock.qkv, events
    for gi, g in enumerate(npu_order):
        start, clock.npu = _launch(clock, launch_cost(g, profile), lane)
        npu_finish.append(clock.npu)
        events.append(Event("npu", "npu", gi, start, clock.npu))
    for h in cpu_order:
        ts, tf, qs, qf = _run_head(clock, npu_finish[group_of[h]], profile.topk_times[h], profile.qkv_times[h], lane)
        events += [Event("cpu", "topk", h, ts, tf), Event("cpu", "qkv", h, qs, qf)]
        clock.topk, clock.qkv = tf, qf
    makespan = max(e.finish for e in events if e.kind == "qkv")
    return makespan, events


def _realize(npu_order, cpu_order, profile, lane, planned_makespan) -> Schedule:
    replayed, events = _replay(npu_order, cpu_order, profile, lane)
    if replayed != planned_makespan:
        raise ScheduleError(f"planner makespan {planned_makespan} != replay {replayed}")
    return Schedule(list(npu_order), list(cpu_order), planned_makespan, lane, events)


def _lane_key(event: Event, lane: str) -> str:
    if lane == "three-clock":
        return event.kind
    if lane == "single":
        return event.processor
    return "all"


def check_events(schedule: Schedule) -> None:
    """Raise ScheduleError unless stage dependencies and lane exclusivity hold."""
    finish: dict[tuple[str, int], float] = {}
    for e in schedule.events:
        if e.finish < e.start:
            raise ScheduleError(f"{e.kind} {e.ident} finishes before it starts")
        finish[(e.kind, e.ident)] = e.finish
    for gi, g in enumerate(schedule.npu_order):
        for h in g.heads:
            if ("topk", h) not in finish or ("qkv", h) not in finish or ("npu", gi) not in finish:
                raise ScheduleError(f"head {h} is missing events")
    launch_of = {h: gi for gi, g in enumerate(schedule.npu_order) for h in g.heads}
    by_id = {(e.kind, e.ident): e for e in schedule.events}
    for h, gi in launch_of.items():
        if by_id[("topk", h)].start < finish[("npu", gi)]:
            raise ScheduleError(f"topk of head {h} starts before its launch finishes")
        if by_id[("qkv", h)].start < finish[("topk", h)]:
            raise ScheduleError(f"qkv of head {h} starts before its topk finishes")
    lanes: dict[str, list[Event]] = defaultdict(list)
    for e in schedule.events:
        key = "npu" if e.processor == "npu" and schedule.lane != "sequential" else _lane_key(e, schedule.lane)
        lanes[key].append(e)
    for key, evs in lanes.items():
        evs = sorted(evs, key=lambda e: (e.start, e.finish))
        for a, b in zip(evs, evs[1:]):
            if b.start < a.finish:
                raise ScheduleError(f"lane {key}: {a.kind} {a.ident} overlaps {b.kind} {b.ident}")


@dataclass(frozen=True)
class SimResult:
    makespan: float
    busy: dict
    bubble: dict
    breakdown: dict


def simulate(schedule: Schedule, profile: CostProfile) -> SimResult:
    """Replay a schedule from its orders and report utilisation.

    The stored events are checked first (dependencies, one event per lane at
    a time), then recomputed from the orders; any disagreement with the
    planner's figures raises ScheduleError. `breakdown` gives each stage's
    share of total busy time.
    """
    if schedule.events:
        check_events(schedule)
    makespan, events = _replay(schedule.npu_order, schedule.cpu_order, profile, schedule.lane)
    if makespan != schedule.makespan:
        raise ScheduleError(f"schedule claims makespan {schedule.makespan}, replay gives {makespan}")
    if schedule.events and sorted(schedule.events, key=_sort_key) != sorted(events, key=_sort_key):
        raise ScheduleError("stored event times disagree with replay")
    check_events(Schedule(schedule.npu_order, schedule.cpu_order, makespan, schedule.lane, events))
    per_kind: dict[str, float] = defaultdict(float)
    busy: dict[str, float] = defaultdict(float)
    for e in events:
        per_kind[e.kind] += e.finish - e.start
        if e.kind == "npu":
            busy["npu"] += e.finish - e.start
        else:
            busy[e.kind if schedule.lane == "three-clock" else "cpu"] += e.finish - e.start
    total = sum(per_kind.values())
    breakdown = {k: per_kind[k] / total for k in ("npu", "topk", "qkv")}
    bubble = {k: makespan - v for k, v in busy.items()}
    return SimResult(makespan, dict(busy), bubble, breakdown)


def _sort_key(e: Event):
    return (e.kind, e.ident, e.start, e.finish)


def load_profile(path: Union[str, Path]) -> tuple[CostProfile, Optional[list[int]]]:
    """Cost profile JSON; an optional `head_buckets` list gives the fused grouping."""
    doc = json.loads(Path(path).read_text())
    buckets = doc.pop("head_buckets", None)
    return CostProfile.from_dict(doc), buckets


def save_profile(profile: CostProfile, path: Union[str, Path], head_buckets: Optional[Sequence[int]] = None) -> None:
    doc = profile.to_dict()
    if head_buckets is not None:
        doc["head_buckets"] = list(head_buckets)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
