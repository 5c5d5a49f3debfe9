"""Offline plan search and the per-step phase controller for KV scheduling.

A plan ``(alpha, beta, p1, p2)`` splits decoding into three phases:

* Phase I (``j < p1``): all KV stays on the device.
* Phase II (``p1 <= j < p2``): the oldest non-local tokens are kept on the
  host so that ``ceil(alpha * (s + j))`` tokens live off-device; selected host
  tokens are staged back for the step and dropped afterwards.
* Phase III (``j >= p2``): additionally ``ceil(beta * off_device)`` of the
  oldest host tokens are deleted and recomputed only when selected.

``predict_total_time`` evaluates a plan with an integer count recurrence.
``replay_plan`` runs the same plan against a real :class:`KvLedger` and is
used as the cross-check for the recurrence.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from swakv.attention import SparseSelection, SparsityConfig, selection_counts
from swakv.mathops import ContractViolation
from swakv.memsim import (
    CostParams,
    KvLedger,
    Tier,
    compute_time,
    prefill_compute_time,
    recompute_time,
    token_kv_bytes,
    transfer_time,
)

GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
SWEEPS = 2


class InfeasiblePlan(RuntimeError):
    """No schedule can keep the device residency within capacity."""


@dataclass(frozen=True)
class SchedulePlan:
    alpha: float
    beta: float
    p1: int
    p2: int
    predicted_total_seconds: float = math.nan
    breakdown: dict = field(default_factory=dict, compare=False)
    policy: str = "dynamic"

    def phase(self, j: int) -> str:
        if j >= self.p2:
            return "III"
        if j >= self.p1:
            return "II"
        return "I"

    def replace(self, **changes) -> SchedulePlan:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "alpha": self.alpha,
            "beta": self.beta,
            "p1": self.p1,
            "p2": self.p2,
            "predicted_total_seconds": self.predicted_total_seconds,
            "breakdown": dict(self.breakdown),
        }


@dataclass
class StepActions:
    phase: str
    offload: list[int] = field(default_factory=list)
    delete: list[int] = field(default_factory=list)
    reload: list[int] = field(default_factory=list)
    recompute: list[int] = field(default_factory=list)


def frac_ceil(frac: float, count: int) -> int:
    # round first so grid values like 0.15 * 20 do not ceil up to 4
    return math.ceil(round(frac * count, 9))


def validate_plan(plan: SchedulePlan, n: int) -> None:
    if not (0 <= plan.p1 <= plan.p2 <= n):
        raise ContractViolation(f"plan phase switches must satisfy 0 <= p1 <= p2 <= n={n}")
    if plan.p1 == plan.p2 and plan.p1 != n:
        raise ContractViolation("p1 == p2 is only allowed for the all-Phase-I plan (p1 = p2 = n)")
    if not (0.0 <= plan.alpha <= 1.0 and 0.0 <= plan.beta <= 1.0):
        raise ContractViolation("alpha and beta must lie in [0, 1]")


def sparsity_of(p: CostParams) -> SparsityConfig:
    return SparsityConfig(variant=p.variant, ratio=p.r, stride=p.stride)


def _hits(global_picks: int, pool: int, host: int, deleted: int) -> tuple[int, int]:
    """Modelled selected tokens on host / deleted when picks spread evenly over the pool."""
    if pool <= 0 or global_picks <= 0:
        return 0, 0
    recompute = global_picks * deleted // pool
    reload = global_picks * (host + deleted) // pool - recompute
    return reload, recompute


def _breakdown(plan: SchedulePlan, p: CostParams) -> dict:
    validate_plan(plan, p.n)
    cfg = sparsity_of(p)
    slots = p.device_capacity / token_kv_bytes(p, layers=1)  # per-layer entries that fit
    out = {
        "prefill_seconds": prefill_compute_time(p),
        "compute_seconds": 0.0,
        "transfer_seconds": 0.0,
        "recompute_seconds": 0.0,
        "feasible": p.l * p.s <= slots * (1 + 1e-12),
    }
    host = deleted = 0
    for j in range(p.n):
        cached = p.s + j
        n_seq = cached + 1
        selected, local = selection_counts(cfg, n_seq)
        pool = n_seq - local
        offloaded = 0
        if j >= plan.p1:
            target = min(frac_ceil(plan.alpha, cached), max(0, pool))
            offloaded = max(0, target - host - deleted)
            host += offloaded
            if j >= plan.p2:
                drop = max(0, frac_ceil(plan.beta, host + deleted) - deleted)
                host -= drop
                deleted += drop
        device = cached - host - deleted
        picks = selected - local
        reload, recompute = _hits(picks, pool, host, deleted)
        worst_staged = min(picks, host + deleted)
        if p.l * (device + 1) + worst_staged > slots * (1 + 1e-12):
            out["feasible"] = False
        out["compute_seconds"] += compute_time(p, selected)
        out["transfer_seconds"] += transfer_time(p, offloaded, reload)
        out["recompute_seconds"] += recompute_time(p, recompute)
    out["total_seconds"] = (
        out["prefill_seconds"] + out["compute_seconds"] + out["transfer_seconds"]
        + out["recompute_seconds"]
    )
    return out


def predict_breakdown(plan: SchedulePlan, p: CostParams) -> dict:
    return _breakdown(plan, p)


def predict_total_time(plan: SchedulePlan, p: CostParams) -> float:
    """Modelled end-to-end seconds, or ``inf`` when the plan overflows the device."""
    out = _breakdown(plan, p)
    return out["total_seconds"] if out["feasible"] else math.inf


def capacity_switch_step(p: CostParams) -> int:
    """First decode step whose full KV no longer fits on the device (``n`` if never)."""
    per_token = token_kv_bytes(p)
    for j in range(p.n):
        if (p.s + j + 1) * per_token > p.device_capacity * (1 + 1e-12):
            return j
    return p.n


def _check_feasible_at_all(p: CostParams) -> None:
    if token_kv_bytes(p) > p.device_capacity:
        raise InfeasiblePlan(
            f"one token's KV ({token_kv_bytes(p):.0f} B) exceeds device capacity "
            f"({p.device_capacity:.0f} B)"
        )
    if p.s * token_kv_bytes(p) > p.device_capacity * (1 + 1e-12):
        raise InfeasiblePlan(
            f"prompt KV ({p.s * token_kv_bytes(p):.0f} B) does not fit in device capacity "
            f"({p.device_capacity:.0f} B)"
        )


def _finish(plan: SchedulePlan, p: CostParams) -> SchedulePlan:
    out = _breakdown(plan, p)
    total = out["total_seconds"] if out["feasible"] else math.inf
    return plan.replace(predicted_total_seconds=total, breakdown=out)


def solve_plan(p: CostParams) -> SchedulePlan:
    """Greedy search with ``p1`` fixed by capacity.

    Alternates between the offload ratio and the joint ``(beta, p2)``
    recompute coordinate on the 0.05 grid for :data:`SWEEPS` sweeps, starting
    from the smallest feasible offload ratio without recomputation.
    """
    _check_feasible_at_all(p)
    p1 = capacity_switch_step(p)
    if p1 >= p.n:
        return _finish(SchedulePlan(0.0, 0.0, p.n, p.n), p)

    p2_values = tuple(range(p1 + 1, p.n + 1))
    cache: dict[tuple, float] = {}

    def cost(alpha, beta, p2):
        key = (alpha, beta if p2 < p.n else None, p2)
        if key not in cache:
            cache[key] = predict_total_time(SchedulePlan(alpha, beta, p1, p2), p)
        return cache[key]

    start = None
    for alpha in GRID:
        for p2 in reversed(p2_values):
            if cost(alpha, 0.5, p2) < math.inf:
                start = (alpha, 0.5, p2)
                break
        if start:
            break
    if start is None:
        raise InfeasiblePlan("no offload ratio on the search grid keeps the device within capacity")

    alpha, beta, p2 = start
    best = cost(alpha, beta, p2)
    # beta only matters once Phase III starts, so (beta, p2) move together
    for _ in range(SWEEPS):
        for a in GRID:
            c = cost(a, beta, p2)
            if c < best:
                alpha, best = a, c
        for bt in GRID:
            for q in p2_values:
                c = cost(alpha, bt, q)
                if c < best:
                    beta, p2, best = bt, q, c
    return _finish(SchedulePlan(alpha, beta, p1, p2), p)


def static_split_plan(p: CostParams) -> SchedulePlan:
    """Fixed host fraction for the whole run, sized for the longest sequence."""
    _check_feasible_at_all(p)
    if p.n == 0:
        return _finish(SchedulePlan(0.0, 0.0, 0, 0, policy="static"), p)
    for alpha in (0.0,) + GRID + (1.0,):
        plan = SchedulePlan(alpha, 0.0, 0, p.n, policy="static")
        if predict_total_time(plan, p) < math.inf:
            return _finish(plan, p)
    raise InfeasiblePlan("even keeping every non-local token on the host overflows the device")


def all_host_plan(p: CostParams) -> SchedulePlan:
    _check_feasible_at_all(p)
    plan = _finish(SchedulePlan(1.0, 0.0, 0, p.n, policy="all_host"), p)
    if plan.predicted_total_seconds == math.inf:
        raise InfeasiblePlan("staging the selected host tokens overflows the device")
    return plan


def all_device_plan(p: CostParams) -> SchedulePlan:
    return _finish(SchedulePlan(0.0, 0.0, p.n, p.n, policy="all_device"), p)


def without_recompute(plan: SchedulePlan, p: CostParams) -> SchedulePlan:
    """Same plan with Phase III disabled."""
    p2 = p.n if plan.p1 < p.n else plan.p2
    return _finish(plan.replace(p2=p2, policy=plan.policy + "_norecompute"), p)


POLICIES = {
    "dynamic": solve_plan,
    "static": static_split_plan,
    "all_host": all_host_plan,
    "all_device": all_device_plan,
}


def make_plan(policy: str, p: CostParams) -> SchedulePlan:
    if policy == "no_recompute":
        return without_recompute(solve_plan(p), p)
    try:
        return POLICIES[policy](p)
    except KeyError:
        raise ContractViolation(f"unknown scheduling policy {policy!r}") from None


# -- runtime controller ------------------------------------------------------

def eviction_actions(
    plan: SchedulePlan, j: int, ledger: KvLedger, layer: int, local_count: int, s: int
) -> StepActions:
    """Offload/delete sets that restore the plan's split before step ``j`` computes."""
    phase = plan.phase(j)
    actions = StepActions(phase)
    if phase == "I":
        return actions
    cached = s + j
    nonlocal_limit = cached + 1 - local_count
    host = ledger.tokens_on(layer, Tier.HOST)
    deleted = ledger.tokens_on(layer, Tier.DELETED)
    target = min(frac_ceil(plan.alpha, cached), max(0, nonlocal_limit))
    need = max(0, target - len(host) - len(deleted))
    if need:
        candidates = [t for t in ledger.tokens_on(layer, Tier.DEVICE) if t < nonlocal_limit]
        actions.offload = candidates[:need]
    if phase == "III":
        host_after = sorted(host + actions.offload)
        drop = max(0, frac_ceil(plan.beta, len(host_after) + len(deleted)) - len(deleted))
        actions.delete = host_after[:drop]
    return actions


def load_actions(selection: SparseSelection, ledger: KvLedger, layer: int, actions: StepActions) -> StepActions:
    """Fill reload/recompute sets for the selected tokens given the post-eviction tiers."""
    offloaded = set(actions.offload)
    deleted = set(actions.delete)
    for t in selection.indices:
        if (layer, t) not in ledger.entries:
            continue  # the current token, computed this step
        if t in deleted:
            actions.recompute.append(t)
            continue
        tier = Tier.HOST if t in offloaded else ledger.tier(layer, t)
        if tier is Tier.HOST:
            actions.reload.append(t)
        elif tier is Tier.DELETED:
            actions.recompute.append(t)
    return actions


def step_actions(
    plan: SchedulePlan, j: int, selection: SparseSelection, ledger: KvLedger, layer: int, s: int
) -> StepActions:
    if j >= ledger.params.n:
        raise ContractViolation(f"step {j} is past the planned output length {ledger.params.n}")
    actions = eviction_actions(plan, j, ledger, layer, len(selection.local_indices), s)
    return load_actions(selection, ledger, layer, actions)


def apply_evictions(ledger: KvLedger, layer: int, actions: StepActions) -> None:
    if actions.offload:
        ledger.offload(layer, actions.offload)
    if actions.delete:
        ledger.delete(layer, actions.delete)


def _modelled_selection(p: CostParams, ledger: KvLedger, layer: int, n_seq: int) -> SparseSelection:
    selected, local = selection_counts(sparsity_of(p), n_seq)
    pool = n_seq - local
    picks = selected - local
    host = ledger.tokens_on(layer, Tier.HOST)
    deleted = ledger.tokens_on(layer, Tier.DELETED)
    reload, recompute = _hits(picks, pool, len(host), len(deleted))
    device = [t for t in ledger.tokens_on(layer, Tier.DEVICE) if t < pool]
    chosen = deleted[:recompute] + host[:reload] + device[: picks - reload - recompute]
    return SparseSelection(tuple(range(pool, n_seq)), tuple(sorted(chosen)), local)


def replay_plan(plan: SchedulePlan, p: CostParams) -> KvLedger:
    """Drive a ledger through ``plan`` with selections that match the cost model's hit counts.

    Raises :class:`~swakv.memsim.OutOfDeviceMemory` if the plan overflows.
    """
    validate_plan(plan, p.n)
    ledger = KvLedger(p)
    rec = ledger.clock.begin(-1, "prefill")
    rec.compute_seconds += prefill_compute_time(p)
    for layer in range(p.l):
        ledger.store(layer, range(p.s))
    for j in range(p.n):
        ledger.clock.begin(j, plan.phase(j))
        n_seq = p.s + j + 1
        _, local = selection_counts(sparsity_of(p), n_seq)
        for layer in range(p.l):
            apply_evictions(ledger, layer, eviction_actions(plan, j, ledger, layer, local, p.s))
        for layer in range(p.l):
            selection = _modelled_selection(p, ledger, layer, n_seq)
            actions = load_actions(selection, ledger, layer, StepActions(plan.phase(j)))
            run_layer_step(ledger, layer, p.s + j, selection, actions)
    return ledger


def run_layer_step(
    ledger: KvLedger, layer: int, position: int, selection: SparseSelection, actions: StepActions
) -> None:
    """Stage, compute, store and un-stage one layer of one decode step."""
    if actions.reload:
        ledger.reload(layer, actions.reload)
    if actions.recompute:
        ledger.recompute(layer, actions.recompute)
    ledger.charge_compute(len(selection))
    ledger.clock.current.kept_tokens += len(selection)
    ledger.store(layer, [position])
    if actions.reload:
        ledger.release(layer, actions.reload)
    if actions.recompute:
        ledger.delete(layer, actions.recompute)
