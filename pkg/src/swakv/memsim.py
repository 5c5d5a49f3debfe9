"""Two-tier (device/host) memory simulator for token-granular KV caching.

The ledger tracks every ``(layer, token)`` KV entry, enforces the device
capacity after each mutation and charges simulated seconds through the
analytic cost functions below. Transfers are synchronous and never overlap
with compute.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import math
from dataclasses import dataclass, field

from swakv.attention import VARIANTS
from swakv.mathops import ContractViolation

LEDGER_CSV_SCHEMA = "swakv.ledger/v1"


class OutOfDeviceMemory(RuntimeError):
    """Simulated device OOM: a mutation would exceed ``device_capacity``."""


class Tier(enum.Enum):
    DEVICE = "device"
    HOST = "host"
    DELETED = "deleted"


@dataclass(frozen=True)
class CostParams:
    """Workload shape, hardware constants and attention sparsity for the cost model.

    ``h``, ``l``, ``b``, ``s``, ``n``, ``r`` and ``bandwidth`` (bytes/s) follow
    the usual notation. ``mac_rate`` is simulated multiply-accumulates per
    second and ``recompute_overhead`` scales the cost of re-projecting KV.
    ``variant``/``stride`` describe the attention pattern so the scheduler can
    count selected tokens per step.
    """

    h: int
    l: int
    b: int = 1
    s: int = 8
    n: int = 16
    r: float = 1.0
    bandwidth: float = 20e9
    bytes_per_element: float = 2.0
    device_capacity: float = math.inf
    mac_rate: float = 1e12
    recompute_overhead: float = 1.0
    variant: str = "swa"
    stride: int | None = None

    def __post_init__(self):
        for name in ("h", "l", "b", "s"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n < 0:
            raise ContractViolation(f"n must be >= 0, got {self.n}")
        if not (0.0 < self.r <= 1.0):
            raise ContractViolation(f"r must lie in (0, 1], got {self.r}")
        for name in ("bandwidth", "bytes_per_element", "mac_rate"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if self.device_capacity < 0:
            raise ContractViolation(f"device_capacity must be >= 0, got {self.device_capacity}")
        if self.recompute_overhead < 1.0:
            raise ContractViolation("recompute_overhead must be >= 1")
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown attention variant {self.variant!r}")

    def replace(self, **changes) -> CostParams:
        return dataclasses.replace(self, **changes)


def token_kv_bytes(p: CostParams, layers: int | None = None) -> float:
    """Bytes of K and V for one token across ``layers`` (all layers by default)."""
    layers = p.l if layers is None else layers
    return 2 * p.bytes_per_element * p.b * layers * p.h


def transfer_time(p: CostParams, theta_c: float, theta_g: float, layers: int | None = None) -> float:
    if theta_c < 0 or theta_g < 0:
        raise ContractViolation("token counts must be non-negative")
    if theta_c + theta_g == 0:
        return 0.0
    return token_kv_bytes(p, layers) * (theta_c + theta_g) / p.bandwidth


def compute_time(p: CostParams, kept_tokens: float, layers: int | None = None) -> float:
    """QK^T plus AW.V multiply-accumulates for one query over ``kept_tokens`` keys."""
    layers = p.l if layers is None else layers
    return 2 * p.b * layers * p.h * kept_tokens / p.mac_rate


def recompute_time(p: CostParams, recomputed_tokens: float, layers: int | None = None) -> float:
    """Re-projecting K and V (two h x h products per token) from kept activations."""
    layers = p.l if layers is None else layers
    macs = 2 * p.b * layers * p.h * p.h * recomputed_tokens
    return p.recompute_overhead * macs / p.mac_rate


def prefill_compute_time(p: CostParams) -> float:
    # causal triangle: query i attends to i + 1 keys
    return compute_time(p, p.s * (p.s + 1) / 2)


@dataclass
class KvEntry:
    tier: Tier
    nbytes: float
    host_copy: bool = False  # a clean copy also sits on the host (device entry staged by reload)
    precision: str = "fp16"


@dataclass
class StepRecord:
    step: int
    phase: str = "I"
    offloaded_tokens: int = 0
    reloaded_tokens: int = 0
    deleted_tokens: int = 0
    recomputed_tokens: int = 0
    kept_tokens: int = 0
    compute_seconds: float = 0.0
    transfer_seconds: float = 0.0
    recompute_seconds: float = 0.0
    device_bytes: float = 0.0
    host_bytes: float = 0.0
    peak_device_bytes: float = 0.0

    @property
    def total_seconds(self) -> float:
        return self.compute_seconds + self.transfer_seconds + self.recompute_seconds


@dataclass
class TransferLedger:
    """Per-step simulated time split into compute, transfer and recompute."""

    steps: list[StepRecord] = field(default_factory=list)

    def begin(self, step: int, phase: str = "I") -> StepRecord:
        rec = StepRecord(step=step, phase=phase)
        self.steps.append(rec)
        return rec

    @property
    def current(self) -> StepRecord:
        if not self.steps:
            raise ContractViolation("no simulated step has begun")
        return self.steps[-1]

    def totals(self) -> dict[str, float]:
        out = {"compute_seconds": 0.0, "transfer_seconds": 0.0, "recompute_seconds": 0.0}
        for rec in self.steps:
            out["compute_seconds"] += rec.compute_seconds
            out["transfer_seconds"] += rec.transfer_seconds
            out["recompute_seconds"] += rec.recompute_seconds
        out["total_seconds"] = sum(out.values())
        return out


class KvLedger:
    """Residency of every ``(layer, token)`` KV entry across device and host.

    Every mutation is all-or-nothing: the resulting device residency is
    checked first and :class:`OutOfDeviceMemory` leaves the ledger untouched.
    Each call returns the simulated seconds it charged to the current step.
    """

    def __init__(self, params: CostParams, precision: str = "fp16"):
        self.params = params
        self.precision = precision
        self.entry_bytes = token_kv_bytes(params, layers=1)
        self.entries: dict[tuple[int, int], KvEntry] = {}
        self._by_layer: dict[int, dict[int, KvEntry]] = {}
        self.device_bytes = 0.0
        self.host_bytes = 0.0
        self.peak_device_bytes = 0.0
        self.clock = TransferLedger()
        self.transferred_bytes = 0.0

    # -- queries ---------------------------------------------------------
    def tier(self, layer: int, token: int) -> Tier:
        return self.entries[(layer, token)].tier

    def tokens_on(self, layer: int, tier: Tier) -> list[int]:
        return sorted(t for t, e in self._by_layer.get(layer, {}).items() if e.tier is tier)

    def count(self, layer: int, tier: Tier) -> int:
        return sum(1 for e in self._by_layer.get(layer, {}).values() if e.tier is tier)

    def _record(self) -> StepRecord | None:
        return self.clock.steps[-1] if self.clock.steps else None

    def _check_fits(self, extra: float) -> None:
        cap = self.params.device_capacity
        # tolerate float noise from byte sums made of non-integer element sizes
        if self.device_bytes + extra > cap * (1 + 1e-12):
            raise OutOfDeviceMemory(
                f"device residency {self.device_bytes + extra:.0f} B would exceed "
                f"capacity {cap:.0f} B"
            )

    def _touch(self) -> None:
        self.peak_device_bytes = max(self.peak_device_bytes, self.device_bytes)
        rec = self._record()
        if rec is not None:
            rec.device_bytes = self.device_bytes
            rec.host_bytes = self.host_bytes
            rec.peak_device_bytes = max(rec.peak_device_bytes, self.device_bytes)

    def _entries(self, layer: int, tokens, expect: tuple[Tier, ...], op: str) -> list[KvEntry]:
        out = []
        for t in tokens:
            e = self.entries.get((layer, t))
            if e is None:
                raise ContractViolation(f"{op}: no KV entry for layer {layer} token {t}")
            if e.tier not in expect:
                raise ContractViolation(
                    f"{op}: layer {layer} token {t} is {e.tier.value}, expected "
                    + "/".join(x.value for x in expect)
                )
            out.append(e)
        return out

    # -- mutations -------------------------------------------------------
    def store(self, layer: int, tokens) -> float:
        """Place freshly computed KV on the device (no transfer)."""
        tokens = list(tokens)
        for t in tokens:
            if (layer, t) in self.entries:
                raise ContractViolation(f"store: layer {layer} token {t} already cached")
        self._check_fits(self.entry_bytes * len(tokens))
        per_layer = self._by_layer.setdefault(layer, {})
        for t in tokens:
            entry = KvEntry(Tier.DEVICE, self.entry_bytes, precision=self.precision)
            self.entries[(layer, t)] = entry
            per_layer[t] = entry
        self.device_bytes += self.entry_bytes * len(tokens)
        self._touch()
        return 0.0

    def offload(self, layer: int, tokens) -> float:
        """Device -> host. Entries that already have a clean host copy move for free."""
        entries = self._entries(layer, list(tokens), (Tier.DEVICE,), "offload")
        dirty = sum(1 for e in entries if not e.host_copy)
        for e in entries:
            e.tier = Tier.HOST
            if not e.host_copy:
                self.host_bytes += e.nbytes
            e.host_copy = False
            self.device_bytes -= e.nbytes
        seconds = transfer_time(self.params, dirty, 0, layers=1)
        self.transferred_bytes += dirty * self.entry_bytes
        rec = self._record()
        if rec is not None:
            rec.offloaded_tokens += dirty
            rec.transfer_seconds += seconds
        self._touch()
        return seconds

    def reload(self, layer: int, tokens) -> float:
        """Host -> device; the host keeps its copy so a later :meth:`release` is free."""
        entries = self._entries(layer, list(tokens), (Tier.HOST,), "reload")
        self._check_fits(sum(e.nbytes for e in entries))
        for e in entries:
            e.tier = Tier.DEVICE
            e.host_copy = True
            self.device_bytes += e.nbytes
        seconds = transfer_time(self.params, 0, len(entries), layers=1)
        self.transferred_bytes += len(entries) * self.entry_bytes
        rec = self._record()
        if rec is not None:
            rec.reloaded_tokens += len(entries)
            rec.transfer_seconds += seconds
        self._touch()
        return seconds

    def release(self, layer: int, tokens) -> float:
        """Drop device copies of reloaded entries; the host copy stays authoritative."""
        entries = self._entries(layer, list(tokens), (Tier.DEVICE,), "release")
        for t, e in zip(tokens, entries):
            if not e.host_copy:
                raise ContractViolation(f"release: layer {layer} token {t} has no host copy")
        for e in entries:
            e.tier = Tier.HOST
            e.host_copy = False
            self.device_bytes -= e.nbytes
        self._touch()
        return 0.0

    def delete(self, layer: int, tokens) -> float:
        """Free an entry on whichever tier holds it. Costs no transfer."""
        entries = self._entries(layer, list(tokens), (Tier.DEVICE, Tier.HOST), "delete")
        deleted_from_host = 0
        for e in entries:
            if e.tier is Tier.DEVICE:
                self.device_bytes -= e.nbytes
                if e.host_copy:
                    self.host_bytes -= e.nbytes
            else:
                self.host_bytes -= e.nbytes
                deleted_from_host += 1
            e.tier = Tier.DELETED
            e.host_copy = False
        rec = self._record()
        if rec is not None:
            rec.deleted_tokens += deleted_from_host
        self._touch()
        return 0.0

    def recompute(self, layer: int, tokens) -> float:
        """Rebuild deleted entries on the device, charging re-projection time."""
        entries = self._entries(layer, list(tokens), (Tier.DELETED,), "recompute")
        self._check_fits(sum(e.nbytes for e in entries))
        for e in entries:
            e.tier = Tier.DEVICE
            self.device_bytes += e.nbytes
        seconds = recompute_time(self.params, len(entries), layers=1)
        rec = self._record()
        if rec is not None:
            rec.recomputed_tokens += len(entries)
            rec.recompute_seconds += seconds
        self._touch()
        return seconds

    def charge_compute(self, kept_tokens: float, layers: int = 1) -> float:
        seconds = compute_time(self.params, kept_tokens, layers=layers)
        rec = self._record()
        if rec is not None:
            rec.compute_seconds += seconds
        return seconds

    # -- export ----------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([LEDGER_CSV_SCHEMA, "phase", "device_bytes", "host_bytes", "peak_device_bytes",
                    "offloaded_tokens", "reloaded_tokens", "deleted_tokens", "recomputed_tokens",
                    "compute_s", "transfer_s", "recompute_s"])
        for rec in self.clock.steps:
            w.writerow([rec.step, rec.phase, repr(rec.device_bytes), repr(rec.host_bytes),
                        repr(rec.peak_device_bytes), rec.offloaded_tokens, rec.reloaded_tokens,
                        rec.deleted_tokens, rec.recomputed_tokens, repr(rec.compute_seconds),
                        repr(rec.transfer_seconds), repr(rec.recompute_seconds)])
        return buf.getvalue()
