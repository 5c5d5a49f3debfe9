"""JSON run configuration with field-level validation.

Schema (every section and key optional, defaults shown by ``RunConfig()``)::

    {
      "model":      {"layers": 2, "heads": 2, "head_dim": 8, "vocab": 64,
                     "max_context": 1024, "skew": 0.0, "seed": 0},
      "workload":   {"batch": 1, "prompt_len": 8, "n": 16, "seed": 0,
                     "eos_id": null, "prompt": null},
      "sparsity":   {"variant": "swa", "ratio": 1.0, "stride": null},
      "scheduling": {"policy": "dynamic", "device_capacity": null,
                     "bandwidth": 2e10, "mac_rate": 1e12,
                     "recompute_overhead": 1.0, "quant_bits": null},
      "analysis":   {"collect_rho": false},
      "outputs":    {"report": "report.json", "steps": "steps.csv"}
    }

``device_capacity`` of null means unlimited. ``prompt`` overrides the seeded
random prompt; its length then wins over ``prompt_len``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from swakv.attention import VARIANTS, SparsityConfig
from swakv.engine import ModelShape, ToyModel
from swakv.mathops import make_rng
from swakv.memsim import CostParams
from swakv.quant import SUPPORTED_BITS

POLICY_NAMES = ("dynamic", "static", "all_host", "all_device", "no_recompute")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists one message per bad field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ModelSection:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    vocab: int = 64
    max_context: int = 1024
    skew: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class WorkloadSection:
    batch: int = 1
    prompt_len: int = 8
    n: int = 16
    seed: int = 0
    eos_id: int | None = None
    prompt: list[int] | None = None


@dataclass(frozen=True)
class SparsitySection:
    variant: str = "swa"
    ratio: float = 1.0
    stride: int | None = None


@dataclass(frozen=True)
class SchedulingSection:
    policy: str = "dynamic"
    device_capacity: float | None = None
    bandwidth: float = 20e9
    mac_rate: float = 1e12
    recompute_overhead: float = 1.0
    quant_bits: int | None = None


@dataclass(frozen=True)
class AnalysisSection:
    collect_rho: bool = False


@dataclass(frozen=True)
class OutputSection:
    report: str = "report.json"
    steps: str = "steps.csv"


SECTIONS = {
    "model": ModelSection,
    "workload": WorkloadSection,
    "sparsity": SparsitySection,
    "scheduling": SchedulingSection,
    "analysis": AnalysisSection,
    "outputs": OutputSection,
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _check(cfg: RunConfig) -> list[str]:
    errs = []
    m, w, sp, sc = cfg.model, cfg.workload, cfg.sparsity, cfg.scheduling

    def need_int(path, v, lo):
        if not _is_int(v) or v < lo:
            errs.append(f"{path}: expected integer >= {lo}, got {v!r}")

    def need_pos(path, v):
        if not _is_num(v) or v <= 0:
            errs.append(f"{path}: expected positive number, got {v!r}")

    for name in ("layers", "heads", "head_dim", "vocab", "max_context"):
        need_int(f"model.{name}", getattr(m, name), 1)
    if not _is_num(m.skew) or m.skew < 0:
        errs.append(f"model.skew: expected number >= 0, got {m.skew!r}")
    need_int("model.seed", m.seed, 0)
    need_int("workload.batch", w.batch, 1)
    need_int("workload.prompt_len", w.prompt_len, 1)
    need_int("workload.n", w.n, 0)
    need_int("workload.seed", w.seed, 0)
    if w.eos_id is not None and (not _is_int(w.eos_id) or not 0 <= w.eos_id < (m.vocab if _is_int(m.vocab) else 0)):
        errs.append(f"workload.eos_id: expected a token id in [0, vocab), got {w.eos_id!r}")
    if w.prompt is not None:
        if not isinstance(w.prompt, list) or not w.prompt:
            errs.append("workload.prompt: expected a non-empty list of token ids")
        elif not all(_is_int(t) and 0 <= t < (m.vocab if _is_int(m.vocab) else 0) for t in w.prompt):
            errs.append("workload.prompt: every token id must lie in [0, vocab)")
    if _is_int(m.max_context) and _is_int(w.n) and _is_int(w.prompt_len):
        total = len(w.prompt) if isinstance(w.prompt, list) and w.prompt else w.prompt_len
        if total + w.n > m.max_context:
            errs.append(f"workload.n: prompt + n = {total + w.n} exceeds model.max_context {m.max_context}")
    if sp.variant not in VARIANTS:
        errs.append(f"sparsity.variant: expected one of {list(VARIANTS)}, got {sp.variant!r}")
    if not _is_num(sp.ratio) or not 0 < sp.ratio <= 1:
        errs.append(f"sparsity.ratio: expected a number in (0, 1], got {sp.ratio!r}")
    if sp.stride is not None:
        need_int("sparsity.stride", sp.stride, 1)
    if sc.policy not in POLICY_NAMES:
        errs.append(f"scheduling.policy: expected one of {list(POLICY_NAMES)}, got {sc.policy!r}")
    if sc.device_capacity is not None and (not _is_num(sc.device_capacity) or sc.device_capacity < 0):
        errs.append(f"scheduling.device_capacity: expected number >= 0 or null, got {sc.device_capacity!r}")
    need_pos("scheduling.bandwidth", sc.bandwidth)
    need_pos("scheduling.mac_rate", sc.mac_rate)
    if not _is_num(sc.recompute_overhead) or sc.recompute_overhead < 1:
        errs.append(f"scheduling.recompute_overhead: expected number >= 1, got {sc.recompute_overhead!r}")
    if sc.quant_bits is not None and sc.quant_bits not in SUPPORTED_BITS:
        errs.append(f"scheduling.quant_bits: expected one of {list(SUPPORTED_BITS)} or null, got {sc.quant_bits!r}")
    if not isinstance(cfg.analysis.collect_rho, bool):
        errs.append(f"analysis.collect_rho: expected boolean, got {cfg.analysis.collect_rho!r}")
    for name in ("report", "steps"):
        if not isinstance(getattr(cfg.outputs, name), str) or not getattr(cfg.outputs, name):
            errs.append(f"outputs.{name}: expected a non-empty file name")
    return errs


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    sparsity: SparsitySection = field(default_factory=SparsitySection)
    scheduling: SchedulingSection = field(default_factory=SchedulingSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    outputs: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        errs = _check(self)
        if errs:
            raise ConfigError(errs)

    # -- construction ----------------------------------------------------
    @classmethod
    def from_dict(cls, data) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError(["config: expected a JSON object at the top level"])
        errs, sections = [], {}
        for key in data:
            if key not in SECTIONS:
                errs.append(f"{key}: unknown section")
        for key, section_cls in SECTIONS.items():
            raw = data.get(key, {})
            if not isinstance(raw, dict):
                errs.append(f"{key}: expected an object")
                continue
            known = {f.name for f in fields(section_cls)}
            for name in raw:
                if name not in known:
                    errs.append(f"{key}.{name}: unknown field")
            sections[key] = section_cls(**{k: v for k, v in raw.items() if k in known})
        try:
            cfg = cls(**sections)
        except ConfigError as exc:
            errs.extend(exc.errors)
        if errs:
            raise ConfigError(errs)
        return cfg

    @classmethod
    def from_file(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_changes(self, section: str, **changes) -> RunConfig:
        return replace(self, **{section: replace(getattr(self, section), **changes)})

    def with_seed(self, seed: int) -> RunConfig:
        """Same config with both the model and workload seeds set to ``seed``."""
        cfg = self.with_changes("model", seed=seed)
        return cfg.with_changes("workload", seed=seed)

    # -- accessors used by the engine -------------------------------------
    @property
    def policy(self) -> str:
        return self.scheduling.policy

    @property
    def quant_bits(self) -> int | None:
        return self.scheduling.quant_bits

    @property
    def collect_rho(self) -> bool:
        return self.analysis.collect_rho

    @property
    def n(self) -> int:
        return self.workload.n

    @property
    def eos_id(self) -> int | None:
        return self.workload.eos_id

    def shape(self) -> ModelShape:
        m = self.model
        return ModelShape(layers=m.layers, heads=m.heads, head_dim=m.head_dim, vocab=m.vocab, max_context=m.max_context)

    def build_model(self) -> ToyModel:
        return ToyModel(self.shape(), seed=self.model.seed, skew=self.model.skew)

    def prompt_tokens(self) -> list[int]:
        w = self.workload
        if w.prompt is not None:
            return list(w.prompt)
        rng = make_rng(w.seed)
        return [int(t) for t in rng.integers(0, self.model.vocab, w.prompt_len)]

    def sparsity_config(self) -> SparsityConfig:
        sp = self.sparsity
        return SparsityConfig(variant=sp.variant, ratio=sp.ratio, stride=sp.stride)

    def cost_params(self) -> CostParams:
        sc = self.scheduling
        shape = self.shape()
        return CostParams(
            h=shape.hidden,
            l=shape.layers,
            b=self.workload.batch,
            s=len(self.prompt_tokens()),
            n=self.workload.n,
            r=self.sparsity.ratio,
            bandwidth=sc.bandwidth,
            bytes_per_element=2.0 if sc.quant_bits is None else sc.quant_bits / 8,
            device_capacity=math.inf if sc.device_capacity is None else float(sc.device_capacity),
            mac_rate=sc.mac_rate,
            recompute_overhead=sc.recompute_overhead,
            variant=self.sparsity.variant,
            stride=self.sparsity.stride,
        )
