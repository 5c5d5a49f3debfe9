"""Paired sparsity and score-correlation analysis.

A single dense run drives the model. At every decode step and layer each
sparse variant re-selects tokens from the *same* query and cache, keeps its
own local-sum window, and its attention output is rank-correlated with the
dense output. This isolates the attention approximation from divergence in
generated text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from swakv.attention import (
    LocalAttentionSum,
    SparsityConfig,
    attend,
    attention_sparsity,
    score_distribution_correlation,
    select_positions,
    sparse_k,
)
from swakv.engine import Engine, ToyModel, generate
from swakv.mathops import UndefinedCorrelation
from swakv.memsim import CostParams


@dataclass
class VariantTrace:
    cfg: SparsityConfig
    windows: list[LocalAttentionSum]
    rho: list[list[float]] = field(default_factory=list)  # [step][layer], nan when undefined
    sparsity: list[list[float]] = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"{self.cfg.variant}@{self.cfg.ratio:g}"

    def mean_rho(self) -> float:
        vals = [r for row in self.rho for r in row if not math.isnan(r)]
        return float(np.mean(vals)) if vals else math.nan

    def mean_sparsity(self) -> float:
        vals = [s for row in self.sparsity for s in row]
        return float(np.mean(vals)) if vals else math.nan


class _Shadow:
    def __init__(self, traces: list[VariantTrace], layers: int):
        self.traces = traces
        self.layers = layers

    def __call__(self, layer, step, state, q_heads, attn, aw_full):
        n = state.length
        for tr in self.traces:
            if layer == 0:
                tr.rho.append([])
                tr.sparsity.append([])
            window = tr.windows[layer]
            local_sum = None
            if tr.cfg.variant == "swa":
                local_sum = window.window_sum(sparse_k(n, tr.cfg.ratio), n - 1)
            sel = select_positions(tr.cfg, n, local_sum)
            s_attn, s_aw = attend(state, q_heads, sel.indices)
            window.push(s_aw.sum(axis=0))
            if tr.cfg.variant == "swa":
                window.trim(2 * sel.k + 1)
            try:
                rho = score_distribution_correlation(attn.ravel(), s_attn.ravel())
            except UndefinedCorrelation:
                rho = math.nan
            tr.rho[-1].append(rho)
            tr.sparsity[-1].append(attention_sparsity(s_aw))


def analyze(
    model: ToyModel,
    prompt,
    n: int,
    variants: list[SparsityConfig],
) -> dict:
    """Run dense decoding once and score every variant against it.

    Returns a JSON-able report with dense prefill/decode sparsity per layer and
    step, and for each variant its per-step/layer rho and sparsity plus means.
    """
    shape = model.shape
    params = CostParams(h=shape.hidden, l=shape.layers, s=len(prompt), n=n, variant="dense")
    traces = [VariantTrace(cfg, [LocalAttentionSum() for _ in range(shape.layers)]) for cfg in variants]
    engine = Engine(model, SparsityConfig("dense"), params, observers=[_Shadow(traces, shape.layers)])

    # seed every variant's window from the dense prefill map, as the engine does
    engine_prefill = engine.prefill
    def prefill_and_seed(tokens):
        logits = engine_prefill(tokens)
        for tr in traces:
            for li, maps in enumerate(engine.prefill_aw):
                total = maps.sum(axis=0)
                for i in range(total.shape[0]):
                    tr.windows[li].push(total[i, : i + 1])
        return logits
    engine.prefill = prefill_and_seed

    prefill_logits, _, steps = generate(engine, prompt, n)
    prefill_sparsity = [attention_sparsity(m.sum(axis=0) / shape.heads, causal=True) for m in engine.prefill_aw]
    report = {
        "prompt": [int(t) for t in prompt],
        "tokens": [s.token for s in steps],
        "dense": {
            "prefill_sparsity": prefill_sparsity,
            "decode_sparsity": [s.sparsity for s in steps],
            "mean_decode_sparsity": float(np.mean([x for s in steps for x in s.sparsity])) if steps else math.nan,
        },
        "variants": [],
    }
    for tr in traces:
        report["variants"].append(
            {
                "label": tr.label,
                "variant": tr.cfg.variant,
                "ratio": tr.cfg.ratio,
                "stride": tr.cfg.effective_stride if tr.cfg.variant == "strided" else None,
                "mean_rho": tr.mean_rho(),
                "mean_sparsity": tr.mean_sparsity(),
                "rho": tr.rho,
                "sparsity": tr.sparsity,
            }
        )
    return report
