"""Toy pre-LN transformer decoder with a token-granular, scheduled KV cache.

The model is tiny and randomly initialised; it exists so that caching,
sparse attention, quantization and scheduling can be checked against exact
oracles. All scheduling metrics are simulated seconds from the ledger;
wall-clock time is recorded separately and never feeds the reports.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from swakv.attention import (
    AttentionState,
    SparsityConfig,
    attend,
    attention_sparsity,
    dense_attention,
    score_distribution_correlation,
    select_for_step,
    selection_counts,
)
from swakv.mathops import ContractViolation, UndefinedCorrelation, make_rng, matmul
from swakv.memsim import CostParams, KvLedger, prefill_compute_time
from swakv.quant import fake_quantize
from swakv.scheduler import (
    SchedulePlan,
    StepActions,
    all_device_plan,
    apply_evictions,
    eviction_actions,
    load_actions,
    run_layer_step,
)

STEPS_CSV_SCHEMA = "swakv.steps/v1"
LN_EPS = 1e-5


class ContextOverflow(RuntimeError):
    """The sequence grew past the model's maximum context."""


@dataclass(frozen=True)
class ModelShape:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    vocab: int = 64
    ffn_mult: int = 4
    max_context: int = 1024

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _positions(count: int, hidden: int) -> np.ndarray:
    pos = np.arange(count)[:, None]
    i = np.arange(hidden)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / hidden)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


class ToyModel:
    """Seeded random decoder-only transformer.

    ``skew > 0`` switches on a synthetic salience structure: one embedding
    channel carries a per-vocabulary score that falls off as a power of the
    token's rank, and every layer's query bias and key projection read that
    channel, so dense attention rows concentrate on a few salient tokens
    wherever they sit in the sequence.
    """

    def __init__(self, shape: ModelShape, seed: int = 0, skew: float = 0.0):
        self.shape = shape
        self.seed = seed
        self.skew = skew
        rng = make_rng(seed)
        h, v = shape.hidden, shape.vocab
        self.embed = rng.standard_normal((v, h)) * 0.5
        self.layers: list[LayerWeights] = []
        for _ in range(shape.layers):
            self.layers.append(
                LayerWeights(
                    ln1_g=np.ones(h),
                    ln1_b=np.zeros(h),
                    wq=rng.standard_normal((h, h)) / math.sqrt(h),
                    bq=np.zeros(h),
                    wk=rng.standard_normal((h, h)) / math.sqrt(h),
                    wv=rng.standard_normal((h, h)) / math.sqrt(h),
                    wo=rng.standard_normal((h, h)) / math.sqrt(h),
                    ln2_g=np.ones(h),
                    ln2_b=np.zeros(h),
                    w1=rng.standard_normal((h, shape.ffn_mult * h)) / math.sqrt(h),
                    w2=rng.standard_normal((shape.ffn_mult * h, h)) / math.sqrt(shape.ffn_mult * h),
                )
            )
        self.lnf_g = np.ones(h)
        self.lnf_b = np.zeros(h)
        self.w_out = rng.standard_normal((h, v)) / math.sqrt(h)
        self.pos = _positions(shape.max_context, h) * 0.1
        if skew > 0:
            self._apply_skew(rng, skew)

    def _apply_skew(self, rng: np.random.Generator, skew: float) -> None:
        h, d = self.shape.hidden, self.shape.head_dim
        ranks = rng.permutation(self.shape.vocab) + 1
        salience = -np.log(ranks.astype(np.float64))
        salience = (salience - salience.mean()) / salience.std()
        self.embed[:, 0] = 2.0 * salience
        direction = np.zeros(h)
        for head in range(self.shape.heads):
            direction[head * d : (head + 1) * d] = rng.standard_normal(d)
        direction /= np.linalg.norm(direction[:d])
        for lw in self.layers:
            lw.wk *= 0.3
            lw.wq *= 0.3
            lw.wk[0] += direction * math.sqrt(skew)
            lw.bq = direction * math.sqrt(skew) * math.sqrt(d)

    def qkv(self, layer: int, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lw = self.layers[layer]
        return matmul(xn, lw.wq) + lw.bq, matmul(xn, lw.wk), matmul(xn, lw.wv)

    def kv(self, layer: int, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lw = self.layers[layer]
        return matmul(xn, lw.wk), matmul(xn, lw.wv)

    def input_embedding(self, tokens, start: int = 0) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        end = start + tokens.size
        if end > self.shape.max_context:
            raise ContextOverflow(f"sequence length {end} exceeds max context {self.shape.max_context}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.shape.vocab):
            raise ContractViolation("token id outside the vocabulary")
        return self.embed[tokens] + self.pos[start:end]

    def mlp(self, layer: int, x: np.ndarray) -> np.ndarray:
        lw = self.layers[layer]
        return matmul(_gelu(matmul(_layer_norm(x, lw.ln2_g, lw.ln2_b), lw.w1)), lw.w2)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return matmul(_layer_norm(x, self.lnf_g, self.lnf_b), self.w_out)

    def forward_full(self, tokens) -> dict:
        """Process a whole sequence with dense causal attention and no cache.

        Returns logits for every position plus each layer's normalised inputs,
        keys, values and per-head attention maps.
        """
        tokens = list(tokens)
        if not tokens:
            raise ContractViolation("forward pass over an empty sequence")
        heads, d = self.shape.heads, self.shape.head_dim
        x = self.input_embedding(tokens)
        out = {"xn": [], "k": [], "v": [], "aw": []}
        for li, lw in enumerate(self.layers):
            xn = _layer_norm(x, lw.ln1_g, lw.ln1_b)
            q, k, v = self.qkv(li, xn)
            attn = np.zeros_like(q)
            maps = []
            for hd in range(heads):
                sl = slice(hd * d, (hd + 1) * d)
                a, aw = dense_attention(q[:, sl], k[:, sl], v[:, sl], mask_causal=True)
                attn[:, sl] = a
                maps.append(aw)
            x = x + matmul(attn, lw.wo)
            x = x + self.mlp(li, x)
            out["xn"].append(xn)
            out["k"].append(k)
            out["v"].append(v)
            out["aw"].append(np.stack(maps))
        out["logits"] = self.logits(x)
        return out


def _split_heads(row: np.ndarray, heads: int, d: int) -> np.ndarray:
    return np.asarray(row).reshape(-1, heads, d).transpose(1, 0, 2)


@dataclass
class StepMetrics:
    step: int
    phase: str
    token: int
    kept_tokens: float
    compute_seconds: float
    transfer_seconds: float
    recompute_seconds: float
    offloaded_tokens: int
    reloaded_tokens: int
    deleted_tokens: int
    recomputed_tokens: int
    device_bytes: float
    host_bytes: float
    peak_device_bytes: float
    sparsity: list[float]
    rho: list[float] = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return self.compute_seconds + self.transfer_seconds + self.recompute_seconds


class Engine:
    """One inference session: prefill once, then ``decode_step`` per token.

    ``observers`` are called as ``fn(layer, step, state, q_heads, attn, aw_full)``
    after every decode-step attention; the analysis harness uses them to score
    alternative selections on identical inputs.
    """

    def __init__(
        self,
        model: ToyModel,
        sparsity: SparsityConfig,
        params: CostParams,
        plan: SchedulePlan | None = None,
        quant_bits: int | None = None,
        collect_rho: bool = False,
        observers=(),
    ):
        shape = model.shape
        if params.h != shape.hidden or params.l != shape.layers:
            raise ContractViolation("cost parameters do not match the model shape")
        self.model = model
        self.sparsity = sparsity
        self.params = params
        self.plan = plan if plan is not None else all_device_plan(params)
        self.quant_bits = quant_bits
        self.collect_rho = collect_rho
        self.observers = list(observers)
        cap = min(shape.max_context, params.s + params.n + 1)
        self.states = [AttentionState(shape.heads, shape.head_dim, capacity=cap) for _ in range(shape.layers)]
        self.activations = [np.zeros((cap, shape.hidden)) for _ in range(shape.layers)]
        self.ledger = KvLedger(params, precision="fp16" if quant_bits is None else f"int{quant_bits}")
        self.prefill_aw: list[np.ndarray] = []
        self.length = 0
        self.step_index = 0

    # -- kv storage --------------------------------------------------------
    def _store_precision(self, kv: np.ndarray) -> np.ndarray:
        if self.quant_bits is None:
            return kv
        d = self.model.shape.head_dim
        return np.stack([fake_quantize(row, self.quant_bits, d) for row in np.atleast_2d(kv)])

    def _kv_rows(self, layer: int, xn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k, v = self.model.kv(layer, xn)
        return self._store_precision(k), self._store_precision(v)

    def _grow_activations(self, layer: int, needed: int) -> None:
        buf = self.activations[layer]
        if needed > buf.shape[0]:
            grown = np.zeros((max(needed, 2 * buf.shape[0]), buf.shape[1]))
            grown[: buf.shape[0]] = buf
            self.activations[layer] = grown

    # -- stages --------------------------------------------------------------
    def prefill(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        if not tokens:
            raise ContractViolation("prefill needs at least one prompt token")
        if self.length:
            raise ContractViolation("prefill on a non-empty session")
        shape = self.model.shape
        full = self.model.forward_full(tokens)
        rec = self.ledger.clock.begin(-1, "prefill")
        s = len(tokens)
        for li in range(shape.layers):
            self._grow_activations(li, s)
            self.activations[li][:s] = full["xn"][li]
            k = self._store_precision(full["k"][li])
            v = self._store_precision(full["v"][li])
            self.states[li].append(_split_heads(k, shape.heads, shape.head_dim),
                                   _split_heads(v, shape.heads, shape.head_dim))
            self.states[li].seed_from_prefill(full["aw"][li])
            self.ledger.store(li, range(s))
        rec.compute_seconds += prefill_compute_time(self.params.replace(s=s))
        rec.kept_tokens = s * (s + 1) // 2
        self.prefill_aw = full["aw"]
        self.length = s
        return full["logits"]

    def decode_step(self, token: int) -> tuple[np.ndarray, StepMetrics]:
        """Run one decode step for ``token`` at the next position; returns its logits."""
        if self.length == 0:
            raise ContractViolation("decode before prefill")
        model, shape = self.model, self.model.shape
        j = self.step_index
        if j >= self.params.n:
            raise ContractViolation(f"step {j} is past the planned output length {self.params.n}")
        position = self.length
        phase = self.plan.phase(j)
        rec = self.ledger.clock.begin(j, phase)
        n_seq = position + 1
        _, local = selection_counts(self.sparsity, n_seq)
        for li in range(shape.layers):
            actions = eviction_actions(self.plan, j, self.ledger, li, local, self.params.s)
            apply_evictions(self.ledger, li, actions)
            self.states[li].drop(actions.delete)

        x = model.input_embedding([token], start=position)
        sparsity, rho = [], []
        d = shape.head_dim
        for li in range(shape.layers):
            lw = model.layers[li]
            state = self.states[li]
            xn = _layer_norm(x, lw.ln1_g, lw.ln1_b)
            q, k, v = model.qkv(li, xn)
            k, v = self._store_precision(k), self._store_precision(v)
            self._grow_activations(li, position + 1)
            self.activations[li][position] = xn[0]
            state.append(k.reshape(shape.heads, d), v.reshape(shape.heads, d))

            selection = select_for_step(state, self.sparsity)
            actions = load_actions(selection, self.ledger, li, StepActions(phase))
            for t in actions.recompute:
                kr, vr = self._kv_rows(li, self.activations[li][t][None, :])
                state.restore(t, kr.reshape(shape.heads, d), vr.reshape(shape.heads, d))
            run_layer_step(self.ledger, li, position, selection, actions)

            q_heads = q.reshape(shape.heads, d)
            attn, aw_full = attend(state, q_heads, selection.indices)
            state.record(aw_full)
            sparsity.append(attention_sparsity(aw_full))
            if self.collect_rho and self.sparsity.variant != "dense":
                rho.append(self._rho_sample(state, q_heads, attn))
            for fn in self.observers:
                fn(li, j, state, q_heads, attn, aw_full)
            state.drop(actions.recompute)

            x = x + matmul(attn.reshape(1, -1), lw.wo)
            x = x + model.mlp(li, x)

        self.length += 1
        self.step_index += 1
        logits = model.logits(x)[0]
        metrics = StepMetrics(
            step=j,
            phase=phase,
            token=int(np.argmax(logits)),
            kept_tokens=rec.kept_tokens / shape.layers,
            compute_seconds=rec.compute_seconds,
            transfer_seconds=rec.transfer_seconds,
            recompute_seconds=rec.recompute_seconds,
            offloaded_tokens=rec.offloaded_tokens,
            reloaded_tokens=rec.reloaded_tokens,
            deleted_tokens=rec.deleted_tokens,
            recomputed_tokens=rec.recomputed_tokens,
            device_bytes=rec.device_bytes,
            host_bytes=rec.host_bytes,
            peak_device_bytes=rec.peak_device_bytes,
            sparsity=sparsity,
            rho=[r for r in rho if r is not None],
        )
        return logits, metrics

    def _rho_sample(self, state: AttentionState, q_heads: np.ndarray, attn: np.ndarray):
        if not np.all(state.present[: state.length]):
            return None
        dense, _ = attend(state, q_heads, range(state.length))
        try:
            return score_distribution_correlation(dense.ravel(), attn.ravel())
        except UndefinedCorrelation:
            return None


@dataclass
class RunMetrics:
    config: dict
    plan: dict
    prompt: list[int]
    first_token: int
    tokens: list[int]
    prefill: dict
    steps: list[StepMetrics]
    totals: dict
    generated_tokens: int
    throughput_tokens_per_s: float
    seconds_per_token: float
    peak_device_bytes: float
    peak_host_bytes: float
    transferred_bytes: float
    wall_clock: dict = field(default_factory=dict)

    def report(self) -> dict:
        """Deterministic JSON-able report (wall-clock kept out)."""
        return {
            "config": self.config,
            "plan": self.plan,
            "prompt": self.prompt,
            "first_token": self.first_token,
            "tokens": self.tokens,
            "prefill": self.prefill,
            "totals": self.totals,
            "generated_tokens": self.generated_tokens,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "seconds_per_token": self.seconds_per_token,
            "peak_device_bytes": self.peak_device_bytes,
            "peak_host_bytes": self.peak_host_bytes,
            "transferred_bytes": self.transferred_bytes,
            "steps": [asdict(s) for s in self.steps],
        }

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([STEPS_CSV_SCHEMA, "phase", "token", "kept_tokens", "compute_s", "transfer_s",
                    "recompute_s", "offloaded_tokens", "reloaded_tokens", "deleted_tokens",
                    "recomputed_tokens", "device_bytes", "host_bytes", "peak_device_bytes", "sparsity"])
        for s in self.steps:
            mean_sparsity = sum(s.sparsity) / len(s.sparsity) if s.sparsity else 0.0
            w.writerow([s.step, s.phase, s.token, repr(s.kept_tokens), repr(s.compute_seconds),
                        repr(s.transfer_seconds), repr(s.recompute_seconds), s.offloaded_tokens,
                        s.reloaded_tokens, s.deleted_tokens, s.recomputed_tokens,
                        repr(s.device_bytes), repr(s.host_bytes), repr(s.peak_device_bytes),
                        repr(mean_sparsity)])
        return buf.getvalue()


def generate(engine: Engine, prompt, n: int, eos_id: int | None = None) -> tuple[np.ndarray, list[np.ndarray], list[StepMetrics]]:
    """Prefill ``prompt`` then greedily decode up to ``n`` steps.

    Returns the prefill logits, each step's logits and the step metrics.
    """
    prefill_logits = engine.prefill(prompt)
    token = int(np.argmax(prefill_logits[-1]))
    step_logits, steps = [], []
    for _ in range(n):
        logits, metrics = engine.decode_step(token)
        step_logits.append(logits)
        steps.append(metrics)
        token = metrics.token
        if eos_id is not None and token == eos_id:
            break
    return prefill_logits, step_logits, steps


def run_inference(config) -> RunMetrics:
    """Build model, plan and engine from a :class:`~swakv.config.RunConfig` and run it."""
    from swakv.scheduler import make_plan

    wall_start = time.perf_counter()
    model = config.build_model()
    params = config.cost_params()
    plan = make_plan(config.policy, params)
    engine = Engine(
        model,
        config.sparsity_config(),
        params,
        plan=plan,
        quant_bits=config.quant_bits,
        collect_rho=config.collect_rho,
    )
    prompt = config.prompt_tokens()
    prefill_logits, _, steps = generate(engine, prompt, config.n, config.eos_id)
    clock = engine.ledger.clock
    prefill_rec = clock.steps[0]
    totals = clock.totals()
    totals["prefill_seconds"] = prefill_rec.total_seconds
    totals["decode_seconds"] = totals["total_seconds"] - totals["prefill_seconds"]
    generated = len(steps)
    total = totals["total_seconds"]
    return RunMetrics(
        config=config.to_dict(),
        plan=plan.to_dict(),
        prompt=list(prompt),
        first_token=int(np.argmax(prefill_logits[-1])),
        tokens=[s.token for s in steps],
        prefill={
            "compute_seconds": prefill_rec.compute_seconds,
            "kv_bytes": prefill_rec.device_bytes,
            "tokens": len(prompt),
        },
        steps=steps,
        totals=totals,
        generated_tokens=generated,
        throughput_tokens_per_s=generated / total if total > 0 and generated else 0.0,
        seconds_per_token=total / generated if generated else 0.0,
        peak_device_bytes=engine.ledger.peak_device_bytes,
        peak_host_bytes=max([s.host_bytes for s in steps], default=0.0),
        transferred_bytes=engine.ledger.transferred_bytes,
        wall_clock={"seconds": time.perf_counter() - wall_start},
    )
