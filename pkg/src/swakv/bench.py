"""Profile decode steps and fit the simulator's ``mac_rate``.

The cost model charges ``2*b*l*h*kept / mac_rate`` seconds per decode step,
so a fit through the origin of measured seconds against that work count
gives ``1/mac_rate`` as the slope.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

from swakv.attention import SparsityConfig
from swakv.engine import Engine, ModelShape, ToyModel
from swakv.mathops import make_rng
from swakv.memsim import CostParams

DEFAULT_POINTS = ((1, 2, 8, 16), (2, 2, 8, 32), (2, 4, 8, 48), (4, 2, 16, 32))


@dataclass(frozen=True)
class BenchPoint:
    layers: int
    heads: int
    head_dim: int
    context: int

    @property
    def work(self) -> float:
        """Modelled multiply-accumulates of one dense decode step at this shape."""
        return 2.0 * self.layers * self.heads * self.head_dim * (self.context + 1)


@dataclass
class BenchResult:
    mac_rate: float
    fitted: bool
    points: list[BenchPoint]
    seconds: list[float]
    residuals: list[float] = field(default_factory=list)
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "mac_rate": self.mac_rate,
            "fitted": self.fitted,
            "warning": self.warning,
            "points": [
                {"layers": p.layers, "heads": p.heads, "head_dim": p.head_dim, "context": p.context,
                 "work": p.work, "seconds": t, "residual": r}
                for p, t, r in zip(self.points, self.seconds, self.residuals)
            ],
        }


def time_decode_step(point: BenchPoint, repeats: int = 3, clock=time.perf_counter) -> float:
    """Best-of-``repeats`` wall time for one dense decode step after a prefill of ``context`` tokens."""
    shape = ModelShape(layers=point.layers, heads=point.heads, head_dim=point.head_dim,
                       max_context=point.context + 1)
    model = ToyModel(shape, seed=0)
    prompt = [int(t) for t in make_rng(0).integers(0, shape.vocab, point.context)]
    best = math.inf
    for _ in range(repeats):
        params = CostParams(h=shape.hidden, l=shape.layers, s=point.context, n=1, variant="dense")
        engine = Engine(model, SparsityConfig("dense"), params)
        engine.prefill(prompt)
        start = clock()
        engine.decode_step(prompt[-1])
        best = min(best, clock() - start)
    return best


def fit_mac_rate(points, seconds, default: float = 1e12) -> BenchResult:
    """Least-squares slope through the origin of ``seconds`` against work.

    A fit with no usable signal (no points, zero work, non-positive slope)
    keeps ``default`` and sets ``warning``.
    """
    points = list(points)
    seconds = [float(t) for t in seconds]
    if len(points) != len(seconds):
        raise ValueError("points and seconds differ in length")
    xs = [p.work for p in points]
    sxx = sum(x * x for x in xs)
    sxy = sum(x * t for x, t in zip(xs, seconds))
    slope = sxy / sxx if sxx > 0 else math.nan
    if not (math.isfinite(slope) and slope > 0):
        return BenchResult(default, False, points, seconds, [0.0] * len(points),
                           warning="degenerate fit; keeping the default mac_rate")
    residuals = [abs(t - slope * x) for x, t in zip(xs, seconds)]
    return BenchResult(1.0 / slope, True, points, seconds, residuals)


def run_bench(points=DEFAULT_POINTS, measure=None, default: float = 1e12) -> BenchResult:
    """Measure each point (``measure(point) -> seconds``) and fit ``mac_rate``."""
    points = [p if isinstance(p, BenchPoint) else BenchPoint(*p) for p in points]
    measure = measure or time_decode_step
    return fit_mac_rate(points, [measure(p) for p in points], default)
