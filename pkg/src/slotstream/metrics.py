"""Latency (LAAL) and analytic compute (FLOPs) measurement over traces.

FLOPs are counted, not timed: matmul terms per layer plus the attention
score/value contractions summed over the causal triangle of new tokens.
Elementwise work (norms, activations, rotations, softmax) is excluded; the
instrumented counter in the model excludes the same terms, so the two
routes are directly comparable.

Closed form for one forward of m new tokens against c cached entries:

    per layer:  8*m*d^2                (q/k/v/o projections)
              + 4*d*(m*c + m*(m+1)/2)  (scores + attn@V over visible pairs)
              + 6*m*d*d_ff             (gated MLP, three matmuls)
    once:       2*m*d*vocab            (LM head)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class MetricsError(ValueError):
    pass


def laal(g: Sequence[int], src_len: int, hyp_len: int, ref_len: int) -> float:
    """Length-adaptive average lagging.

    LAAL = (1/tau) * sum_{j=1..tau} [ g(j) - (j-1)/gamma ] with
    gamma = max(hyp_len, ref_len) / src_len and tau the first step at which
    the full source has been read (hyp_len if never attained).
    """
    if len(g) == 0:
        raise MetricsError("empty delay sequence")
    if min(src_len, hyp_len, ref_len) < 1:
        raise MetricsError("lengths must be >= 1")
    for a, b in zip(g, g[1:]):
        if b < a:
            raise MetricsError("delays must be monotone non-decreasing")
    if max(g) > src_len:
        raise MetricsError("delays exceed source length")
    gamma = max(hyp_len, ref_len) / src_len
    tau = next((j for j, d in enumerate(g, start=1) if d == src_len), hyp_len)
    tau = min(tau, len(g))
    total = sum(g[j - 1] - (j - 1) / gamma for j in range(1, tau + 1))
    return total / tau


@dataclass(frozen=True)
class FlopsModel:
    """Analytic per-forward coefficients derived from a model config."""

    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab_size: int

    @classmethod
    def from_config(cls, config) -> "FlopsModel":
        return cls(d_model=config.d_model, n_heads=config.n_heads,
                   n_layers=config.n_layers, d_ff=config.d_ff,
                   vocab_size=config.vocab_size)

    def flops_forward(self, cached: int, new: int) -> float:
        return flops_forward(self, cached, new)


def flops_forward(fm: FlopsModel, cached: int, new: int) -> float:
    """Analytic FLOPs for one forward; strictly increasing in both args."""
    if cached < 0 or new < 0:
        raise MetricsError("cached and new must be >= 0")
    if new == 0:
        return 0.0
    c, m, d = cached, new, fm.d_model
    visible_pairs = m * c + m * (m + 1) // 2
    per_layer = 8.0 * m * d * d + 4.0 * d * visible_pairs + 6.0 * m * d * fm.d_ff
    return fm.n_layers * per_layer + 2.0 * m * d * fm.vocab_size


def cumulative_flops(trace) -> float:
    """Sum of per-step FLOPs recorded in a stream trace."""
    return float(sum(step.flops for step in trace.steps))
