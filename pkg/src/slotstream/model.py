"""Minimal decoder-only transformer taking explicit per-token position IDs.

Supports rotary and ALiBi positional schemes, incremental decoding against a
KV cache, and autograd for the toy trainer. Pre-norm blocks with RMS
normalization and a SwiGLU MLP; no biases. Parameters are initialized from a
counter-based generator keyed on (seed, parameter name), so two models built
from the same (config, seed) are bitwise identical.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .kv_cache import CacheDelta, KvCache

ROTARY = "rotary"
ALIBI = "alibi"
NONE = "none"


class ConfigError(ValueError):
    pass


class MacCounter:
    """Accumulates multiply-accumulate FLOPs observed during forward passes.

    Counts matmul FLOPs from actual tensor shapes; attention score/value
    contractions are charged per *visible* (query, key) pair so that masked
    entries do not count. Elementwise ops (norms, activations, rotations)
    are excluded on both sides of the analytic cross-check.
    """

    def __init__(self) -> None:
        self.flops = 0.0

    def add_matmul(self, m: int, n: int, p: int) -> None:
        self.flops += 2.0 * m * n * p

    def add_attention(self, visible_pairs: int, d_model: int) -> None:
        # scores (2*d per pair) + attn @ V (2*d per pair)
        self.flops += 4.0 * visible_pairs * d_model


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab_size: int
    pos_scheme: str = ROTARY
    rotary_base: float = 10000.0
    max_position: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "max_position"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (room for special tokens)")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.pos_scheme not in (ROTARY, ALIBI, NONE):
            raise ConfigError(f"unknown pos_scheme {self.pos_scheme!r}")
        if self.pos_scheme == ROTARY and (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head_dim must be even with the rotary scheme")
        if self.rotary_base <= 0:
            raise ConfigError("rotary_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        """Analytic parameter count for this configuration."""
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        per_layer = 4 * d * d + 3 * d * f + 2 * d  # qkvo + swiglu + two norms
        return v * d + self.n_layers * per_layer + d + d * v  # embed, final norm, head


def apply_rotary(vector: Sequence[float], position: int, base: float = 10000.0):
    """Rotate consecutive pairs of a head vector by position-dependent angles.

    Pair i is rotated by angle position * base**(-2*i/head_dim). Reference
    implementation over one vector; the batched model path must agree with it.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] % 2 != 0:
        raise ValueError("rotary input must be a flat even-length vector")
    if position < 0:
        raise ValueError("position must be >= 0")
    d = v.shape[0]
    angles = position * base ** (-2.0 * np.arange(d // 2) / d)
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.empty_like(v)
    out[0::2] = v[0::2] * cos - v[1::2] * sin
    out[1::2] = v[0::2] * sin + v[1::2] * cos
    return out


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Per-head slope table: geometric sequence with ratio 2**(-8/n_heads).

    For a power-of-two head count this is the standard recipe starting at
    2**(-8/n_heads); otherwise slopes for the next power of two are computed
    and interleaved.
    """
    def power_of_two_slopes(n: int) -> list[float]:
        start = 2.0 ** (-8.0 / n)
        return [start ** (i + 1) for i in range(n)]

    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    if math.log2(n_heads).is_integer():
        return np.array(power_of_two_slopes(n_heads))
    closest = 2 ** math.floor(math.log2(n_heads))
    slopes = power_of_two_slopes(closest)
    extra = power_of_two_slopes(2 * closest)[0::2][: n_heads - closest]
    return np.array(slopes + extra)


def alibi_bias(head_index: int, n_heads: int, query_pos: int, key_pos: int) -> float:
    """Linear attention bias -slope(head) * (query_pos - key_pos)."""
    if not 0 <= head_index < n_heads:
        raise ValueError("head_index out of range")
    if key_pos > query_pos:
        raise ValueError("bias only defined for key_pos <= query_pos")
    return float(-alibi_slopes(n_heads)[head_index] * (query_pos - key_pos))


def _stable_param_seed(seed: int, name: str) -> list[int]:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return [seed & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")]


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        var = x.pow(2).mean(dim=-1, keepdim=True)
        return x * torch.rsqrt(var + self.eps) * self.weight


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.attn_norm = RMSNorm(d)
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)
        self.mlp_norm = RMSNorm(d)
        self.w_gate = nn.Linear(d, cfg.d_ff, bias=False)
        self.w_up = nn.Linear(d, cfg.d_ff, bias=False)
        self.w_down = nn.Linear(cfg.d_ff, d, bias=False)


class Transformer(nn.Module):
    """Decoder-only model; immutable after init, safe for concurrent reads."""

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = RMSNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self._init_parameters()
        self.to(dtype)
        slopes = torch.from_numpy(alibi_slopes(config.n_heads)).to(dtype)
        self.register_buffer("slopes", slopes, persistent=False)

    def _init_parameters(self) -> None:
        with torch.no_grad():
            for name, param in self.named_parameters():
                if param.ndim == 1:  # norm gains
                    param.fill_(1.0)
                    continue
                fan_in = param.shape[-1]
                rng = np.random.default_rng(_stable_param_seed(self.config.seed, name))
                vals = rng.standard_normal(tuple(param.shape)) / math.sqrt(fan_in)
                param.copy_(torch.from_numpy(vals))

    def _rotate(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Batched rotary transform; x is [m, n_heads, head_dim]."""
        hd = self.config.head_dim
        idx = torch.arange(hd // 2, dtype=self.dtype)
        freqs = self.config.rotary_base ** (-2.0 * idx / hd)
        angles = positions.to(self.dtype)[:, None] * freqs[None, :]  # [m, hd/2]
        cos = angles.cos()[:, None, :]
        sin = angles.sin()[:, None, :]
        x_even, x_odd = x[..., 0::2], x[..., 1::2]
        rotated = torch.stack(
            (x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
        return rotated.flatten(-2)

    def forward(
        self,
        token_ids: Sequence[int],
        position_ids: Sequence[int],
        cache: Optional[KvCache] = None,
        mask: Optional[Union[np.ndarray, torch.Tensor]] = None,
        flop_counter: Optional[MacCounter] = None,
        inputs_embeds: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, CacheDelta]:
        """Run new tokens against an optional cache.

        Returns (logits [m, vocab_size], cache_delta). The cache is read,
        never mutated. With mask=None visibility is causal over the cache:
        new token i sees every cache entry and new tokens 0..i. An explicit
        mask must be boolean [m, c + m].
        """
        cfg = self.config
        m = len(token_ids)
        if len(position_ids) != m:
            raise ValueError("token_ids and position_ids must have equal length")
        c = len(cache) if cache is not None else 0
        n = c + m
        if m == 0:
            empty = [torch.zeros(0, cfg.n_heads, cfg.head_dim, dtype=self.dtype)
                     for _ in range(cfg.n_layers)]
            return (torch.zeros(0, cfg.vocab_size, dtype=self.dtype),
                    CacheDelta(keys=empty, values=list(empty), position_ids=[]))
        positions = torch.as_tensor(list(position_ids), dtype=torch.long)
        if (positions < 0).any() or (positions >= cfg.max_position).any():
            raise ValueError(f"position IDs must be in [0, {cfg.max_position})")

        if mask is None:
            vis = torch.zeros(m, n, dtype=torch.bool)
            vis[:, :c] = True
            vis[:, c:] = torch.tril(torch.ones(m, m, dtype=torch.bool))
        else:
            vis = torch.as_tensor(np.asarray(mask)).to(torch.bool)
            if vis.shape != (m, n):
                raise ValueError(f"mask shape {tuple(vis.shape)} != ({m}, {n})")
        live_rows = vis.any(dim=-1)
        # fully-hidden rows get a dummy self-loop to keep softmax finite;
        # their attention output is zeroed below
        vis_safe = vis.clone()
        vis_safe[~live_rows, :] = False
        vis_safe[torch.arange(m)[~live_rows], c + torch.arange(m)[~live_rows]] = True

        all_positions = torch.as_tensor(
            (list(cache.position_ids) if cache is not None else []) + list(position_ids),
            dtype=torch.long)

        if inputs_embeds is not None:
            if inputs_embeds.shape != (m, cfg.d_model):
                raise ValueError("inputs_embeds must be [m, d_model]")
            x = inputs_embeds
        else:
            x = self.embed(torch.as_tensor(list(token_ids), dtype=torch.long))
        scale = 1.0 / math.sqrt(cfg.head_dim)
        delta_keys, delta_values = [], []
        visible_pairs = int(vis.sum().item())
        for layer, blk in enumerate(self.blocks):
            h = blk.attn_norm(x)
            q = blk.q_proj(h).view(m, cfg.n_heads, cfg.head_dim)
            k = blk.k_proj(h).view(m, cfg.n_heads, cfg.head_dim)
            v = blk.v_proj(h).view(m, cfg.n_heads, cfg.head_dim)
            if cfg.pos_scheme == ROTARY:
                q = self._rotate(q, positions)
                k = self._rotate(k, positions)
            delta_keys.append(k)
            delta_values.append(v)
            if c > 0:
                k_all = torch.cat([cache.keys(layer), k], dim=0)
                v_all = torch.cat([cache.values(layer), v], dim=0)
            else:
                k_all, v_all = k, v
            scores = torch.einsum("mhd,nhd->hmn", q, k_all) * scale
            if cfg.pos_scheme == ALIBI:
                dist = (positions[:, None] - all_positions[None, :]).to(self.dtype)
                scores = scores - self.slopes[:, None, None] * dist[None, :, :]
            scores = scores.masked_fill(~vis_safe[None, :, :], float("-inf"))
            attn = torch.softmax(scores, dim=-1)
            out = torch.einsum("hmn,nhd->mhd", attn, v_all)
            out = out * live_rows.to(self.dtype)[:, None, None]
            x = x + blk.o_proj(out.reshape(m, cfg.d_model))
            h2 = blk.mlp_norm(x)
            x = x + blk.w_down(F.silu(blk.w_gate(h2)) * blk.w_up(h2))
            if flop_counter is not None:
                d = cfg.d_model
                for _ in range(4):
                    flop_counter.add_matmul(m, d, d)
                flop_counter.add_attention(visible_pairs, d)
                flop_counter.add_matmul(m, d, cfg.d_ff)
                flop_counter.add_matmul(m, d, cfg.d_ff)
                flop_counter.add_matmul(m, cfg.d_ff, d)
        logits = self.head(self.final_norm(x))
        if flop_counter is not None:
            flop_counter.add_matmul(m, cfg.d_model, cfg.vocab_size)
        delta = CacheDelta(keys=[k.detach() for k in delta_keys],
                           values=[v.detach() for v in delta_values],
                           position_ids=[int(p) for p in position_ids])
        return logits, delta

    def new_cache(self) -> KvCache:
        return KvCache(self.config.n_layers, self.config.n_heads,
                       self.config.head_dim, dtype=self.dtype)


def init_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> Transformer:
    model = Transformer(config, dtype=dtype)
    actual = sum(p.numel() for p in model.parameters())
    assert actual == config.param_count(), (actual, config.param_count())
    return model


def parameter_hash(model: Transformer) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()
