"""Hierarchical windowed-attention backbone with frozen base weights and
trainable low-rank query/value adapters, one adapter set per modality.

Stage i halves the token grid of stage i-1 and doubles its channels; the
stage-i map is 2^(i+2) times smaller than the input. Base projections are
randomly initialized and frozen; only the adapters train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ParameterRegistry, Tensor

PATCH_STRIDE = 4


@dataclass
class EncoderConfig:
    in_channels: dict[str, int]
    embed_dim: int = 32
    num_stages: int = 3
    window: int = 4
    heads: int = 2
    rank: int = 32

    def stage_channels(self, i: int) -> int:
        return self.embed_dim * (2 ** i)

    def stage_factor(self, i: int) -> int:
        return 2 ** (i + 2)

    def validate(self):
        if self.embed_dim <= 0 or self.num_stages < 1:
            raise ValueError("embed_dim and num_stages must be positive")
        if self.rank < 1:
            raise ValueError(f"adapter rank must be positive, got {self.rank}")
        if self.window < 1:
            raise ValueError(f"window must be positive, got {self.window}")
        for i in range(self.num_stages):
            if self.stage_channels(i) % self.heads:
                raise ValueError(
                    f"heads={self.heads} must divide stage {i} channels "
                    f"{self.stage_channels(i)}"
                )


@dataclass
class LoraAdapter:
    """Low-rank factors updating the query/value projections of one block."""

    modality: str
    stage: int
    rank: int
    waq: Parameter
    wbq: Parameter
    wav: Parameter
    wbv: Parameter

    def delta_q(self) -> Tensor:
        return T.matmul(self.waq.tensor, self.wbq.tensor)

    def delta_v(self) -> Tensor:
        return T.matmul(self.wav.tensor, self.wbv.tensor)

    def params(self):
        return [self.waq, self.wbq, self.wav, self.wbv]


@dataclass
class StageWeights:
    """Frozen base projections of one attention block."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    down_proj: Parameter | None = None  # to next stage; None at the deepest


def patch_embed(x: Tensor, w_e: Tensor, b_e: Tensor, stride: int = PATCH_STRIDE) -> Tensor:
    """Flatten non-overlapping stride x stride patches of x[H,W,C] and map
    them to the embedding width; output is [H/stride, W/stride, d]."""
    h, w, c = x.shape
    patch_dim = stride * stride * c
    if w_e.shape[0] != patch_dim:
        raise T.ShapeError(
            f"patch embed expects {w_e.shape[0]} inputs per patch, "
            f"got {patch_dim} ({stride}x{stride}x{c})"
        )
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h or pad_w:
        x = T.pad2d(x, pad_h, pad_w, axes=(0, 1))
        h, w = h + pad_h, w + pad_w
    h0, w0 = h // stride, w // stride
    patches = T.reshape(x, (h0, stride, w0, stride, c))
    patches = T.transpose(patches, (0, 2, 1, 3, 4))
    flat = T.reshape(patches, (h0 * w0, patch_dim))
    tokens = T.add(T.matmul(flat, w_e), b_e)
    return T.reshape(tokens, (h0, w0, w_e.shape[1]))


def _partition(tokens: Tensor, window: int):
    """[H,W,C] -> ([nWin, window*window, C], padded grid shape)."""
    h, w, c = tokens.shape
    pad_h = (-h) % window
    pad_w = (-w) % window
    if pad_h or pad_w:
        tokens = T.pad2d(tokens, pad_h, pad_w, axes=(0, 1))
    hp, wp = h + pad_h, w + pad_w
    grid = T.reshape(tokens, (hp // window, window, wp // window, window, c))
    grid = T.transpose(grid, (0, 2, 1, 3, 4))
    return T.reshape(grid, ((hp // window) * (wp // window), window * window, c)), (hp, wp)


def _unpartition(windows: Tensor, window: int, hp: int, wp: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    grid = T.reshape(windows, (hp // window, wp // window, window, window, c))
    grid = T.transpose(grid, (0, 2, 1, 3, 4))
    out = T.reshape(grid, (hp, wp, c))
    if hp != h or wp != w:
        out = T.crop2d(out, h, w, axes=(0, 1))
    return out


def window_attention(tokens: Tensor, weights: StageWeights,
                     adapter: LoraAdapter | None, window: int, heads: int) -> Tensor:
    """Per-window multi-head self-attention with adapter-augmented Q and V
    and a residual connection around the block. K uses base weights only;
    ``adapter=None`` runs the frozen base path."""
    h, w, c = tokens.shape
    if c % heads:
        raise T.ShapeError(f"heads={heads} must divide channel count {c}")
    dh = c // heads
    x, (hp, wp) = _partition(tokens, window)
    n_win, t, _ = x.shape

    q = T.matmul(x, weights.wq.tensor)
    v = T.matmul(x, weights.wv.tensor)
    if adapter is not None:
        q = T.add(q, T.matmul(x, adapter.delta_q()))
        v = T.add(v, T.matmul(x, adapter.delta_v()))
    k = T.matmul(x, weights.wk.tensor)

    def split_heads(m):
        return T.transpose(T.reshape(m, (n_win, t, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, vh)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n_win, t, c))
    out = T.matmul(merged, weights.wo.tensor)
    return T.add(tokens, _unpartition(out, window, hp, wp, h, w))


class Encoder:
    """Owns the frozen stage weights (shared across modalities), the frozen
    per-modality patch embeddings, and the trainable adapters."""

    def __init__(self, cfg: EncoderConfig, registry: ParameterRegistry,
                 rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.stages: list[StageWeights] = []
        self.patch: dict[str, tuple[Parameter, Parameter]] = {}
        self.adapters: dict[str, list[LoraAdapter]] = {}

        for i in range(cfg.num_stages):
            ci = cfg.stage_channels(i)
            std = 1.0 / math.sqrt(ci)

            def frozen(suffix, shape, scale=std):
                return registry.register(
                    f"encoder.stage{i}.{suffix}",
                    rng.standard_normal(shape) * scale, frozen=True)

            down = None
            if i + 1 < cfg.num_stages:
                down = frozen("down_proj", (2 * ci, ci))
            self.stages.append(StageWeights(
                wq=frozen("wq", (ci, ci)), wk=frozen("wk", (ci, ci)),
                wv=frozen("wv", (ci, ci)), wo=frozen("wo", (ci, ci)),
                down_proj=down,
            ))

        for modality, c in cfg.in_channels.items():
            patch_dim = PATCH_STRIDE * PATCH_STRIDE * c
            w_e = registry.register(
                f"encoder.patch.{modality}.w",
                rng.standard_normal((patch_dim, cfg.embed_dim)) / math.sqrt(patch_dim),
                frozen=True)
            b_e = registry.register(
                f"encoder.patch.{modality}.b",
                rng.standard_normal(cfg.embed_dim) * 0.02, frozen=True)
            self.patch[modality] = (w_e, b_e)
            self.adapters[modality] = [
                self._make_adapter(registry, rng, modality, i)
                for i in range(cfg.num_stages)
            ]

    def _make_adapter(self, registry, rng, modality, stage) -> LoraAdapter:
        ci = self.cfg.stage_channels(stage)
        r = self.cfg.rank
        std = 1.0 / math.sqrt(r)

        def reg(suffix, shape, zero):
            data = np.zeros(shape) if zero else rng.standard_normal(shape) * std
            return registry.register(f"adapter.{modality}.stage{stage}.{suffix}", data)

        # A factors gaussian, B factors zero: the update starts as a no-op
        return LoraAdapter(
            modality=modality, stage=stage, rank=r,
            waq=reg("waq", (ci, r), False), wbq=reg("wbq", (r, ci), True),
            wav=reg("wav", (ci, r), False), wbv=reg("wbv", (r, ci), True),
        )

    def encode(self, x: Tensor, modality: str, use_adapters: bool = True) -> list[Tensor]:
        """Run one modality through every stage; returns per-stage maps
        shaped [C_i, H_i, W_i]."""
        if modality not in self.adapters:
            raise KeyError(f"no adapter set registered for modality {modality!r}")
        w_e, b_e = self.patch[modality]
        tokens = patch_embed(x, w_e.tensor, b_e.tensor)

        features: list[Tensor] = []
        for i, stage in enumerate(self.stages):
            adapter = self.adapters[modality][i] if use_adapters else None
            tokens = window_attention(tokens, stage, adapter,
                                      self.cfg.window, self.cfg.heads)
            features.append(T.transpose(tokens, (2, 0, 1)))
            if stage.down_proj is not None:
                fmap = features[-1]
                h, w = fmap.shape[1], fmap.shape[2]
                if h % 2 or w % 2:
                    fmap = T.pad2d(fmap, h % 2, w % 2, axes=(1, 2))
                pooled = T.avgpool2x2(fmap)
                doubled = T.conv1x1(pooled, stage.down_proj.tensor)
                tokens = T.transpose(doubled, (1, 2, 0))
        return features
