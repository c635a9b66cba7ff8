"""Dual-pathway mask prediction.

Pathway one decodes the deepest fused map with learnable class tokens and
cross-attention, then refines the low-resolution logits twice by upsampling
and adding 1x1-projected pyramid features. Pathway two is an auxiliary head
that maps all three pyramid levels to a common width, upsamples, concatenates
and predicts directly. Final logits average both pathways at input resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .neck import FeatureTriple
from .tensor import Parameter, ParameterRegistry, Tensor


@dataclass
class DualLogits:
    s0: Tensor  # refinement pathway, [classes, H0, W0]
    s1: Tensor  # auxiliary pathway, [classes, Ht, Wt]


def sine_position_encoding(d: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine/cosine grid: half the channels encode the row index,
    half the column, each on a geometric frequency ladder (base 10000).
    Channel layout is all sines first, then all cosines."""
    if d % 4:
        raise ValueError(f"positional encoding needs d divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    ys = np.arange(h, dtype=np.float64)[:, None] * freqs[None, :]  # [H, q]
    xs = np.arange(w, dtype=np.float64)[:, None] * freqs[None, :]  # [W, q]
    pe = np.zeros((d, h, w), dtype=np.float64)
    pe[0:quarter] = np.sin(ys).T[:, :, None]
    pe[quarter:2 * quarter] = np.sin(xs).T[:, None, :]
    pe[2 * quarter:3 * quarter] = np.cos(ys).T[:, :, None]
    pe[3 * quarter:] = np.cos(xs).T[:, None, :]
    return pe.astype(dtype)


def add_sine_pe(sfm: Tensor) -> Tensor:
    """Add the fixed positional grid to a [d,H,W] map."""
    d, h, w = sfm.shape
    return T.add(sfm, Tensor(sine_position_encoding(d, h, w, dtype=sfm.dtype)))


def combine_predictions(s0: Tensor, s1: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsample both pathway logits to the target resolution and average."""
    if s0.shape[0] != s1.shape[0]:
        raise T.ShapeError(
            f"class counts disagree: {s0.shape[0]} vs {s1.shape[0]}")
    up0 = T.upsample_bilinear(s0, out_h, out_w)
    up1 = T.upsample_bilinear(s1, out_h, out_w)
    return T.mul(T.add(up0, up1), 0.5)


class Decoder:
    """Holds the trainable decoder state: class tokens, two cross-attention
    rounds with feed-forward, the hypernetwork, refinement projections and
    the auxiliary head."""

    ATTN_ROUNDS = 2

    def __init__(self, d: int, num_classes: int, registry: ParameterRegistry,
                 rng: np.random.Generator, dropout: float = 0.1):
        if d % 8:
            raise ValueError(f"decoder width d={d} must be divisible by 8")
        self.d = d
        self.num_classes = num_classes
        self.dropout = dropout
        std = 1.0 / math.sqrt(d)

        def reg(name, shape, scale=std):
            data = rng.standard_normal(shape) * scale if scale else np.zeros(shape)
            return registry.register(f"decoder.{name}", data)

        self.tokens = reg("mask_tokens", (num_classes, d), 0.02)
        self.rounds = []
        for r in range(self.ATTN_ROUNDS):
            self.rounds.append({
                "wq": reg(f"round{r}.wq", (d, d)),
                "wk": reg(f"round{r}.wk", (d, d)),
                "wv": reg(f"round{r}.wv", (d, d)),
                "wo": reg(f"round{r}.wo", (d, d)),
                "ffn_w1": reg(f"round{r}.ffn_w1", (d, 2 * d)),
                "ffn_b1": reg(f"round{r}.ffn_b1", (2 * d,), 0),
                "ffn_w2": reg(f"round{r}.ffn_w2", (2 * d, d), 1.0 / math.sqrt(2 * d)),
                "ffn_b2": reg(f"round{r}.ffn_b2", (d,), 0),
            })
        self.hyper_w1 = reg("hyper.w1", (d, d))
        self.hyper_b1 = reg("hyper.b1", (d,), 0)
        self.hyper_w2 = reg("hyper.w2", (d, d), 0)
        self.hyper_b2 = reg("hyper.b2", (d,), 0)

        c = num_classes
        # prediction projections start at zero: both pathways open at
        # uniform class probabilities and sharpen from there
        self.refine_ifp = (reg("refine_ifp.w", (c, d // 4), 0),
                           reg("refine_ifp.b", (c,), 0))
        self.refine_ffp = (reg("refine_ffp.w", (c, d // 8), 0),
                           reg("refine_ffp.b", (c,), 0))

        d8, d4 = d // 8, d // 4
        self.aux_mlp = {}
        for name, c_in in (("sfm", d), ("ifp", d4), ("ffp", d8)):
            self.aux_mlp[name] = (
                reg(f"aux.{name}.w1", (d4, c_in), 1.0 / math.sqrt(c_in)),
                reg(f"aux.{name}.b1", (d4,), 0),
                reg(f"aux.{name}.w2", (d8, d4), 1.0 / math.sqrt(d4)),
                reg(f"aux.{name}.b2", (d8,), 0),
            )
        self.aux_fuse = (reg("aux.fuse.w", (d8, 3 * d8), 1.0 / math.sqrt(3 * d8)),
                         reg("aux.fuse.b", (d8,), 0))
        self.aux_pred = (reg("aux.pred.w", (c, d8), 0),
                         reg("aux.pred.b", (c,), 0))

    # -- pathway one -------------------------------------------------------

    def mask_decode(self, sfm_pe: Tensor) -> Tensor:
        """Cross-attend class tokens to the encoded map, then score every
        pixel against each token's hypernetwork output."""
        d, h, w = sfm_pe.shape
        if self.tokens.data.shape[1] != d:
            raise T.ShapeError(f"token width {self.tokens.data.shape[1]} != map width {d}")
        feats = T.reshape(T.transpose(sfm_pe, (1, 2, 0)), (h * w, d))
        tok = self.tokens.tensor
        scale = 1.0 / math.sqrt(d)
        for rnd in self.rounds:
            q = T.matmul(tok, rnd["wq"].tensor)
            k = T.matmul(feats, rnd["wk"].tensor)
            v = T.matmul(feats, rnd["wv"].tensor)
            attn = T.softmax(T.mul(T.matmul(q, T.transpose(k, (1, 0))), scale), axis=-1)
            tok = T.add(tok, T.matmul(T.matmul(attn, v), rnd["wo"].tensor))
            hidden = T.relu(T.add(T.matmul(tok, rnd["ffn_w1"].tensor), rnd["ffn_b1"].tensor))
            tok = T.add(tok, T.add(T.matmul(hidden, rnd["ffn_w2"].tensor), rnd["ffn_b2"].tensor))
        hidden = T.relu(T.add(T.matmul(tok, self.hyper_w1.tensor), self.hyper_b1.tensor))
        hyper = T.add(T.matmul(hidden, self.hyper_w2.tensor), self.hyper_b2.tensor)
        scores = T.matmul(hyper, T.transpose(feats, (1, 0)))  # [classes, H*W]
        return T.reshape(scores, (self.num_classes, h, w))

    def refine(self, s_low: Tensor, ifp: Tensor, ffp: Tensor) -> Tensor:
        """Two upsample-and-add steps against the projected pyramid maps."""
        inter = T.add(
            T.upsample_bilinear(s_low, ifp.shape[1], ifp.shape[2]),
            T.conv1x1(ifp, self.refine_ifp[0].tensor, self.refine_ifp[1].tensor))
        return T.add(
            T.upsample_bilinear(inter, ffp.shape[1], ffp.shape[2]),
            T.conv1x1(ffp, self.refine_ffp[0].tensor, self.refine_ffp[1].tensor))

    # -- pathway two -------------------------------------------------------

    def aux_head(self, sfm: Tensor, ifp: Tensor, ffp: Tensor,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Map each level to d/8 channels, upsample to the finest grid,
        concatenate, optionally drop out, then fuse and predict."""
        out_h, out_w = ffp.shape[1], ffp.shape[2]
        ups = []
        for name, fmap in (("sfm", sfm), ("ifp", ifp), ("ffp", ffp)):
            w1, b1, w2, b2 = self.aux_mlp[name]
            hidden = T.relu(T.conv1x1(fmap, w1.tensor, b1.tensor))
            mapped = T.conv1x1(hidden, w2.tensor, b2.tensor)
            ups.append(T.upsample_bilinear(mapped, out_h, out_w))
        cat = T.concat_channels(ups)
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("train-mode aux head needs an RNG for dropout")
            cat = T.dropout(cat, self.dropout, rng)
        fused = T.conv1x1(cat, self.aux_fuse[0].tensor, self.aux_fuse[1].tensor)
        return T.conv1x1(fused, self.aux_pred[0].tensor, self.aux_pred[1].tensor)

    # -- whole decoder -----------------------------------------------------

    def forward(self, triple: FeatureTriple, train: bool = False,
                rng: np.random.Generator | None = None) -> DualLogits:
        s_low = self.mask_decode(add_sine_pe(triple.sfm))
        s0 = self.refine(s_low, triple.ifp, triple.ffp)
        s1 = self.aux_head(triple.sfm, triple.ifp, triple.ffp, train=train, rng=rng)
        return DualLogits(s0=s0, s1=s1)
