"""Full segmentation model: per-modality encoders sharing one frozen
backbone, pyramid neck(s), routed cross-modal fusion, dual-pathway decoder."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .decoder import Decoder, DualLogits, combine_predictions
from .encoder import Encoder, EncoderConfig
from .fusion import fuse_streams, make_routers
from .neck import Neck
from .tensor import ParameterRegistry, Tensor

INPUT_SCALE = 127.5  # rasters arrive in [0, 255]; map to [-1, 1]


class MultiModalSegmenter:
    """Owns the parameter registry and wires the pipeline end to end."""

    def __init__(self, modalities: dict[str, int], num_classes: int,
                 d: int = 32, stages: int = 3, window: int = 4, heads: int = 2,
                 rank: int = 32, k: int | None = None, renormalize_topk: bool = False,
                 dropout: float = 0.1, inference_head: str = "combined",
                 shared_neck: bool = True, freeze_neck: bool = False, seed: int = 0):
        if not modalities:
            raise ValueError("model needs at least one modality")
        if inference_head not in ("combined", "s0", "s1"):
            raise ValueError(f"unknown inference head {inference_head!r}")
        self.modalities = list(modalities)
        self.num_classes = num_classes
        self.d = d
        self.inference_head = inference_head
        self.k = k if k is not None else math.ceil(len(self.modalities) / 2)
        self.renormalize_topk = renormalize_topk
        self.dtype = np.float32

        rng = np.random.default_rng(seed)
        self.registry = ParameterRegistry()
        enc_cfg = EncoderConfig(in_channels=dict(modalities), embed_dim=d,
                                num_stages=stages, window=window, heads=heads,
                                rank=rank)
        self.encoder = Encoder(enc_cfg, self.registry, rng)
        stage_channels = [enc_cfg.stage_channels(i) for i in range(stages)]
        if shared_neck:
            shared = Neck(stage_channels, d, self.registry, rng, frozen=freeze_neck)
            self.necks = {m: shared for m in self.modalities}
        else:
            self.necks = {
                m: Neck(stage_channels, d, self.registry, rng,
                        prefix=f"neck.{m}", frozen=freeze_neck)
                for m in self.modalities
            }
        self.routers = make_routers({"sfm": d, "ifp": d // 4, "ffp": d // 8},
                                    self.registry, rng)
        self.decoder = Decoder(d, num_classes, self.registry, rng, dropout=dropout)

    # -- forward -----------------------------------------------------------

    def _normalize(self, raster: np.ndarray) -> Tensor:
        arr = np.asarray(raster, dtype=self.dtype)
        return Tensor((arr - INPUT_SCALE) / INPUT_SCALE)

    def forward(self, rasters: dict[str, np.ndarray], train: bool = False,
                rng: np.random.Generator | None = None):
        """Run the pipeline on [C,H,W] rasters keyed by modality.

        Returns (DualLogits, (H, W), routing decisions). Modalities are
        processed in registration order regardless of dict order.
        """
        unknown = set(rasters) - set(self.modalities)
        if unknown:
            raise KeyError(f"unknown modalities {sorted(unknown)}; "
                           f"model knows {self.modalities}")
        present = [m for m in self.modalities if m in rasters]
        if not present:
            raise ValueError("no registered modality present in the sample")
        shapes = {rasters[m].shape[1:] for m in present}
        if len(shapes) > 1:
            raise T.ShapeError(f"modalities disagree on spatial size: {shapes}")
        h, w = next(iter(shapes))

        triples = []
        for m in present:
            x = T.transpose(self._normalize(rasters[m]), (1, 2, 0))
            feats = self.encoder.encode(x, m)
            triples.append((m, self.necks[m].forward(feats, tag=m)))
        fused, decisions = fuse_streams(triples, self.routers, self.k,
                                        renormalize=self.renormalize_topk)
        dual = self.decoder.forward(fused, train=train, rng=rng)
        return dual, (h, w), decisions

    def logits(self, rasters: dict[str, np.ndarray], head: str | None = None) -> np.ndarray:
        """Inference logits at input resolution using the configured head."""
        head = head or self.inference_head
        with T.no_grad():
            dual, (h, w), _ = self.forward(rasters, train=False)
            if head == "combined":
                out = combine_predictions(dual.s0, dual.s1, h, w)
            elif head == "s0":
                out = T.upsample_bilinear(dual.s0, h, w)
            else:
                out = T.upsample_bilinear(dual.s1, h, w)
        return out.data

    def predict(self, rasters: dict[str, np.ndarray], head: str | None = None) -> np.ndarray:
        """Per-pixel class ids (argmax; ties go to the lower class id)."""
        return np.argmax(self.logits(rasters, head), axis=0)

    # -- persistence / utilities -------------------------------------------

    def cast(self, dtype):
        """Switch parameter precision (float64 for gradient checks)."""
        self.registry.cast(dtype)
        self.dtype = np.dtype(dtype).type

    def state_dict(self):
        return self.registry.state_dict()

    def load_state_dict(self, state):
        self.registry.load_state_dict(state)

    def trainable_parameters(self):
        return self.registry.trainable()
