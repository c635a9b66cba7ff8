"""Cross-modal fusion: uniform averaging, spatial-mean gate embeddings,
softmax routing over the present modalities, top-k weighted mixing, and the
halved-sum combination of the averaged and routed maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .neck import FeatureTriple
from .tensor import Parameter, ParameterRegistry, Tensor

LEVELS = ("sfm", "ifp", "ffp")


@dataclass
class RouterParams:
    """One scalar-logit gate per pyramid level: a weight vector over the
    level's channels plus a bias."""

    level: str
    weight: Parameter
    bias: Parameter


@dataclass
class RoutingDecision:
    level: str
    modalities: list[str]
    weights: Tensor              # softmax over present modalities, taped
    selected: list[int]          # indices into ``modalities``, ascending
    k: int

    def weight_floats(self) -> dict[str, float]:
        return {m: float(self.weights.data[i]) for i, m in enumerate(self.modalities)}


def make_routers(channels: dict[str, int], registry: ParameterRegistry,
                 rng: np.random.Generator, prefix: str = "router") -> dict[str, RouterParams]:
    routers = {}
    for level in LEVELS:
        c = channels[level]
        routers[level] = RouterParams(
            level=level,
            weight=registry.register(f"{prefix}.{level}.w",
                                     rng.standard_normal(c) / math.sqrt(c)),
            bias=registry.register(f"{prefix}.{level}.b", np.zeros(())),
        )
    return routers


def average_modalities(maps: list[Tensor]) -> Tensor:
    """Elementwise arithmetic mean over the present modalities."""
    if not maps:
        raise ValueError("cannot average an empty modality set")
    acc = maps[0]
    for m in maps[1:]:
        acc = T.add(acc, m)
    return T.mul(acc, 1.0 / len(maps))


def route(maps: list[Tensor], names: list[str], router: RouterParams,
          k: int) -> RoutingDecision:
    """Score each modality from its spatially averaged embedding and keep
    the k largest softmax weights (ties fall to the lower index)."""
    if not maps:
        raise ValueError("cannot route an empty modality set")
    logits = []
    for m in maps:
        f = T.mean_spatial(m)
        logits.append(T.add(T.sum_all(T.mul(router.weight.tensor, f)),
                            router.bias.tensor))
    weights = T.softmax(T.stack1d(logits), axis=0)
    k_eff = min(k, len(maps))
    order = sorted(range(len(maps)), key=lambda i: (-float(weights.data[i]), i))
    selected = sorted(order[:k_eff])
    return RoutingDecision(level=router.level, modalities=list(names),
                           weights=weights, selected=selected, k=k_eff)


def topk_fuse(maps: list[Tensor], decision: RoutingDecision,
              renormalize: bool = False) -> Tensor:
    """Weighted sum of the selected modalities; unselected ones contribute
    nothing. Surviving weights are used as-is unless ``renormalize``."""
    if len(maps) != len(decision.modalities):
        raise ValueError(
            f"decision covers {len(decision.modalities)} modalities, got {len(maps)} maps")
    picked = [T.select_index(decision.weights, i) for i in decision.selected]
    if renormalize:
        total = picked[0]
        for w in picked[1:]:
            total = T.add(total, w)
        picked = [T.div(w, total) for w in picked]
    out = None
    for w, i in zip(picked, decision.selected):
        term = T.mul(maps[i], T.reshape(w, (1, 1, 1)))
        out = term if out is None else T.add(out, term)
    return out


def unify(averaged: Tensor, routed: Tensor) -> Tensor:
    """Halved sum of the uniform and routed maps."""
    if averaged.shape != routed.shape:
        raise T.ShapeError(f"unify shape mismatch: {averaged.shape} vs {routed.shape}")
    return T.mul(T.add(averaged, routed), 0.5)


def fuse_streams(triples: list[tuple[str, FeatureTriple]],
                 routers: dict[str, RouterParams], k: int,
                 renormalize: bool = False):
    """Fuse per-modality triples level by level; returns the fused triple
    and the per-level routing decisions."""
    if not triples:
        raise ValueError("fuse_streams needs at least one modality")
    names = [name for name, _ in triples]
    fused: dict[str, Tensor] = {}
    decisions: dict[str, RoutingDecision] = {}
    for level in LEVELS:
        maps = [triple.level_maps()[level] for _, triple in triples]
        averaged = average_modalities(maps)
        decision = route(maps, names, routers[level], k)
        routed = topk_fuse(maps, decision, renormalize=renormalize)
        fused[level] = unify(averaged, routed)
        decisions[level] = decision
    return FeatureTriple(sfm=fused["sfm"], ifp=fused["ifp"], ffp=fused["ffp"],
                         tag="fused"), decisions
