"""Confusion-matrix metrics and the scenario runner for missing-modality and
noise robustness grids."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import ModalitySample, NoiseSpec, drop_modalities, inject_noise

IGNORE_LABEL = 255


class ConfusionMatrix:
    """Rows are ground truth, columns prediction; ignore pixels excluded."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} vs labels {gt.shape}")
        keep = gt != IGNORE_LABEL
        pred = pred[keep]
        gt = gt[keep]
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise ValueError(f"prediction ids outside [0, {self.num_classes})")
        if gt.size and (gt.min() < 0 or gt.max() >= self.num_classes):
            raise ValueError(f"label ids outside [0, {self.num_classes}) + ignore")
        flat = gt.astype(np.int64) * self.num_classes + pred.astype(np.int64)
        self.counts += np.bincount(
            flat, minlength=self.num_classes ** 2
        ).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def miou(self) -> tuple[list[float], float]:
        """Per-class intersection over union and its mean.

        Classes absent from both prediction and ground truth carry NaN and
        are excluded from the mean.
        """
        if self.total() == 0:
            raise ValueError("no evaluated pixels in the confusion matrix")
        per_class = []
        present = []
        for c in range(self.num_classes):
            tp = int(self.counts[c, c])
            fp = int(self.counts[:, c].sum()) - tp
            fn = int(self.counts[c, :].sum()) - tp
            union = tp + fp + fn
            if union == 0:
                per_class.append(float("nan"))
            else:
                iou = tp / union
                per_class.append(iou)
                present.append(iou)
        return per_class, float(np.mean(present))


@dataclass
class Scenario:
    name: str
    keep: tuple[str, ...]
    noise: NoiseSpec | None = None

    def noise_desc(self) -> str:
        return self.noise.describe() if self.noise else "none"


@dataclass
class ScenarioResult:
    scenario: Scenario
    per_class_iou: list[float]
    miou: float
    samples: int


def evaluate_samples(model, samples, head: str | None = None,
                     threads: int = 1) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.num_classes)

    def one(sample: ModalitySample) -> ConfusionMatrix:
        local = ConfusionMatrix(model.num_classes)
        pred = model.predict(sample.modalities, head=head)
        return local.accumulate(pred, sample.label)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(one, samples):
                cm.merge(part)
    else:
        for sample in samples:
            cm.merge(one(sample))
    return cm


def run_scenarios(model, samples, scenarios: list[Scenario],
                  head: str | None = None, threads: int = 1) -> list[ScenarioResult]:
    """Evaluate each scenario independently: restrict the sample to the kept
    modalities, optionally add noise, and accumulate metrics."""
    trained = set(model.modalities)
    results = []
    for sc in scenarios:
        missing = [m for m in sc.keep if m not in trained]
        if missing:
            raise ValueError(f"scenario {sc.name!r} uses untrained modalities {missing}")
        transformed = []
        for idx, sample in enumerate(samples):
            s = drop_modalities(sample, sc.keep)
            if sc.noise is not None:
                # distinct draw per sample, still fully determined by the spec
                s = inject_noise(s, replace(sc.noise, seed=sc.noise.seed + idx))
            transformed.append(s)
        cm = evaluate_samples(model, transformed, head=head, threads=threads)
        per_class, miou = cm.miou()
        results.append(ScenarioResult(sc, per_class, miou, len(samples)))
    return results


def all_subset_scenarios(modalities: list[str]) -> list[Scenario]:
    """Every nonempty kept-set, ordered by size then lexicographically."""
    out = []
    for size in range(1, len(modalities) + 1):
        for combo in sorted(combinations(sorted(modalities), size)):
            ordered = tuple(m for m in modalities if m in combo)
            out.append(Scenario(name="+".join(ordered), keep=ordered))
    return out


def write_results_csv(path, results: list[ScenarioResult], num_classes: int) -> None:
    """Grid CSV: one scenario per row, per-class IoU columns then the mean.

    Classes with no presence in either prediction or ground truth are
    written as empty cells (they are excluded from the mean).
    """
    lines = ["scenario,kept_modalities,noise,"
             + ",".join(f"class_{c}" for c in range(num_classes)) + ",miou,samples"]
    for res in results:
        cells = ["" if np.isnan(v) else f"{v:.4f}" for v in res.per_class_iou]
        lines.append(",".join([
            res.scenario.name,
            "+".join(res.scenario.keep),
            res.scenario.noise_desc(),
            *cells,
            f"{res.miou:.4f}",
            str(res.samples),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")
