"""Training machinery: hard-pixel-mining cross entropy, the dual-head loss,
an adaptive optimizer with decoupled weight decay, the warmup/polynomial
learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import DualLogits, combine_predictions
from .tensor import Parameter, Tensor

log = logging.getLogger("moleseg")

IGNORE_LABEL = 255


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; the step was rejected."""


@dataclass
class OhemConfig:
    prob_threshold: float = 0.7
    divisor: int = 16
    ignore_label: int = IGNORE_LABEL


def ohem_ce(logits: Tensor, labels: np.ndarray, cfg: OhemConfig | None = None) -> Tensor:
    """Cross entropy averaged over the hardest pixels.

    A pixel is hard when its probability of the true class falls below the
    threshold; at least floor(n_total/16) pixels (and at least one) are kept,
    ranked by per-pixel loss. Ignored pixels contribute nothing.
    """
    cfg = cfg or OhemConfig()
    c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise T.ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat_labels = labels.reshape(-1).astype(np.int64)
    valid = flat_labels != cfg.ignore_label
    bad = (flat_labels < 0) | ((flat_labels >= c) & valid)
    if bad.any():
        raise ValueError(f"labels outside [0, {c}) + ignore: {np.unique(flat_labels[bad])}")
    n_total = int(valid.sum())
    if n_total == 0:
        log.warning("ohem_ce: every pixel is ignored; loss defined as zero")
        return Tensor(np.zeros((), dtype=logits.dtype))

    # CE in float64 regardless of model dtype: near-zero losses would other-
    # wise drown in the cancellation of lse - logit
    data = logits.data.reshape(c, -1)[:, valid].astype(np.float64)
    lab = flat_labels[valid]
    m = data.max(axis=0)
    lse = np.log(np.exp(data - m).sum(axis=0)) + m
    ce = lse - data[lab, np.arange(n_total)]
    p_correct = np.exp(-ce)

    n_threshold = n_total // cfg.divisor
    n_candidates = int((p_correct < cfg.prob_threshold).sum())
    n_keep = min(max(max(n_candidates, n_threshold), 1), n_total)
    order = np.argsort(-ce, kind="stable")[:n_keep]
    loss_val = np.asarray(ce[order].sum() / n_keep, dtype=logits.dtype)

    hard_flat = np.flatnonzero(valid)[order]
    hard_labels = lab[order]

    def bwd(g):
        cols = logits.data.reshape(c, -1)[:, hard_flat].astype(np.float64)
        mm = cols.max(axis=0)
        ee = np.exp(cols - mm)
        probs = ee / ee.sum(axis=0)
        probs[hard_labels, np.arange(n_keep)] -= 1.0
        grad = np.zeros((c, h * w), dtype=logits.dtype)
        grad[:, hard_flat] = (probs * (float(g) / n_keep)).astype(logits.dtype)
        T._accum(logits, grad.reshape(c, h, w))

    return T._make(loss_val, (logits,), bwd)


def head_losses(dual: DualLogits, labels: np.ndarray,
                cfg: OhemConfig | None = None) -> tuple[Tensor, Tensor]:
    """Mining loss of each pathway, computed at label resolution."""
    h, w = labels.shape
    up0 = T.upsample_bilinear(dual.s0, h, w)
    up1 = T.upsample_bilinear(dual.s1, h, w)
    return ohem_ce(up0, labels, cfg), ohem_ce(up1, labels, cfg)


def total_loss(dual: DualLogits, labels: np.ndarray, w0: float = 1.0,
               w1: float = 1.0, cfg: OhemConfig | None = None) -> Tensor:
    """Weighted sum of the two pathway losses."""
    if w0 < 0 or w1 < 0:
        raise ValueError("loss weights must be non-negative")
    if w0 == 0 and w1 == 0:
        raise ValueError("at least one loss weight must be positive")
    l0, l1 = head_losses(dual, labels, cfg)
    return T.add(T.mul(l0, w0), T.mul(l1, w1))


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, params: list[Parameter], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        frozen = [p.name for p in params if p.frozen]
        if frozen:
            raise ValueError(f"frozen parameters passed to the optimizer: {frozen}")
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        # validate before mutating anything so a bad step is rejected whole
        for p in self.params:
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient for {p.name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            arr = p.tensor.data
            if self.weight_decay:
                arr *= 1.0 - lr * self.weight_decay  # decoupled, exact shrink
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class Schedule:
    base_lr: float = 3e-4
    total_epochs: int = 100
    warmup_epochs: float = 10
    warmup_ratio: float = 0.1
    poly_power: float = 0.9

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup must be shorter than the run")
        if not 0 < self.warmup_ratio <= 1:
            raise ValueError("warmup ratio must be in (0, 1]")


def lr_at(epoch: float, s: Schedule) -> float:
    """Linear warmup from base*ratio, then polynomial decay to zero."""
    if not 0 <= epoch <= s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    if epoch < s.warmup_epochs:
        frac = epoch / s.warmup_epochs
        return s.base_lr * (s.warmup_ratio + (1.0 - s.warmup_ratio) * frac)
    remain = 1.0 - (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.base_lr * remain ** s.poly_power


def train_loop(model, samples, cfg, out_dir, threads: int = 1) -> dict:
    """Seeded epoch loop: shuffle, forward, dual-head loss, backward, step.

    Writes ``metrics.log`` (one line per epoch) and checkpoints under
    ``out_dir``; on divergence the last completed checkpoint is retained and
    the error re-raised.
    """
    from . import checkpoint as ckpt
    from . import data as data_mod
    from .evaluation import ConfusionMatrix

    if not samples:
        raise ValueError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.log"

    ohem_cfg = OhemConfig(prob_threshold=cfg.model.p_th)
    sched = Schedule(base_lr=cfg.optim.base_lr, total_epochs=max(cfg.optim.epochs, 1),
                     warmup_epochs=min(cfg.optim.warmup_epochs, max(cfg.optim.epochs - 1, 0)),
                     warmup_ratio=cfg.optim.warmup_ratio,
                     poly_power=cfg.optim.poly_power)
    opt = AdamW(model.trainable_parameters(), weight_decay=cfg.optim.weight_decay,
                betas=cfg.optim.betas)
    rng = np.random.default_rng(cfg.optim.seed)
    n = len(samples)
    batch = max(1, cfg.optim.batch)
    steps_per_epoch = (n + batch - 1) // batch
    best_miou = -1.0
    step = 0

    def save(tag):
        ckpt.save_checkpoint(out_dir / "checkpoints" / tag, model, cfg, step)

    save("last")
    with open(metrics_path, "w") as metrics:
        for epoch in range(cfg.optim.epochs):
            perm = rng.permutation(n)
            cm = ConfusionMatrix(model.num_classes)
            epoch_l0 = epoch_l1 = epoch_total = 0.0
            lr_epoch = lr_at(float(epoch), sched)
            for b in range(steps_per_epoch):
                idxs = perm[b * batch:(b + 1) * batch]
                lr = lr_at(epoch + b / steps_per_epoch, sched)
                opt.zero_grad()
                b_l0 = b_l1 = 0.0
                for idx in idxs:
                    sample = samples[int(idx)]
                    if cfg.data.augment:
                        sample = data_mod.augment(
                            sample, seed=int(rng.integers(2 ** 31)),
                            crop_hw=(cfg.data.height, cfg.data.width))
                    dual, (h, w), _ = model.forward(sample.modalities, train=True, rng=rng)
                    l0, l1 = head_losses(dual, sample.label, ohem_cfg)
                    loss = T.add(T.mul(l0, cfg.model.w0), T.mul(l1, cfg.model.w1))
                    if not np.isfinite(loss.data):
                        raise DivergenceError(f"non-finite loss at step {step}")
                    b_l0 += l0.item()
                    b_l1 += l1.item()
                    if loss.requires_grad:
                        T.mul(loss, 1.0 / len(idxs)).backward()
                    with T.no_grad():
                        combined = combine_predictions(
                            Tensor(dual.s0.data), Tensor(dual.s1.data), h, w)
                    cm.accumulate(np.argmax(combined.data, axis=0), sample.label)
                opt.step(lr)
                step += 1
                b_l0 /= len(idxs)
                b_l1 /= len(idxs)
                epoch_l0 += b_l0
                epoch_l1 += b_l1
                epoch_total += cfg.model.w0 * b_l0 + cfg.model.w1 * b_l1
            epoch_l0 /= steps_per_epoch
            epoch_l1 /= steps_per_epoch
            epoch_total /= steps_per_epoch
            _, miou = cm.miou()
            metrics.write(f"{epoch},{lr_epoch:.6g},{epoch_l0:.6g},{epoch_l1:.6g},"
                          f"{epoch_total:.6g},{miou:.6g}\n")
            metrics.flush()
            log.info("epoch %d lr %.3g loss %.4g train-miou %.4g",
                     epoch, lr_epoch, epoch_total, miou)
            if (epoch + 1) % max(cfg.optim.checkpoint_every, 1) == 0 or \
                    epoch + 1 == cfg.optim.epochs:
                save("last")
            if miou > best_miou:
                best_miou = miou
                save("best")
    return {"metrics": str(metrics_path), "steps": step, "best_train_miou": best_miou,
            "checkpoints": str(out_dir / "checkpoints")}
