"""Contrastive pretraining loop with Fréchet-distance batch gating.

Epochs before the calibration epoch train on every batch. During the
calibration epoch every batch still updates the model and its FRD score is
recorded; the mean of those scores becomes the frozen threshold. Later
epochs gate each batch: accept, re-augment once, or skip.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .augment import AugmentedBatchPair, derive_seed, make_pair
from .config import TrainConfig, dump_config
from .curation import ThresholdState, calibrate_threshold, curate, frd_between
from .datasets import BatchPlan, ImageDataset, iterate_batches
from .errors import NumericalError
from .losses import LossBreakdown, regularized_loss
from .model import Forward, ModelParams, init_params, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "batch_index", "lr", "ntxent", "regularizer", "total", "frd", "attempt", "action")


@dataclass
class StepRecord:
    epoch: int
    batch_index: int
    lr: float
    loss: LossBreakdown
    frd_score: float | None = None
    decision: object | None = None  # CurationDecision when gating was active
    attempt: int = 1

    @property
    def action(self):
        return self.decision.action if self.decision is not None else "update"

    @property
    def updated(self):
        return self.action != "skipped"

    def row(self):
        def f(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.epoch), str(self.batch_index), f(self.lr), f(self.loss.nt_xent),
            f(self.loss.regularizer), f(self.loss.total), f(self.frd_score), str(self.attempt), self.action,
        ]


@dataclass
class PretrainResult:
    params: ModelParams
    records: list
    threshold: ThresholdState | None
    metrics_path: Path | None
    epoch_losses: list


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Per-epoch learning rate; ``epoch`` is 0-based.

    Linear warmup to ``base_lr`` over ``warmup_epochs``, then cosine decay
    without restarts over the remaining epochs.
    """
    w, e, base = config.warmup_epochs, config.epochs, config.base_lr
    if epoch < w:
        return base * (epoch + 1) / w
    if e == w:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (e - w)))


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params: ModelParams, grads: dict, lr: float):
        for name, w in params.weights.items():
            g = grads[name] + self.weight_decay * w
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = g.copy()
            else:
                v *= self.momentum
                v += g
            w -= lr * v

    def state_copy(self):
        return {k: v.copy() for k, v in self.velocity.items()}


def _forward_pair(params, pair: AugmentedBatchPair, config: TrainConfig):
    fwd = Forward(params, training=True)
    n = len(pair)
    h = fwd.encoder(np.concatenate([pair.view1, pair.view2]))
    z = fwd.projection(h)
    feats = z.data if config.curation.feature == "z" else h.data
    return fwd, ad.slice_rows(z, 0, n), ad.slice_rows(z, n, 2 * n), feats[:n], feats[n:]


def score_pair(params: ModelParams, pair: AugmentedBatchPair, config: TrainConfig) -> float:
    """FRD of a pair as the trainer sees it; does not touch parameters or running stats."""
    _, _, _, f1, f2 = _forward_pair(params, pair, config)
    return frd_between(f1, f2, config.curation.shrinkage, config.curation.normalize)


def train_step(
    params: ModelParams,
    pair: AugmentedBatchPair,
    config: TrainConfig,
    optimizer: SGDMomentum,
    lr: float,
    threshold: ThresholdState | None = None,
    redraw: Callable[[], AugmentedBatchPair] | None = None,
    record_frd: bool = False,
    epoch: int = 0,
    batch_index: int = 0,
) -> StepRecord:
    """One optimization step, gated by ``threshold`` when it is given.

    Parameters, optimizer buffers and BN running statistics are only mutated
    when the step is not skipped.
    """
    cur = config.curation
    fwd, z1, z2, f1, f2 = _forward_pair(params, pair, config)
    score = frd_between(f1, f2, cur.shrinkage, cur.normalize) if (threshold is not None or record_frd) else None
    decision, attempt = None, 1
    if threshold is not None:
        decision = curate(score, threshold, 1)
        if not decision.accepted:
            attempt = 2
            if redraw is not None:
                pair = redraw()
                fwd, z1, z2, f1, f2 = _forward_pair(params, pair, config)
                score = frd_between(f1, f2, cur.shrinkage, cur.normalize)
            decision = curate(score, threshold, 2)

    total, breakdown = regularized_loss(z1, z2, config.loss)
    if not np.isfinite(breakdown.total):
        raise NumericalError(
            f"non-finite loss at epoch {epoch} batch {batch_index}: {breakdown}; frd={score}; "
            f"|z1| range [{np.linalg.norm(z1.data, axis=1).min():.3g}, {np.linalg.norm(z1.data, axis=1).max():.3g}], "
            f"|z2| range [{np.linalg.norm(z2.data, axis=1).min():.3g}, {np.linalg.norm(z2.data, axis=1).max():.3g}], "
            f"source rows {pair.source_indices[:8].tolist()}..."
        )
    record = StepRecord(epoch, batch_index, lr, breakdown, score, decision, attempt)
    if decision is not None and decision.action == "skipped":
        return record
    total.backward()
    optimizer.step(params, fwd.grads(), lr)
    params.commit_bn_stats(fwd.bn_stats)
    return record


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(METRIC_COLUMNS)

    def write(self, record: StepRecord):
        self._csv.writerow(record.row())
        self._fh.flush()

    def close(self):
        self._fh.close()


def prepare_config(config: TrainConfig, dataset: ImageDataset) -> TrainConfig:
    """Fill data-dependent fields: channel statistics and encoder input geometry."""
    t = config.transform
    if t.channel_mean is None or t.channel_std is None:
        mean, std = dataset.channel_stats()
        t = replace(t, channel_mean=mean, channel_std=std)
    c, h, _ = dataset.image_shape
    enc = replace(config.encoder, in_channels=c, image_size=t.output_size or h)
    return replace(config, transform=t, encoder=enc).validate()


def pretrain(dataset: ImageDataset, config: TrainConfig, output_dir=None, params: ModelParams | None = None,
             progress: Callable[[int, float], None] | None = None) -> PretrainResult:
    """Full pretraining run. Writes metrics/checkpoints/threshold when ``output_dir`` is given."""
    config = prepare_config(config, dataset)
    params = params or init_params(config.encoder)
    params.metadata.update({"config": dump_config(config), "dataset": dataset.name})
    optimizer = SGDMomentum(config.optimizer.momentum, config.optimizer.weight_decay)
    plan = BatchPlan(config.seed, config.batch_size, drop_last=True)
    out = Path(output_dir) if output_dir is not None else None
    writer = MetricsWriter(out / "metrics.csv") if out is not None else None

    threshold, calib_scores, records, epoch_losses = None, [], [], []
    try:
        for epoch in range(1, config.epochs + 1):
            lr = lr_at(config, epoch - 1)
            gating = threshold if config.curation_enabled and epoch > config.calibration_epoch else None
            record_frd = config.curation_enabled and epoch == config.calibration_epoch
            losses = []
            for b, idx in enumerate(iterate_batches(dataset, plan, epoch)):
                pair = make_pair(dataset, idx, config.transform, derive_seed(config.seed, epoch, b, 1))

                def redraw(idx=idx, b=b, epoch=epoch):
                    return make_pair(dataset, idx, config.transform, derive_seed(config.seed, epoch, b, 2))

                rec = train_step(params, pair, config, optimizer, lr, gating, redraw, record_frd, epoch, b)
                records.append(rec)
                if writer:
                    writer.write(rec)
                if record_frd:
                    calib_scores.append(rec.frd_score)
                if rec.updated:
                    losses.append(rec.loss.total)
            epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
            if record_frd:
                threshold = calibrate_threshold(calib_scores, config.calibration_epoch)
                if out is not None:
                    (out / "threshold.json").write_text(json.dumps(threshold.to_dict(), indent=2) + "\n")
            params.metadata["epoch"] = epoch
            logger.info("epoch %d lr %.4g loss %.5f", epoch, lr, epoch_losses[-1])
            if progress:
                progress(epoch, epoch_losses[-1])
            if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(params, out / "checkpoints" / f"epoch_{epoch:04d}.cur")
    finally:
        if writer:
            writer.close()
    if out is not None:
        save_checkpoint(params, out / "final.cur")
    return PretrainResult(params, records, threshold, writer.path if writer else None, epoch_losses)


def score_batches(params: ModelParams, dataset: ImageDataset, config: TrainConfig, count: int,
                  corrupt: str | None = None, seed: int = 0) -> list:
    """FRD of ``count`` freshly drawn batches, optionally with view 2 corrupted.

    Batch ``t`` uses the same source rows and augmentation draws whether or
    not ``corrupt`` is set, so benign and corrupted scores pair up by index.
    """
    from .augment import corrupt_view

    config = prepare_config(config, dataset)
    plan = BatchPlan(seed, config.batch_size, drop_last=True)
    scores = []
    for t in range(count):
        idx = iterate_batches(dataset, plan, t + 1)[0]
        pair = make_pair(dataset, idx, config.transform, derive_seed(seed, 0x5C0E, t))
        if corrupt is not None:
            pair = corrupt_view(pair, corrupt, np.random.default_rng(derive_seed(seed, 0xBAD, t)))
        scores.append(score_pair(params, pair, config))
    return scores


# ---------------------------------------------------------------------------
# ablation


LOSS_LABELS = {
    "none": "NT-Xent",
    "huber": "Reg. NT-Xent (Huber)",
    "l1": "Reg. NT-Xent (L1)",
    "l2": "Reg. NT-Xent (L2)",
}

ABLATION_COLUMNS = ("seed", "frd", "loss", "regularizer_kind", "top1", "status", "dataset_fingerprint")


def default_grid():
    return [(kind, frd) for frd in (False, True) for kind in ("huber", "l1", "l2")]


def _run_cell(cell, dataset, test_dataset, config, output_dir):
    from .evaluation import extract_embeddings, knn_probe

    kind, frd_on = cell
    cfg = replace(config, curation_enabled=frd_on, loss=replace(config.loss, regularizer_kind=kind))
    cell_dir = None if output_dir is None else Path(output_dir) / f"{'frd' if frd_on else 'nofrd'}_{kind}"
    result = pretrain(dataset, cfg, cell_dir)
    source = cfg.probe.source
    train_emb = extract_embeddings(result.params, dataset, source)
    test_emb = extract_embeddings(result.params, test_dataset, source)
    return knn_probe(train_emb, test_emb, cfg.probe.k)


def run_ablation(dataset, grid, config: TrainConfig, test_dataset=None, output_dir=None, parallel=False):
    """One pretrain + k-NN probe per ``(regularizer_kind, curation_on)`` cell.

    All cells share seeds and data. A failing cell is reported with
    ``status`` set to the error and does not stop the others.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("ablation grid is empty")
    if test_dataset is None:
        perm = np.random.default_rng(config.data.seed).permutation(len(dataset))
        cut = int(0.8 * len(dataset))
        dataset, test_dataset = dataset.subset(np.sort(perm[:cut])), dataset.subset(np.sort(perm[cut:]))
    fingerprint = dataset.fingerprint()

    def run(cell):
        try:
            return _run_cell(cell, dataset, test_dataset, config, output_dir), "ok"
        except Exception as exc:  # noqa: BLE001 -- failed cells are reported, not fatal
            logger.exception("ablation cell %s failed", cell)
            return None, f"failed: {type(exc).__name__}: {exc}"

    if parallel:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor() as pool:
            outcomes = list(pool.map(_run_cell_safe, [(c, dataset, test_dataset, config, output_dir) for c in grid]))
    else:
        outcomes = [run(c) for c in grid]

    rows = []
    for (kind, frd_on), (acc, status) in zip(grid, outcomes):
        rows.append({
            "seed": config.seed,
            "frd": "on" if frd_on else "off",
            "loss": LOSS_LABELS.get(kind, kind),
            "regularizer_kind": kind,
            "top1": acc,
            "status": status,
            "dataset_fingerprint": fingerprint,
        })
    return rows


def _run_cell_safe(args):
    try:
        return _run_cell(*args), "ok"
    except Exception as exc:  # noqa: BLE001
        return None, f"failed: {type(exc).__name__}: {exc}"


def write_ablation_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["seed"], r["frd"], r["loss"], r["regularizer_kind"],
                        "" if r["top1"] is None else f"{r['top1']:.6f}", r["status"], r["dataset_fingerprint"]])
    return path
