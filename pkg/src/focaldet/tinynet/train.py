"""Training loop: detection heads by backprop, suppression head detached."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from focaldet.boxes import GridShape
from focaldet.data.synthetic import Dataset
from focaldet.data.tensorfile import Checkpoint
from focaldet.decode import DecodeConfig, decode
from focaldet.encode import TargetMaps, encode_targets
from focaldet.losses import FocalParams, LossWeights, fdn_loss
from focaldet.suppress import make_suppression_labels, train_suppression_step
from focaldet.tinynet.autograd import Tape, attach_loss
from focaldet.tinynet.model import ModelParams, forward_fdn, init_params
from focaldet.tinynet.optim import EmaState, ema_update, make_optimizer, warmup_lr


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    warmup_iters: int = 500
    seed: int = 0
    optimizer: str = "adam"
    ema_momentum: float = 0.999
    suppress: bool = True
    sup_detections_per_image: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)

    def __post_init__(self):
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def echo(self) -> dict:
        return asdict(self)


def _backbone_and_fdn(params: ModelParams):
    return {k: t for k, t in params.items() if not k.startswith("sup.")}


def fdn_step(
    images: np.ndarray,
    targets: list[TargetMaps],
    params: ModelParams,
    weights: LossWeights,
    focal: FocalParams,
):
    """Forward, loss and backward for one batch; gradients land in ``params``.

    Returns the network output and the batch-mean loss components
    (total, center, scale, offset). Each image's loss is normalized by
    its own positive count; the batch loss is their mean.
    """
    n = len(targets)
    params.zero_grad()
    with Tape() as tape:
        out = forward_fdn(images, params)
        g_c = np.zeros_like(out.center.value)
        g_h = np.zeros_like(out.log_h.value)
        g_o = np.zeros_like(out.offset.value)
        sums = np.zeros(4)
        for k, tgt in enumerate(targets):
            res = fdn_loss(
                out.center.value[k, :, :, 0],
                out.log_h.value[k, :, :, 0],
                out.offset.value[k].transpose(2, 0, 1),
                tgt,
                weights,
                focal,
            )
            sums += (res.total, res.center, res.scale, res.offset)
            g_c[k, :, :, 0] = res.grad_center / n
            g_h[k, :, :, 0] = res.grad_log_h / n
            g_o[k] = res.grad_offset.transpose(1, 2, 0) / n
        loss = attach_loss([out.center, out.log_h, out.offset], sums[0] / n, [g_c, g_h, g_o])
    tape.backward(loss)
    return out, sums / n


def _checkpoint(params, ema, opt, meta) -> Checkpoint:
    return Checkpoint(
        params={k: v.copy() for k, v in params.arrays().items()},
        ema={k: v.copy() for k, v in ema.shadow.items()},
        opt=opt.state_arrays(),
        meta=meta,
    )


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    init: Optional[Checkpoint] = None,
    log: Optional[Callable[[str], None]] = None,
) -> Checkpoint:
    """Train the detector (and, unless disabled, the suppression head).

    Per iteration: forward, composite loss, backward, optimizer step on
    backbone and detection heads, then a detached BCE step on the
    suppression head using the current detections, then the EMA update.
    Starting from ``init`` continues its parameters, EMA, optimizer state
    and iteration counter (progressive fine-tuning).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    first = dataset.images[dataset.image_ids[0]]
    shape = GridShape(first.shape[0], first.shape[1], 4)
    targets = {i: encode_targets(dataset.annotations[i], shape) for i in dataset.image_ids}

    opt = make_optimizer(cfg.optimizer)
    iteration = 0
    if init is None:
        params = init_params(cfg.seed)
        ema = EmaState.from_params(params.tensors, cfg.ema_momentum, ramp=True)
    else:
        params = ModelParams.from_arrays(init.params)
        ema = EmaState({k: v.copy() for k, v in init.ema.items()}, cfg.ema_momentum,
                       int(init.meta.get("ema_step", 0)), ramp=True)
        opt.load_state_arrays(init.opt)
        iteration = int(init.meta.get("iteration", 0))

    dcfg = DecodeConfig(max_detections=cfg.sup_detections_per_image)
    fdn_params = _backbone_and_fdn(params)
    sup_params = params.group("sup.")
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums, n_batches, sup_sum, sup_batches = np.zeros(4), 0, 0.0, 0
        for b0 in range(0, n, cfg.batch_size):
            ids = [dataset.image_ids[k] for k in order[b0 : b0 + cfg.batch_size]]
            images = np.stack([dataset.images[i] for i in ids])
            out, comps = fdn_step(images, [targets[i] for i in ids], params, cfg.weights, cfg.focal)
            if not np.all(np.isfinite(comps)):
                raise TrainingError(f"non-finite loss at iteration {iteration}: {comps.tolist()}")
            lr = warmup_lr(cfg.lr, iteration, cfg.warmup_iters)
            opt.step(fdn_params, lr)
            sums += comps
            n_batches += 1

            if cfg.suppress:
                batch = []
                for k, image_id in enumerate(ids):
                    dets = decode(
                        out.center.value[k, :, :, 0],
                        out.log_h.value[k, :, :, 0],
                        out.offset.value[k].transpose(2, 0, 1),
                        dcfg,
                        shape,
                        image_id,
                    )
                    labels = make_suppression_labels(dets, dataset.annotations[image_id])
                    batch.append((out.features.value[k], dets, labels))
                sup_loss = train_suppression_step(batch, sup_params, opt, lr)
                if sup_loss is not None:
                    if not math.isfinite(sup_loss):
                        raise TrainingError(f"non-finite suppression loss at iteration {iteration}")
                    sup_sum += sup_loss
                    sup_batches += 1
            ema_update(ema, params.tensors)
            iteration += 1
        if log is not None:
            m = sums / max(n_batches, 1)
            l_sup = sup_sum / sup_batches if sup_batches else float("nan")
            log(
                f"epoch={epoch + 1} l_cls={m[1]:.6f} l_reg={m[2]:.6f} l_off={m[3]:.6f} "
                f"l_fdn={m[0]:.6f} l_sup={l_sup:.6f}"
            )

    meta = {"iteration": iteration, "ema_step": ema.step, "config": cfg.echo()}
    if init is not None:
        meta["init_iteration"] = int(init.meta.get("iteration", 0))
    return _checkpoint(params, ema, opt, meta)
