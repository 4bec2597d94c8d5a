"""Training loop: noise the encoded mask at a random step, regress the noise.

Checkpoints are directories holding ``manifest.json`` and ``weights.bin``.
``weights.bin`` is every tensor as little-endian float32, concatenated in
manifest order; the manifest records name, shape, byte offset and size of
each tensor plus an echo of the full config.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .dataio import Sample, augment
from .denoiser import VerseDiffUNet, build_model
from .diffusion import q_sample, training_loss
from .io import atomic_write_json, publish_dir
from .labelcodec import encode
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

FORMAT = "versediff-checkpoint/1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Checkpoint:
    state: "OrderedDict[str, torch.Tensor]"
    config: Config
    image_channels: int = 1
    epoch: int = 0
    step: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model: VerseDiffUNet, config: Config, **kw) -> "Checkpoint":
        state = OrderedDict((k, v.detach().to(torch.float32).clone()) for k, v in model.state_dict().items())
        return cls(state=state, config=copy.deepcopy(config), image_channels=model.cfg.image_channels, **kw)

    def build_model(self) -> VerseDiffUNet:
        model = build_model(self.config.model_config(self.image_channels))
        model.load_state_dict(self.state)
        model.eval()
        return model

    def schedule(self) -> NoiseSchedule:
        return self.config.schedule()

    def loss_stats(self) -> dict:
        h = self.loss_history
        tail = h[-100:]
        return {
            "steps": len(h),
            "last": h[-1] if h else None,
            "mean_last_100": float(np.mean(tail)) if tail else None,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors, chunks, offset = [], [], 0
        for name, t in self.state.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            raw = arr.tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        d = self.config.diffusion
        manifest = {
            "format": FORMAT,
            "dtype": "float32",
            "byteorder": "little",
            "tensors": tensors,
            "image_channels": self.image_channels,
            "schedule": {"T": d.T, "beta_start": d.beta_start, "beta_end": d.beta_end},
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.to_flat().items()},
            "epoch": self.epoch,
            "step": self.step,
            "loss_stats": self.loss_stats(),
            "loss_history": list(self.loss_history),
        }
        tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
        (tmp / "weights.bin").write_bytes(b"".join(chunks))
        atomic_write_json(tmp / "manifest.json", manifest)
        publish_dir(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} checkpoint")
        blob = (path / "weights.bin").read_bytes()
        state = OrderedDict()
        for t in manifest["tensors"]:
            raw = blob[t["offset"] : t["offset"] + t["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).astype(np.float32)
            state[t["name"]] = torch.from_numpy(arr.copy())
        config = Config.from_flat(manifest["config"])
        return cls(
            state=state,
            config=config,
            image_channels=manifest.get("image_channels", 1),
            epoch=manifest["epoch"],
            step=manifest["step"],
            loss_history=manifest.get("loss_history", []),
        )


def make_batch(batch: list[Sample], config: Config) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in batch]).astype(np.float32))
    x0 = np.stack([encode(s.mask, config.data.classes, config.data.label_coding) for s in batch])
    return images, torch.from_numpy(x0)


def train_step(
    batch: list[Sample],
    model: VerseDiffUNet,
    optimizer: torch.optim.Optimizer,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    config: Config,
    where: str = "",
) -> float:
    """One optimizer update on the eps-MSE of a batch; returns the loss."""
    if not batch:
        raise ValueError("empty batch")
    images, x0 = make_batch(batch, config)
    t = torch.randint(1, schedule.T + 1, (len(batch),), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    xt = q_sample(x0, t, eps, schedule)
    model.train()
    loss = training_loss(eps, model(images, xt, t))
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} {where}; batch t values {t.tolist()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def make_optimizer(model: torch.nn.Module, config: Config) -> torch.optim.Optimizer:
    t = config.train
    return torch.optim.Adam(
        model.parameters(), lr=t.learning_rate, betas=(t.adam_beta1, t.adam_beta2), weight_decay=t.weight_decay
    )


def fit(
    train_set: list[Sample],
    config: Config,
    out_dir=None,
    model: VerseDiffUNet | None = None,
    on_step=None,
) -> Checkpoint:
    """Train for ``train.epochs`` epochs with fresh augmentation per epoch.

    ``on_step(step, loss, model)`` is called after every update. Intermediate
    checkpoints go to ``out_dir/checkpoints/epoch_XXXX`` every
    ``train.checkpoint_interval`` epochs (0 disables them).
    """
    if not train_set:
        raise ValueError("empty training set")
    tc = config.train
    schedule = config.schedule()
    if model is None:
        model = build_model(config.model_config(train_set[0].image.shape[0]), seed=tc.seed)
    optimizer = make_optimizer(model, config)
    generator = torch.Generator().manual_seed(tc.seed)
    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
    total = tc.epochs * steps_per_epoch
    if tc.max_steps:
        total = min(total, tc.max_steps)
    scheduler = None
    if tc.lr_schedule == "cosine" and total > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total)
    ema = copy.deepcopy(model) if tc.ema else None

    def snapshot(epoch, step, history):
        src = ema if ema is not None else model
        return Checkpoint.from_model(src, config, epoch=epoch, step=step, loss_history=list(history))

    history: list[float] = []
    step = 0
    epoch = 0
    for epoch in range(1, tc.epochs + 1):
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(train_set))
        epoch_losses = []
        for b in range(steps_per_epoch):
            if tc.max_steps and step >= tc.max_steps:
                break
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            batch = [train_set[i] for i in idx]
            if tc.augment:
                batch = [augment(s, config.augment, draw_index=epoch) for s in batch]
            loss = train_step(batch, model, optimizer, schedule, generator, config, where=f"at epoch {epoch} step {step + 1}")
            step += 1
            if scheduler is not None:
                scheduler.step()
            if ema is not None:
                with torch.no_grad():
                    for pe, pm in zip(ema.parameters(), model.parameters()):
                        pe.lerp_(pm, 1.0 - tc.ema_decay)
            history.append(loss)
            epoch_losses.append(loss)
            if on_step is not None:
                on_step(step, loss, model)
        if epoch_losses:
            log.info("epoch %d  steps %d  mean loss %.5f", epoch, step, float(np.mean(epoch_losses)))
        if out_dir is not None and tc.checkpoint_interval and epoch % tc.checkpoint_interval == 0:
            snapshot(epoch, step, history).save(Path(out_dir) / "checkpoints" / f"epoch_{epoch:04d}")
        if tc.max_steps and step >= tc.max_steps:
            break
    final = snapshot(epoch if tc.epochs else 0, step, history)
    if out_dir is not None:
        final.save(Path(out_dir) / "checkpoint")
    return final
