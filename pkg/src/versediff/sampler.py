"""Reverse-chain sampling and ensemble fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import VerseDiffUNet
from .diffusion import reverse_step
from .labelcodec import decode
from .schedule import NoiseSchedule


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleSet:
    n: int
    masks: list[np.ndarray]
    soft: list[np.ndarray]
    fused: np.ndarray
    variance_map: np.ndarray


def run_chains(
    model: VerseDiffUNet,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    seeds: list[int],
) -> torch.Tensor:
    """Run one full reverse chain per row of ``images`` (B, N, H, W).

    Row i draws x_T and every z from its own generator seeded ``seeds[i]``, so
    a row's result does not depend on what else is in the batch.
    """
    if len(seeds) != images.shape[0]:
        raise ValueError("need exactly one seed per chain")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = (model.cfg.label_channels, *images.shape[-2:])

    def draw():
        return torch.stack([torch.randn(shape, generator=g) for g in gens])

    model.eval()
    x = draw()
    with torch.inference_mode():
        for t in range(schedule.T, 0, -1):
            eps = model(images, x, t)
            z = draw() if t > 1 else torch.zeros_like(x)
            x = reverse_step(x, t, eps, z, schedule)
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite values in the reverse chain at t={t}")
    return x


def sample_one(image, model: VerseDiffUNet, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Final x0 estimate ``(C, H, W)`` for one conditioning image ``(N, H, W)``."""
    img = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    return run_chains(model, schedule, img, [seed])[0].numpy()


def fuse(soft: list[np.ndarray], fusion: str = "mean", threshold: float = 0.0, coding: str = "signed_single"):
    """Combine member predictions into ``(fused mask, variance map)``."""
    stack = np.stack(soft).astype(np.float64)
    var = stack.var(axis=0)
    # exact zero wherever every member agrees, regardless of rounding in the mean
    var[np.ptp(stack, axis=0) == 0] = 0.0
    variance = var.mean(axis=0)
    if fusion == "mean":
        fused = decode(stack.mean(axis=0), threshold, coding)
    elif fusion == "vote":
        masks = np.stack([decode(s, threshold, coding) for s in soft])
        n_cls = max(int(masks.max()) + 1, 2)
        votes = np.stack([(masks == c).sum(axis=0) for c in range(n_cls)])
        # argmax keeps the lower class on ties
        fused = np.argmax(votes, axis=0).astype(np.uint8)
    else:
        raise ValueError(f"unknown fusion rule {fusion!r}")
    return fused, variance


def _sample_set(soft, fusion, threshold, coding) -> SampleSet:
    fused, variance = fuse(soft, fusion, threshold, coding)
    return SampleSet(
        n=len(soft),
        masks=[decode(s, threshold, coding) for s in soft],
        soft=soft,
        fused=fused,
        variance_map=variance,
    )


def sample_ensemble(
    image,
    model: VerseDiffUNet,
    schedule: NoiseSchedule,
    n: int = 5,
    base_seed: int = 0,
    fusion: str = "mean",
    threshold: float = 0.0,
    coding: str = "signed_single",
    seeds: list[int] | None = None,
) -> SampleSet:
    """n chains with seeds base_seed + i (or explicit ``seeds``), fused."""
    return sample_many([image], model, schedule, n, base_seed, fusion, threshold, coding, seeds=seeds)[0]


def sample_many(
    images: list,
    model: VerseDiffUNet,
    schedule: NoiseSchedule,
    n: int = 5,
    base_seed: int = 0,
    fusion: str = "mean",
    threshold: float = 0.0,
    coding: str = "signed_single",
    chunk: int = 32,
    seeds: list[int] | None = None,
) -> list[SampleSet]:
    """Ensembles for many images, batching chains ``chunk`` at a time.

    Images of different sizes are fine; chains are only batched with chains
    of the same spatial size.
    """
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    seeds = list(seeds) if seeds is not None else [base_seed + i for i in range(n)]
    if len(seeds) != n:
        raise ValueError("need exactly n seeds")
    jobs = [(j, i) for j in range(len(images)) for i in range(n)]
    arrays = [np.asarray(im, dtype=np.float32) for im in images]
    results: dict[tuple[int, int], np.ndarray] = {}
    by_shape: dict[tuple, list] = {}
    for job in jobs:
        by_shape.setdefault(arrays[job[0]].shape, []).append(job)
    for group in by_shape.values():
        for start in range(0, len(group), chunk):
            part = group[start : start + chunk]
            batch = torch.from_numpy(np.stack([arrays[j] for j, _ in part]))
            out = run_chains(model, schedule, batch, [seeds[i] for _, i in part]).numpy()
            for k, job in enumerate(part):
                results[job] = out[k]
    return [
        _sample_set([results[(j, i)] for i in range(n)], fusion, threshold, coding) for j in range(len(images))
    ]
