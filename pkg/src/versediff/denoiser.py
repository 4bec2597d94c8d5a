"""Conditional UNet noise predictor with an additive shape-prior branch."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 32
    time_embed_dim: int = 128
    shape_prior: bool = True
    image_channels: int = 1
    label_channels: int = 1
    timesteps: int = 1000

    def level_channels(self) -> list[int]:
        return [self.base_channels * 2**k for k in range(self.levels)]


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU; the time embedding is a per-channel
    bias added after the first conv."""

    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ShapePrior(nn.Module):
    """Parallel encoder over the conditioning image alone.

    Level k sees the image average-pooled by 2**k and produces a map with the
    channel count of decoder level k.
    """

    def __init__(self, image_channels: int, level_channels: list[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(image_channels, ch, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.SiLU(),
            )
            for ch in level_channels
        )

    def forward(self, image):
        feats = []
        for k, branch in enumerate(self.branches):
            x = F.avg_pool2d(image, 2**k) if k else image
            feats.append(branch(x))
        return feats


class VerseDiffUNet(nn.Module):
    """eps_theta(cat(image, x_t), t) with shape-prior features summed into
    every decoder level.

    Inputs of any H x W are padded up to a multiple of ``2**levels`` and the
    output is cropped back.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.levels < 1:
            raise ValueError("levels must be >= 1")
        self.cfg = cfg
        chs = cfg.level_channels()
        d = cfg.time_embed_dim
        self.time_table = nn.Embedding(cfg.timesteps, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU())

        self.inc = nn.Conv2d(cfg.image_channels + cfg.label_channels, chs[0], 3, padding=1)
        self.enc = nn.ModuleList(ResBlock(ch, ch, d) for ch in chs)
        mid_ch = chs[-1] * 2
        nxt = chs[1:] + [mid_ch]
        self.down = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chs, nxt))
        self.mid = ResBlock(mid_ch, mid_ch, d)
        self.up = nn.ModuleList(nn.ConvTranspose2d(b, a, 2, stride=2) for a, b in zip(chs, nxt))
        self.dec = nn.ModuleList(ResBlock(2 * ch, ch, d) for ch in chs)
        self.shape_prior = ShapePrior(cfg.image_channels, chs) if cfg.shape_prior else None
        self.out_norm = nn.GroupNorm(_groups(chs[0]), chs[0])
        self.out = nn.Conv2d(chs[0], cfg.label_channels, 3, padding=1)
        self._check_resolution_contract()

    def _check_resolution_contract(self):
        m = self.multiple
        probe_img = torch.zeros(1, self.cfg.image_channels, m, m)
        probe_x = torch.zeros(1, self.cfg.label_channels, m, m)
        with torch.no_grad():
            _, stacks = self.forward(probe_img, probe_x, 1, return_stacks=True)
        for k, (e, d) in enumerate(zip(stacks["encoder"], stacks["decoder"])):
            shapes = {tuple(e.shape), tuple(d.shape)}
            if stacks["prior"] is not None:
                shapes.add(tuple(stacks["prior"][k].shape))
            assert len(shapes) == 1, f"level {k} feature shapes disagree: {shapes}"

    @property
    def multiple(self) -> int:
        return 2**self.cfg.levels

    def embed_timestep(self, t) -> torch.Tensor:
        """Raw learned table row(s) for 1-based timestep(s) ``t``."""
        t = torch.as_tensor(t, dtype=torch.long, device=self.time_table.weight.device)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.cfg.timesteps):
            raise IndexError(f"timestep out of range 1..{self.cfg.timesteps}")
        return self.time_table(t - 1)

    def _pad(self, x):
        h, w = x.shape[-2:]
        m = self.multiple
        ph, pw = (-h) % m, (-w) % m
        if ph == 0 and pw == 0:
            return x
        mode = "reflect" if ph < h and pw < w else "replicate"
        return F.pad(x, (0, pw, 0, ph), mode=mode)

    def shape_prior_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        if self.shape_prior is None:
            raise RuntimeError("model was built without the shape-prior branch")
        return self.shape_prior(self._pad(image))

    def forward(self, image: torch.Tensor, xt: torch.Tensor, t, return_stacks: bool = False):
        if image.shape[0] != xt.shape[0] or image.shape[-2:] != xt.shape[-2:]:
            raise ValueError(f"image {tuple(image.shape)} and x_t {tuple(xt.shape)} disagree")
        if xt.shape[1] != self.cfg.label_channels or image.shape[1] != self.cfg.image_channels:
            raise ValueError("channel count does not match the model config")
        t = torch.as_tensor(t, dtype=torch.long, device=xt.device).reshape(-1)
        if t.numel() == 1 and xt.shape[0] > 1:
            t = t.expand(xt.shape[0])
        h0, w0 = xt.shape[-2:]
        temb = self.time_mlp(self.embed_timestep(t))
        image = self._pad(image)
        h = self.inc(torch.cat([image, self._pad(xt)], dim=1))

        enc_feats = []
        for block, down in zip(self.enc, self.down):
            h = block(h, temb)
            enc_feats.append(h)
            h = down(h)
        h = self.mid(h, temb)

        prior = self.shape_prior(image) if self.shape_prior is not None else None
        dec_feats = [None] * len(self.enc)
        for k in reversed(range(len(self.enc))):
            h = self.up[k](h)
            h = self.dec[k](torch.cat([h, enc_feats[k]], dim=1), temb)
            dec_feats[k] = h
            if prior is not None:
                h = h + prior[k]
        out = self.out(F.silu(self.out_norm(h)))[..., :h0, :w0]
        if return_stacks:
            return out, {"encoder": enc_feats, "decoder": dec_feats, "prior": prior}
        return out


def build_model(cfg: ModelConfig, seed: int | None = None) -> VerseDiffUNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return VerseDiffUNet(cfg)
    return VerseDiffUNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def denoise(model: VerseDiffUNet, image: torch.Tensor, xt: torch.Tensor, t) -> torch.Tensor:
    """Inference-mode eps estimate for unbatched ``(N,H,W)`` or batched inputs."""
    single = xt.ndim == 3
    if single:
        image, xt = image[None], xt[None]
    with torch.no_grad():
        out = model(image, xt, t)
    return out[0] if single else out
