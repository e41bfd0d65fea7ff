"""Region-conditioned orthogonal residual 3D U-Net.

Spatial-only down/up-sampling keeps the 4 input frames through the network;
the head folds (channels x frames) into ``out_frames`` lead-time maps.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import FORMAT_VERSION, FormatError, read_checkpoint, write_checkpoint


@dataclass(frozen=True)
class BackboneConfig:
    levels: int = 3
    base_channels: int = 32
    in_channels: int = 11
    t_in: int = 4
    out_frames: int = 32
    dropout_rate: float = 0.4
    super_resolution: int = 6  # informational only

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.t_in < 1 or self.out_frames < 1:
            raise ValueError("in_channels, t_in and out_frames must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def level_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.levels


class RegionTag(NamedTuple):
    region_id: int
    year: int


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def apply_modulation(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Channel-wise ``gamma * x + beta``.

    ``x`` is ``[C, T, H, W]`` or ``[B, C, T, H, W]``; ``gamma``/``beta`` are ``[C]``
    or ``[B, C]`` and broadcast over the trailing three axes.
    """
    if x.dim() not in (4, 5):
        raise ValueError(f"expected a 4D or 5D feature tensor, got {x.dim()}D")
    channels = x.shape[-4]
    if gamma.shape != beta.shape:
        raise ValueError(f"gamma {tuple(gamma.shape)} and beta {tuple(beta.shape)} differ in shape")
    if gamma.shape[-1] != channels:
        raise ValueError(f"modulation has {gamma.shape[-1]} channels, features have {channels}")
    if gamma.dim() == 2 and (x.dim() != 5 or gamma.shape[0] != x.shape[0]):
        raise ValueError("per-sample modulation needs a batched feature tensor of the same batch size")
    return gamma[..., None, None, None] * x + beta[..., None, None, None]


class ResidualUnit(nn.Module):
    """conv-norm-relu-conv-norm plus shortcut; the shortcut is a 1x1x1 conv only when channels change."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.shortcut = nn.Conv3d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else None

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + s)


class UpUnit(nn.Module):
    """Transposed-conv spatial upsampling, concatenation with the skip features, residual unit."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=(1, 2, 2), stride=(1, 2, 2))
        self.res = ResidualUnit(2 * out_ch, out_ch)

    def forward(self, x, skip):
        return self.res(torch.cat([self.up(x), skip], dim=1))


class RegionConditioner(nn.Module):
    """Two-layer MLP from a region one-hot to bottleneck (gamma, beta).

    The last layer is zero-initialised and predicts ``gamma - 1``, so a fresh
    conditioner is the identity modulation.
    """

    def __init__(self, num_regions: int, channels: int, hidden: int | None = None):
        super().__init__()
        self.num_regions = num_regions
        self.channels = channels
        hidden = hidden or 4 * num_regions
        self.fc1 = nn.Linear(num_regions, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, one_hot: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if one_hot.shape[-1] != self.num_regions:
            raise ValueError(f"one-hot length {one_hot.shape[-1]} != {self.num_regions} regions")
        delta_gamma, beta = self.fc2(F.relu(self.fc1(one_hot))).chunk(2, dim=-1)
        return 1.0 + delta_gamma, beta


def rcn_forward(conditioner: RegionConditioner, one_hot) -> tuple[torch.Tensor, torch.Tensor]:
    one_hot = torch.as_tensor(one_hot, dtype=conditioner.fc1.weight.dtype)
    if one_hot.dim() != 1:
        raise ValueError("rcn_forward takes a single one-hot vector")
    return conditioner(one_hot)


class FiLMAdapterSet(nn.Module):
    """Learnable per-channel (gamma_f, beta_f) for every skip level, keyed by (region, year)."""

    def __init__(self, key: tuple[int, int], channels: Iterable[int]):
        super().__init__()
        self.key = (int(key[0]), int(key[1]))
        self.channels = [int(c) for c in channels]
        self.gammas = nn.ParameterList([nn.Parameter(torch.ones(c)) for c in self.channels])
        self.betas = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in self.channels])

    def level(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.gammas[i], self.betas[i]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, num_regions: int):
        super().__init__()
        if num_regions < 1:
            raise ValueError("num_regions must be >= 1")
        self.config = config
        self.num_regions = num_regions
        chans = config.level_channels()
        ins = [config.in_channels] + chans[:-1]
        self.encoders = nn.ModuleList(ResidualUnit(i, o) for i, o in zip(ins, chans))
        self.bottleneck = ResidualUnit(chans[-1], config.bottleneck_channels)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.pool = nn.MaxPool3d(kernel_size=(1, 2, 2))
        self.skip_convs = nn.ModuleList(nn.Conv3d(c, c, 1, bias=False) for c in chans)
        ups_in = chans[1:] + [config.bottleneck_channels]
        self.decoders = nn.ModuleList(UpUnit(i, o) for i, o in zip(ups_in, chans))
        self.rcn = RegionConditioner(num_regions, config.bottleneck_channels)
        self.head = nn.Conv2d(chans[0] * config.t_in, config.out_frames, kernel_size=1)
        # identity FiLM used when no adapter set is supplied; buffers so they never train
        for i, c in enumerate(chans):
            self.register_buffer(f"_film_one_{i}", torch.ones(c), persistent=False)
            self.register_buffer(f"_film_zero_{i}", torch.zeros(c), persistent=False)

    @property
    def skip_channels(self) -> list[int]:
        return self.config.level_channels()

    def new_adapters(self, key: tuple[int, int]) -> FiLMAdapterSet:
        return FiLMAdapterSet(key, self.skip_channels)

    def orthogonal_kernels(self) -> dict[str, torch.Tensor]:
        """Every 1x1x1 conv weight subject to the orthogonality penalty, by parameter name."""
        return {
            name: p
            for name, p in self.named_parameters()
            if name.endswith(".weight") and p.dim() == 5 and p.shape[2:] == (1, 1, 1)
            and (name.startswith("skip_convs.") or ".shortcut." in name)
        }

    def conditioning_parameters(self) -> list[nn.Parameter]:
        return list(self.rcn.parameters())

    def forward(self, x: torch.Tensor, region_ids: torch.Tensor,
                adapters: Optional[FiLMAdapterSet] = None) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 5 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.t_in:
            raise ValueError(f"expected input [B, {cfg.in_channels}, {cfg.t_in}, H, W], got {tuple(x.shape)}")
        div = 2**cfg.levels
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ValueError(f"H and W must be divisible by {div}, got {tuple(x.shape[-2:])}")
        region_ids = torch.as_tensor(region_ids, dtype=torch.long).reshape(-1)
        if region_ids.numel() != x.shape[0]:
            raise ValueError("one region id per sample is required")
        if region_ids.min() < 0 or region_ids.max() >= self.num_regions:
            raise ValueError(f"region ids must lie in [0, {self.num_regions})")

        skips = []
        h = x
        for enc in self.encoders:
            h = self.dropout(enc(h))
            skips.append(h)
            h = self.pool(h)
        h = self.dropout(self.bottleneck(h))
        gamma, beta = self.rcn(F.one_hot(region_ids, self.num_regions).to(h.dtype))
        h = apply_modulation(h, gamma, beta)

        for i in reversed(range(cfg.levels)):
            s = self.skip_convs[i](skips[i])
            if adapters is None:
                g, b = getattr(self, f"_film_one_{i}"), getattr(self, f"_film_zero_{i}")
            else:
                g, b = adapters.level(i)
            s = apply_modulation(s, g, b)
            h = self.decoders[i](h, s)

        bsz, c, t, hh, ww = h.shape
        logits = self.head(h.reshape(bsz, c * t, hh, ww))
        return torch.sigmoid(logits).unsqueeze(1)


def build_backbone(config: BackboneConfig, num_regions: int, seed: int) -> Backbone:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = Backbone(config, num_regions)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def forward(backbone: Backbone, x, tag: RegionTag, adapters: Optional[FiLMAdapterSet] = None) -> torch.Tensor:
    """Single-sample forward: ``x`` is ``[C, T_in, H, W]``; returns ``[1, T_out, H, W]`` probabilities."""
    if adapters is not None and adapters.key != (tag.region_id, tag.year):
        raise ValueError(f"adapter key {adapters.key} does not match tag {(tag.region_id, tag.year)}")
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    if x.dim() != 4:
        raise ValueError(f"expected [C, T_in, H, W], got {tuple(x.shape)}")
    out = backbone(x.unsqueeze(0), torch.tensor([tag.region_id]), adapters)
    return out[0]


def count_parameters(backbone: Backbone, adapters: Iterable[FiLMAdapterSet] = ()) -> tuple[int, int]:
    """(backbone parameters, RCN + adapter parameters)."""
    cond_ids = {id(p) for p in backbone.conditioning_parameters()}
    conditioning = sum(p.numel() for p in backbone.conditioning_parameters())
    conditioning += sum(a.num_parameters() for a in adapters)
    base = sum(p.numel() for p in backbone.parameters() if id(p) not in cond_ids)
    return base, conditioning


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter's raw bytes, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _adapter_prefix(key: tuple[int, int]) -> str:
    return f"adapters/{key[0]}_{key[1]}"


def save_checkpoint(path, backbone: Backbone, adapters: Mapping[tuple[int, int], FiLMAdapterSet] | None = None,
                    **meta) -> None:
    tensors = {f"backbone/{k}": v.detach().cpu().numpy() for k, v in backbone.state_dict().items()}
    keys = []
    for key, ad in (adapters or {}).items():
        keys.append(list(key))
        for i in range(len(ad.channels)):
            tensors[f"{_adapter_prefix(key)}/gamma/{i}"] = ad.gammas[i].detach().cpu().numpy()
            tensors[f"{_adapter_prefix(key)}/beta/{i}"] = ad.betas[i].detach().cpu().numpy()
    doc = {
        "format_version": FORMAT_VERSION,
        "backbone_config": asdict(backbone.config),
        "num_regions": backbone.num_regions,
        "adapter_keys": keys,
        **meta,
    }
    write_checkpoint(path, tensors, doc)


def load_checkpoint(path) -> tuple[Backbone, dict[tuple[int, int], FiLMAdapterSet], dict]:
    tensors, meta = read_checkpoint(path)
    try:
        config = BackboneConfig(**meta["backbone_config"])
        num_regions = int(meta["num_regions"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, "backbone_config", str(exc)) from exc
    backbone = Backbone(config, num_regions)
    state = {k[len("backbone/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("backbone/")}
    expected = backbone.state_dict()
    if set(state) != set(expected):
        missing = sorted(set(expected) - set(state))[:3]
        raise FormatError(path, "tensors", f"parameter names do not match config (missing {missing})")
    for name, val in state.items():
        if tuple(val.shape) != tuple(expected[name].shape):
            raise FormatError(path, f"tensor {name}", f"shape {tuple(val.shape)} != {tuple(expected[name].shape)}")
    backbone.load_state_dict(state)
    adapters = {}
    for key in meta.get("adapter_keys", []):
        key = (int(key[0]), int(key[1]))
        ad = backbone.new_adapters(key)
        with torch.no_grad():
            for i, c in enumerate(ad.channels):
                try:
                    g = tensors[f"{_adapter_prefix(key)}/gamma/{i}"]
                    b = tensors[f"{_adapter_prefix(key)}/beta/{i}"]
                except KeyError as exc:
                    raise FormatError(path, f"adapter {key}", f"missing level {i}") from exc
                if g.shape != (c,) or b.shape != (c,):
                    raise FormatError(path, f"adapter {key}", f"level {i} shape mismatch")
                ad.gammas[i].copy_(torch.from_numpy(g))
                ad.betas[i].copy_(torch.from_numpy(b))
        adapters[key] = ad
    return backbone, adapters, meta
