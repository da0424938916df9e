"""Light-weight two-branch cascaded segmentation network.

The main branch is a ResNet18-style encoder (7x7 stem, four residual
stages) whose deepest features pass through a summation pyramid pooling
block at 1/32 resolution.  The auxiliary branch runs a truncated copy
of the same encoder on a half-resolution view of the input and stops at
1/16 resolution; a fusion block folds it into the main features and
also emits coarse class maps for deep supervision (and for a fast
low-latency inference exit).  Three deconvolution decoders with
additive skips from the encoder stages bring the fused features back to
1/4 resolution, and the class head lands the logits at 1/2 resolution.
Full-resolution probabilities are produced by a final 2x bilinear
upsample plus softmax at inference time.

All spatial contracts assume input height and width divisible by 32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DataError, NumericalError

BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyper-parameters.

    ``main_stage_channels`` is (stem, stage1..stage4); stages 2..4
    halve the resolution.  ``aux_stage_channels`` is (stem, stage1,
    stage2) for the truncated auxiliary encoder.  ``spp_grids`` are the
    pooling grid sizes of the pyramid block; every grid must fit into
    the 1/32-scale feature map of the inputs the model will see.
    """

    num_classes: int
    main_stage_channels: tuple[int, int, int, int, int] = (64, 64, 128, 256, 512)
    aux_stage_channels: tuple[int, int, int] = (64, 64, 128)
    spp_grids: tuple[int, ...] = (1, 2, 3, 6)
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.main_stage_channels) != 5 or any(c <= 0 for c in self.main_stage_channels):
            raise ConfigError(f"main_stage_channels must be 5 positive ints, got {self.main_stage_channels}")
        if len(self.aux_stage_channels) != 3 or any(c <= 0 for c in self.aux_stage_channels):
            raise ConfigError(f"aux_stage_channels must be 3 positive ints, got {self.aux_stage_channels}")
        if not self.spp_grids or any(g <= 0 for g in self.spp_grids):
            raise ConfigError(f"spp_grids must be positive ints, got {self.spp_grids}")
        if self.in_channels <= 0:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "main_stage_channels": list(self.main_stage_channels),
            "aux_stage_channels": list(self.aux_stage_channels),
            "spp_grids": list(self.spp_grids),
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            return cls(
                num_classes=int(d["num_classes"]),
                main_stage_channels=tuple(d["main_stage_channels"]),
                aux_stage_channels=tuple(d["aux_stage_channels"]),
                spp_grids=tuple(d["spp_grids"]),
                in_channels=int(d.get("in_channels", 3)),
            )
        except KeyError as exc:
            raise ConfigError(f"network config missing key {exc}") from exc


class ConvBlock(nn.Module):
    """Conv -> BN -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1) -> None:
        super().__init__()
        self.conv = nn.Conv2d(
            in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2, bias=False
        )
        self.bn = nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.relu(self.bn(self.conv(x)))


class ResidualUnit(nn.Module):
    """Two 3x3 convs with identity (or 1x1 projection) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def _residual_stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(ResidualUnit(in_ch, out_ch, stride), ResidualUnit(out_ch, out_ch))


class SumPyramidPooling(nn.Module):
    """Pyramid pooling merged by summation instead of concatenation.

    Each branch average-pools to a g x g grid, maps it through a 1x1
    conv and bilinearly upsamples back; the output is the input plus the
    sum of all branches, so channel count is preserved at no extra
    decoder cost.
    """

    def __init__(self, channels: int, grids: tuple[int, ...] = (1, 2, 3, 6)) -> None:
        super().__init__()
        self.grids = tuple(grids)
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 1, bias=False) for _ in self.grids
        )

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        big = [g for g in self.grids if g > h or g > w]
        if big:
            raise DataError(f"pyramid grids {big} exceed feature map {h}x{w}")
        out = x
        for g, conv in zip(self.grids, self.branches):
            pooled = conv(F.adaptive_avg_pool2d(x, g))
            out = out + F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=False)
        return out


class FusionBlock(nn.Module):
    """Fold 1/16-scale auxiliary features into the 1/32-scale main features.

    The auxiliary map is brought to the main grid by a stride-2 conv
    (not interpolation), bottlenecked to the main width by a 1x1 conv,
    and added after per-input batch norm; a ReLU finishes the fusion.
    The block also emits auxiliary class maps at 1/16 scale for deep
    supervision, read off before the downsampling.
    """

    def __init__(self, aux_channels: int, main_channels: int, num_classes: int) -> None:
        super().__init__()
        self.aux_head = nn.Conv2d(aux_channels, num_classes, 1)
        self.downsample = nn.Conv2d(aux_channels, aux_channels, 3, stride=2, padding=1, bias=False)
        self.bottleneck = nn.Conv2d(aux_channels, main_channels, 1, bias=False)
        self.aux_bn = nn.BatchNorm2d(main_channels, momentum=BN_MOMENTUM)
        self.main_bn = nn.BatchNorm2d(main_channels, momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, f_aux: Tensor, f_main: Tensor) -> tuple[Tensor, Tensor]:
        ah, aw = f_aux.shape[-2:]
        mh, mw = f_main.shape[-2:]
        if (mh, mw) != ((ah + 1) // 2, (aw + 1) // 2):
            raise DataError(
                f"fusion expects auxiliary features at twice the main resolution, got {ah}x{aw} vs {mh}x{mw}"
            )
        aux_maps = self.aux_head(f_aux)
        folded = self.aux_bn(self.bottleneck(self.downsample(f_aux)))
        return self.relu(folded + self.main_bn(f_main)), aux_maps


class Decoder(nn.Module):
    """1x1 reduce -> 3x3 stride-2 deconv -> 1x1 expand, BN+ReLU throughout."""

    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        mid = max(in_ch // 4, 1)
        self.reduce = ConvBlock(in_ch, mid, 1)
        self.deconv = nn.ConvTranspose2d(mid, mid, 3, stride=2, padding=1, output_padding=1, bias=False)
        self.bn = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.expand = ConvBlock(mid, out_ch, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.expand(self.relu(self.bn(self.deconv(self.reduce(x)))))


class ClassHead(nn.Module):
    """Deconv(3x3, s2) -> Conv(3x3) -> Deconv(2x2) from 1/4 to 1/2 scale.

    A stride-1 2x2 deconvolution grows each side by one pixel; the
    trailing row/column is cropped so the logits land exactly at half
    the input resolution.
    """

    def __init__(self, in_ch: int, num_classes: int) -> None:
        super().__init__()
        mid = max(in_ch // 2, 1)
        self.deconv1 = nn.ConvTranspose2d(in_ch, mid, 3, stride=2, padding=1, output_padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.conv = nn.Conv2d(mid, mid, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.deconv2 = nn.ConvTranspose2d(mid, num_classes, 2, stride=1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        x = self.relu(self.bn1(self.deconv1(x)))
        x = self.relu(self.bn2(self.conv(x)))
        h, w = x.shape[-2:]
        return self.deconv2(x)[:, :, :h, :w]


class Segmentor(nn.Module):
    """The full two-branch network.

    ``forward`` returns ``(main_logits, aux_logits)`` at 1/2 and 1/16
    of the input resolution for training;  ``predict`` returns
    full-resolution class probabilities for either branch.
    """

    def __init__(self, config: NetworkConfig) -> None:
        super().__init__()
        self.config = config
        m0, m1, m2, m3, m4 = config.main_stage_channels
        a0, a1, a2 = config.aux_stage_channels
        k = config.num_classes

        self.stem = ConvBlock(config.in_channels, m0, 7, stride=2)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage1 = _residual_stage(m0, m1, 1)
        self.stage2 = _residual_stage(m1, m2, 2)
        self.stage3 = _residual_stage(m2, m3, 2)
        self.stage4 = _residual_stage(m3, m4, 2)
        self.pyramid = SumPyramidPooling(m4, config.spp_grids)

        self.aux_stem = ConvBlock(config.in_channels, a0, 7, stride=2)
        self.aux_pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.aux_stage1 = _residual_stage(a0, a1, 1)
        self.aux_stage2 = _residual_stage(a1, a2, 2)

        self.fusion = FusionBlock(a2, m4, k)
        self.decoder1 = Decoder(m4, m3)
        self.decoder2 = Decoder(m3, m2)
        self.decoder3 = Decoder(m2, m1)
        self.head = ClassHead(m1, k)

        self._init_weights()

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _check_input(self, x: Tensor) -> None:
        if x.dim() != 4:
            raise DataError(f"expected a 4-D (B, C, H, W) batch, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise DataError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32 or h == 0 or w == 0:
            raise DataError(f"input size {h}x{w} must be positive multiples of 32")
        g = max(self.config.spp_grids)
        if h // 32 < g or w // 32 < g:
            raise DataError(
                f"input {h}x{w} gives a {h // 32}x{w // 32} map at 1/32 scale, "
                f"too small for pyramid grid {g}"
            )

    def _aux_features(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        half = F.interpolate(x, size=(h // 2, w // 2), mode="bilinear", align_corners=False)
        a = self.aux_pool(self.aux_stem(half))
        return self.aux_stage2(self.aux_stage1(a))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check_input(x)
        f = self.pool(self.stem(x))  # (B, m0, H/4, W/4)
        s1 = self.stage1(f)
        s2 = self.stage2(s1)  # H/8
        s3 = self.stage3(s2)  # H/16
        s4 = self.stage4(s3)  # H/32
        f_main = self.pyramid(s4)

        f_aux = self._aux_features(x)  # (B, a2, H/16, W/16)
        fused, aux_logits = self.fusion(f_aux, f_main)

        d = self.decoder1(fused) + s3
        d = self.decoder2(d) + s2
        d = self.decoder3(d) + s1
        main_logits = self.head(d)  # (B, K, H/2, W/2)
        return main_logits, aux_logits

    def forward_auxiliary(self, x: Tensor) -> Tensor:
        """Auxiliary class maps at 1/16 scale, skipping the main trunk."""
        self._check_input(x)
        return self.fusion.aux_head(self._aux_features(x))

    @torch.no_grad()
    def predict(self, x: Tensor, branch: str = "main") -> Tensor:
        """Full-resolution class probabilities (B, K, H, W) for one branch."""
        if self.training:
            raise RuntimeError("predict requires eval mode; call .eval() first")
        h, w = x.shape[-2:]
        if branch == "main":
            logits, _ = self.forward(x)
            up = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        elif branch == "auxiliary":
            up = upsample_aligned(self.forward_auxiliary(x), (h, w))
        else:
            raise ValueError(f"unknown branch {branch!r}; expected 'main' or 'auxiliary'")
        return F.softmax(up, dim=1)


def upsample_aligned(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear upsampling that maps output pixel (r, c) to input (r/f, c/f).

    The sampling grid is anchored at the top-left corner, so it is the
    exact inverse of stride-``f`` label subsampling: at every multiple
    of the scale factor the input value is reproduced bit-for-bit.
    Coordinates beyond the last input center clamp to the border.
    """
    h_in, w_in = x.shape[-2:]
    h_out, w_out = size
    rows = torch.arange(h_out, dtype=x.dtype, device=x.device) * (h_in / h_out)
    cols = torch.arange(w_out, dtype=x.dtype, device=x.device) * (w_in / w_out)
    norm_r = rows * (2.0 / (h_in - 1)) - 1.0 if h_in > 1 else torch.zeros_like(rows)
    norm_c = cols * (2.0 / (w_in - 1)) - 1.0 if w_in > 1 else torch.zeros_like(cols)
    grid_r, grid_c = torch.meshgrid(norm_r, norm_c, indexing="ij")
    grid = torch.stack((grid_c, grid_r), dim=-1).unsqueeze(0).expand(x.shape[0], -1, -1, -1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


class MainBranchInference(nn.Module):
    """Inference wrapper: input frame -> full-resolution main-branch probabilities."""

    def __init__(self, segmentor: Segmentor) -> None:
        super().__init__()
        self.segmentor = segmentor
        self.train(segmentor.training)

    @property
    def in_channels(self) -> int:
        return self.segmentor.in_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.segmentor.predict(x, branch="main")


class AuxiliaryBranchInference(nn.Module):
    """Inference wrapper for the low-latency auxiliary exit.

    Only the auxiliary encoder and its 1x1 head run; the main trunk,
    pyramid, decoders and class head are skipped entirely, which is what
    makes this exit cheaper than the full network.
    """

    def __init__(self, segmentor: Segmentor) -> None:
        super().__init__()
        self.segmentor = segmentor
        self.train(segmentor.training)

    @property
    def in_channels(self) -> int:
        return self.segmentor.in_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.segmentor.predict(x, branch="auxiliary")


@dataclass(frozen=True)
class ParameterEntry:
    name: str
    shape: tuple[int, ...]
    count: int


@dataclass(frozen=True)
class ParameterSet:
    """Learnable-parameter inventory of a model."""

    entries: tuple[ParameterEntry, ...]

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    def to_text(self) -> str:
        lines = [f"{e.name}\t{list(e.shape)}\t{e.count}" for e in self.entries]
        lines.append(f"total\t{self.total}")
        return "\n".join(lines)


def count_parameters(model: nn.Module) -> ParameterSet:
    """Inventory of every learnable parameter tensor in ``model``."""
    entries = tuple(
        ParameterEntry(name=name, shape=tuple(p.shape), count=p.numel())
        for name, p in model.named_parameters()
        if p.requires_grad
    )
    return ParameterSet(entries=entries)


def state_dict_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module state dict (weights and buffers) to numpy arrays."""
    return {
        f"{prefix}{name}": tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Inverse of :func:`state_dict_arrays`; shapes must match exactly."""
    expected = module.state_dict()
    state: dict[str, Tensor] = {}
    for name, ref in expected.items():
        key = f"{prefix}{name}"
        if key not in arrays:
            raise DataError(f"checkpoint is missing array {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise DataError(f"array {key!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(ref.dtype)
    module.load_state_dict(state)


def build_segmentor(config: NetworkConfig, check_gradient_flow: bool = False) -> Segmentor:
    """Construct (and optionally sanity-check) a segmentor.

    With ``check_gradient_flow`` a combined supervised loss is
    backpropagated through a dummy batch and any parameter left without
    a gradient signal is reported — a guard against silently dead
    branches after architecture edits.
    """
    model = Segmentor(config)
    if check_gradient_flow:
        dead = gradient_flow_report(model)
        if dead:
            raise NumericalError(f"parameters receive no gradient: {dead}")
    return model


def gradient_flow_report(model: Segmentor, batch_hw: tuple[int, int] | None = None) -> list[str]:
    """Names of parameters with missing or all-zero gradients under the training loss."""
    from .losses import LossWeights, seg_loss

    g = max(model.config.spp_grids)
    h = batch_hw[0] if batch_hw else 32 * g
    w = batch_hw[1] if batch_hw else 32 * g
    was_training = model.training
    model.train()
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(2, model.config.in_channels, h, w, generator=gen)
    labels = torch.randint(0, model.config.num_classes, (2, h, w), generator=gen)
    model.zero_grad(set_to_none=True)
    main_logits, aux_logits = model(x)
    breakdown = seg_loss(main_logits, aux_logits, labels, LossWeights())
    total = breakdown.main + LossWeights().aux_weight * breakdown.aux
    total.backward()
    dead = [
        name
        for name, p in model.named_parameters()
        if p.requires_grad and (p.grad is None or not bool(p.grad.abs().sum() > 0))
    ]
    model.zero_grad(set_to_none=True)
    model.train(was_training)
    return dead
