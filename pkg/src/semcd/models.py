"""Residual encoder-decoder networks for change detection and land cover mapping.

Three topologies share the same building blocks:

* :class:`FCEFRes` - early fusion change network over the channel-concatenated pair,
* :class:`LCMBranch` - single-image land cover network exporting encoder taps,
* :class:`IntegratedNet` - two weight-shared LCM branches plus a change branch whose
  decoder also receives ``|tap1 - tap2|`` at every level.

Every network maps ``(x1, x2)`` batches of shape ``(N, C, H, W)`` to a dict of
per-head class scores (pre-softmax) of shape ``(N, K, H, W)``. Learnable
modules are partitioned into named groups ``Enc_CD``, ``Dec_CD``, ``Enc_LCM``
and ``Dec_LCM``.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

GROUPS = ("Enc_CD", "Dec_CD", "Enc_LCM", "Dec_LCM")

# Named size presets (see the README for the rationale of each).
PRESETS = {
    "desk": dict(depth=3, blocks_per_level=1, base_width=16),
    "oscd": dict(depth=4, blocks_per_level=1, base_width=16),
    "hrscd": dict(depth=5, blocks_per_level=2, base_width=32),
}


class ConvNormAct(nn.Sequential):
    def __init__(self, in_channels, out_channels, kernel_size=3, batch_norm=True, act=True):
        layers = [
            nn.Conv2d(
                in_channels, out_channels, kernel_size,
                padding=kernel_size // 2, bias=not batch_norm,
            )
        ]
        if batch_norm:
            layers.append(nn.BatchNorm2d(out_channels))
        if act:
            layers.append(nn.ReLU(inplace=False))
        super().__init__(*layers)


class ResidualBlock(nn.Module):
    """``relu(x + F(x))`` with ``F`` = conv3x3-norm-relu-conv3x3-norm."""

    def __init__(self, channels, batch_norm=True):
        super().__init__()
        self.body = nn.Sequential(
            ConvNormAct(channels, channels, batch_norm=batch_norm),
            ConvNormAct(channels, channels, batch_norm=batch_norm, act=False),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class Encoder(nn.Module):
    """``depth`` levels of (width transition, residual blocks, 2x2 max pooling)."""

    def __init__(self, in_channels, widths, blocks_per_level=1, batch_norm=True):
        super().__init__()
        self.levels = nn.ModuleList()
        c = in_channels
        for w in widths:
            blocks = [ConvNormAct(c, w, batch_norm=batch_norm)]
            blocks += [ResidualBlock(w, batch_norm) for _ in range(blocks_per_level)]
            self.levels.append(nn.Sequential(*blocks))
            c = w
        self.pool = nn.MaxPool2d(2)

    def forward(self, x) -> Tuple[List[torch.Tensor], torch.Tensor]:
        taps = []
        for level in self.levels:
            x = level(x)
            taps.append(x)
            x = self.pool(x)
        return taps, x


class DecoderLevel(nn.Module):
    def __init__(self, in_channels, width, n_skips, blocks_per_level, batch_norm):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, width, kernel_size=2, stride=2)
        self.merge = ConvNormAct(width * (1 + n_skips), width, batch_norm=batch_norm)
        self.blocks = nn.Sequential(
            *[ResidualBlock(width, batch_norm) for _ in range(blocks_per_level)]
        )

    def forward(self, x, skips):
        x = torch.cat([self.up(x)] + list(skips), dim=1)
        return self.blocks(self.merge(x))


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; skips are concatenated with the upsampled state."""

    def __init__(self, widths, n_classes, blocks_per_level=1, batch_norm=True, n_skips=1):
        super().__init__()
        self.levels = nn.ModuleList()
        c = widths[-1]
        for w in reversed(widths):
            self.levels.append(DecoderLevel(c, w, n_skips, blocks_per_level, batch_norm))
            c = w
        self.head = nn.Conv2d(widths[0], n_classes, kernel_size=1)

    def forward(self, x, *skip_lists):
        depth = len(self.levels)
        for i, level in enumerate(self.levels):
            j = depth - 1 - i
            x = level(x, [s[j] for s in skip_lists])
        return self.head(x)


def _widths(depth, base_width):
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if base_width < 1:
        raise ValueError("base_width must be >= 1")
    return [base_width * 2**i for i in range(depth)]


class _Net(nn.Module):
    input_arity = 2

    def __init__(self, input_channels, depth, blocks_per_level, base_width, batch_norm):
        super().__init__()
        if blocks_per_level < 0:
            raise ValueError("blocks_per_level must be >= 0")
        self.input_channels = input_channels
        self.depth = depth
        self.widths = _widths(depth, base_width)
        self.arch = dict(
            input_channels=input_channels, depth=depth,
            blocks_per_level=blocks_per_level, base_width=base_width,
            batch_norm=batch_norm,
        )

    def check_input(self, *xs):
        m = 2**self.depth
        for x in xs:
            if x.dim() != 4 or x.shape[1] != self.input_channels:
                raise ValueError(
                    f"expected (N, {self.input_channels}, H, W) input, got {tuple(x.shape)}"
                )
            if x.shape[2] % m or x.shape[3] % m:
                raise ValueError(
                    f"spatial size {tuple(x.shape[2:])} is not divisible by 2**depth = {m}; pad first"
                )
        if len(xs) == 2 and xs[0].shape != xs[1].shape:
            raise ValueError("the two input images differ in shape")

    def module_groups(self) -> Dict[str, nn.Module]:
        raise NotImplementedError

    def param_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        out = {}
        for group, module in self.module_groups().items():
            out[group] = list(module.named_parameters())
        return out

    @property
    def heads(self) -> Dict[str, int]:
        raise NotImplementedError


class FCEFRes(_Net):
    """Early fusion residual encoder-decoder for change detection."""

    def __init__(self, input_channels, n_classes=2, depth=4, blocks_per_level=1,
                 base_width=16, batch_norm=True, head="change"):
        super().__init__(input_channels, depth, blocks_per_level, base_width, batch_norm)
        self.arch.update(n_classes=n_classes, head=head)
        self.head_name = head
        self.n_classes = n_classes
        self.encoder = Encoder(2 * input_channels, self.widths, blocks_per_level, batch_norm)
        self.decoder = Decoder(self.widths, n_classes, blocks_per_level, batch_norm)

    def forward(self, x1, x2):
        self.check_input(x1, x2)
        taps, x = self.encoder(torch.cat([x1, x2], dim=1))
        return {self.head_name: self.decoder(x, taps)}

    def module_groups(self):
        return {"Enc_CD": self.encoder, "Dec_CD": self.decoder}

    @property
    def heads(self):
        return {self.head_name: self.n_classes}


class LCMBranch(_Net):
    """Single-image land cover network; applied to each image of a pair."""

    def __init__(self, input_channels, n_classes=6, depth=4, blocks_per_level=1,
                 base_width=16, batch_norm=True):
        super().__init__(input_channels, depth, blocks_per_level, base_width, batch_norm)
        self.arch.update(n_classes=n_classes)
        self.n_classes = n_classes
        self.encoder = Encoder(input_channels, self.widths, blocks_per_level, batch_norm)
        self.decoder = Decoder(self.widths, n_classes, blocks_per_level, batch_norm)

    def branch(self, x) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Scores and the ``depth`` encoder taps for one image."""
        taps, bottom = self.encoder(x)
        return self.decoder(bottom, taps), taps

    def forward(self, x1, x2=None):
        if x2 is None:
            self.check_input(x1)
            return {"lcm1": self.branch(x1)[0]}
        self.check_input(x1, x2)
        return {"lcm1": self.branch(x1)[0], "lcm2": self.branch(x2)[0]}

    def module_groups(self):
        return {"Enc_LCM": self.encoder, "Dec_LCM": self.decoder}

    @property
    def heads(self):
        return {"lcm1": self.n_classes, "lcm2": self.n_classes}


class IntegratedNet(_Net):
    """Multitask network: shared LCM branches feed difference skips to the CD decoder."""

    def __init__(self, input_channels, n_lcm_classes=6, depth=4, blocks_per_level=1,
                 base_width=16, batch_norm=True):
        super().__init__(input_channels, depth, blocks_per_level, base_width, batch_norm)
        self.arch.update(n_lcm_classes=n_lcm_classes)
        self.n_lcm_classes = n_lcm_classes
        self.lcm = LCMBranch(input_channels, n_lcm_classes, depth, blocks_per_level,
                             base_width, batch_norm)
        self.cd_encoder = Encoder(2 * input_channels, self.widths, blocks_per_level, batch_norm)
        self.cd_decoder = Decoder(self.widths, 2, blocks_per_level, batch_norm, n_skips=2)

    def difference_taps(self, taps1, taps2):
        return [torch.abs(a - b) for a, b in zip(taps1, taps2)]

    def forward(self, x1, x2, return_taps=False):
        self.check_input(x1, x2)
        s1, t1 = self.lcm.branch(x1)
        s2, t2 = self.lcm.branch(x2)
        diffs = self.difference_taps(t1, t2)
        cd_taps, bottom = self.cd_encoder(torch.cat([x1, x2], dim=1))
        out = {"lcm1": s1, "lcm2": s2, "change": self.cd_decoder(bottom, cd_taps, diffs)}
        if return_taps:
            out["diff_taps"] = diffs
        return out

    def module_groups(self):
        return {
            "Enc_CD": self.cd_encoder,
            "Dec_CD": self.cd_decoder,
            "Enc_LCM": self.lcm.encoder,
            "Dec_LCM": self.lcm.decoder,
        }

    @property
    def heads(self):
        return {"lcm1": self.n_lcm_classes, "lcm2": self.n_lcm_classes, "change": 2}


def _check_common(input_channels, depth, blocks_per_level, base_width):
    if input_channels < 1:
        raise ValueError("input_channels must be >= 1")
    if depth < 2:
        raise ValueError("depth must be >= 2")
    if blocks_per_level < 0 or base_width < 1:
        raise ValueError("blocks_per_level must be >= 0 and base_width >= 1")


def build_fc_ef_res(input_channels, n_classes=2, depth=4, blocks_per_level=1,
                    base_width=16, batch_norm=True, head="change") -> FCEFRes:
    _check_common(input_channels, depth, blocks_per_level, base_width)
    return FCEFRes(input_channels, n_classes, depth, blocks_per_level, base_width,
                   batch_norm, head)


def build_lcm_branch(input_channels, n_classes=6, depth=4, blocks_per_level=1,
                     base_width=16, batch_norm=True) -> LCMBranch:
    _check_common(input_channels, depth, blocks_per_level, base_width)
    return LCMBranch(input_channels, n_classes, depth, blocks_per_level, base_width,
                     batch_norm)


def build_integrated(input_channels, n_lcm_classes=6, depth=4, blocks_per_level=1,
                     base_width=16, batch_norm=True) -> IntegratedNet:
    _check_common(input_channels, depth, blocks_per_level, base_width)
    return IntegratedNet(input_channels, n_lcm_classes, depth, blocks_per_level,
                         base_width, batch_norm)


MODEL_CLASSES = {cls.__name__: cls for cls in (FCEFRes, LCMBranch, IntegratedNet)}


def rebuild(kind: str, arch: dict) -> _Net:
    return MODEL_CLASSES[kind](**arch)


def _layer_kind(module: nn.Module) -> Optional[str]:
    if isinstance(module, nn.Conv2d):
        return "conv3x3" if module.kernel_size == (3, 3) else "conv1x1"
    if isinstance(module, nn.ConvTranspose2d):
        return "upsample2"
    if isinstance(module, nn.MaxPool2d):
        return "maxpool2"
    if isinstance(module, ResidualBlock):
        return "residual_block"
    return None


def describe(model: _Net) -> dict:
    """Human-readable structure: layers, heads, parameter groups and weight ties."""
    group_of = {}
    for group, module in model.module_groups().items():
        for name, _ in module.named_modules():
            group_of[id(module.get_submodule(name)) if name else id(module)] = group
    layers = []
    for name, module in model.named_modules():
        kind = _layer_kind(module)
        if kind is None:
            continue
        entry = {"name": name, "kind": kind, "group": group_of.get(id(module))}
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            entry.update(in_channels=module.in_channels, out_channels=module.out_channels)
        elif isinstance(module, ResidualBlock):
            c = module.body[0][0].in_channels
            entry.update(in_channels=c, out_channels=c)
        layers.append(entry)
    groups = {g: [n for n, _ in ps] for g, ps in model.param_groups().items()}
    ties = []
    if isinstance(model, IntegratedNet):
        ties.append(["lcm(image1)", "lcm(image2)"])
    elif isinstance(model, LCMBranch):
        ties.append(["lcm1", "lcm2"])
    return {
        "name": type(model).__name__,
        "input_arity": model.input_arity,
        "input_channels": model.input_channels,
        "arch": dict(model.arch),
        "widths": list(model.widths),
        "heads": dict(model.heads),
        "param_groups": groups,
        "weight_ties": ties,
        "n_parameters": sum(p.numel() for p in model.parameters()),
        "layers": layers,
    }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
