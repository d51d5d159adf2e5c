"""Toy image encoders with multi-stage taps plus a small frozen text encoder.

Both image variants expose a stride-based feature pyramid and a global
embedding in the shared image-text space; the same pooling projection applied
per cell yields a frozen pixel-to-shared-space path used for dense alignment
before any head is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig


@dataclass
class FeaturePyramid:
    stride4: torch.Tensor | None   # (B, c2, H/4, W/4); None for vit until synthesized
    stride8: torch.Tensor | None   # (B, c3, H/8, W/8) or vit token map
    stride16: torch.Tensor | None  # (B, c4, H/16, W/16)
    global_embed: torch.Tensor     # (B, d)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        _norm(cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        _norm(cout), nn.ReLU(),
    )


class AttentionPool(nn.Module):
    """Single-query attention pooling over a 2-D feature map.

    `cell_embeddings` reuses the value/projection weights per cell, giving a
    pixel-level view of the same shared space at zero extra parameters.
    """

    def __init__(self, in_ch: int, out_dim: int):
        super().__init__()
        self.attn_dim = out_dim
        self.query = nn.Parameter(torch.randn(out_dim) * 0.02)
        self.key = nn.Linear(in_ch, out_dim)
        self.value = nn.Linear(in_ch, out_dim)
        self.proj = nn.Linear(out_dim, out_dim)

    def _cells(self, x):
        return x.flatten(2).transpose(1, 2)  # (B, HW, C)

    def forward(self, x):
        cells = self._cells(x)
        k = self.key(cells)
        v = self.value(cells)
        attn = torch.softmax(k @ self.query / math.sqrt(self.attn_dim), dim=1)
        return self.proj((attn.unsqueeze(-1) * v).sum(dim=1))

    def cell_embeddings(self, x):
        b, _, h, w = x.shape
        out = self.proj(self.value(self._cells(x)))
        return out.transpose(1, 2).reshape(b, -1, h, w)


class ConvEncoder(nn.Module):
    """Stem + 3 strided stages; taps at strides 4/8/16; attention-pooled global."""

    def __init__(self, cfg: EncoderConfig, input_hw: tuple[int, int]):
        super().__init__()
        c2, c3, c4 = cfg.stage_channels
        self.cfg = cfg
        self.input_hw = tuple(input_hw)
        stem_ch = max(4, c2 // 2)
        self.stem = nn.Sequential(nn.Conv2d(3, stem_ch, 3, stride=2, padding=1),
                                  _norm(stem_ch), nn.ReLU())
        self.stage2 = _conv_block(stem_ch, c2)
        self.stage3 = _conv_block(c2, c3)
        self.stage4 = _conv_block(c3, c4)
        self.pool = AttentionPool(c4, cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        self._check_dims(images)
        x = self.stem(images)
        c2 = self.stage2(x)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return FeaturePyramid(c2, c3, c4, self.pool(c4))

    def cell_embedding_map(self, images: torch.Tensor) -> torch.Tensor:
        """Per-cell shared-space map at stride 8 (value+proj per C4 cell, upsampled)."""
        self._check_dims(images)
        c4 = self.stage4(self.stage3(self.stage2(self.stem(images))))
        cells = self.pool.cell_embeddings(c4)
        return F.interpolate(cells, scale_factor=2, mode="bilinear", align_corners=False)

    def _check_dims(self, images):
        if tuple(images.shape[-2:]) != self.input_hw:
            raise ValueError(f"expected {self.input_hw} input, got {tuple(images.shape[-2:])}")

    def deployed(self) -> nn.Module:
        return self


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        a = self.ln1(x)
        x = x + self.attn(a, a, a, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class ViTEncoder(nn.Module):
    """Patchify at stride 8, class token, `depth` transformer blocks.

    The pyramid it emits carries only the stride-8 token map; the stride-4/16
    views are synthesized by the training-only fusion machinery.
    """

    def __init__(self, cfg: EncoderConfig, input_hw: tuple[int, int]):
        super().__init__()
        h, w = input_hw
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ValueError("input dims must be divisible by the patch stride")
        self.cfg = cfg
        self.input_hw = tuple(input_hw)
        self.grid = (h // cfg.patch_size, w // cfg.patch_size)
        width = cfg.stage_channels[-1]
        self.width = width
        self.patch_embed = nn.Conv2d(3, width, cfg.patch_size, stride=cfg.patch_size)
        n_tokens = self.grid[0] * self.grid[1]
        self.cls_token = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, n_tokens + 1, width) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, cfg.heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(width)
        self.proj = nn.Linear(width, cfg.embed_dim)

    def _tokens(self, images):
        if tuple(images.shape[-2:]) != self.input_hw:
            raise ValueError(f"expected {self.input_hw} input, got {tuple(images.shape[-2:])}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        x = self._tokens(images)
        token_map = x[:, 1:].transpose(1, 2).reshape(
            x.shape[0], self.width, self.grid[0], self.grid[1])
        return FeaturePyramid(None, token_map, None, self.proj(x[:, 0]))

    def cell_embedding_map(self, images: torch.Tensor) -> torch.Tensor:
        """Per-token shared-space map at stride 8."""
        x = self._tokens(images)
        cells = self.proj(x[:, 1:])
        return cells.transpose(1, 2).reshape(
            x.shape[0], -1, self.grid[0], self.grid[1])

    def deployed(self) -> nn.Module:
        return self


class TextEncoder(nn.Module):
    """One self-attention mixing block, mean pool, 2-layer projection.

    Frozen after construction in every training stage.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dt = cfg.token_width
        self.max_len = cfg.max_text_len
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_text_len, dt) * 0.02)
        self.ln = nn.LayerNorm(dt)
        self.attn = nn.MultiheadAttention(dt, 2, batch_first=True)
        self.fc1 = nn.Linear(dt, 2 * dt)
        self.fc2 = nn.Linear(2 * dt, cfg.embed_dim)
        self.requires_grad_(False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (L, dt) or (B, L, dt) -> (d,) or (B, d)."""
        single = tokens.dim() == 2
        if single:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[1]
        if length == 0:
            raise ValueError("text encoder needs a nonempty token sequence")
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max {self.max_len}")
        x = tokens + self.pos_embed[:length]
        a = self.ln(x)
        x = x + self.attn(a, a, a, need_weights=False)[0]
        pooled = x.mean(dim=1)
        out = self.fc2(F.gelu(self.fc1(pooled)))
        return out.squeeze(0) if single else out


def build_image_encoder(cfg: EncoderConfig, input_hw: tuple[int, int]) -> nn.Module:
    if cfg.variant == "conv":
        return ConvEncoder(cfg, input_hw)
    if cfg.variant == "vit":
        return ViTEncoder(cfg, input_hw)
    raise ValueError(f"unknown encoder variant {cfg.variant!r}")


def count_inference_params(model: nn.Module, deployed_only: bool = False) -> int:
    """Parameter count; with deployed_only, only the image->embedding path."""
    target = model
    if deployed_only and hasattr(model, "deployed"):
        target = model.deployed()
    return sum(p.numel() for p in target.parameters())


def parameter_digest(module: nn.Module) -> str:
    """Order-stable digest of all parameter and buffer values."""
    import hashlib

    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
