"""Reference vision transformer matching the exported graph structure.

Pre-norm blocks with per-channel layer scale, exact (erf) GELU, a learned
class token with position embeddings, and the class-token output after the
final norm. The ViT-B/14 configuration mirrors the published backbone; a
tiny configuration exists for fast tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class VitConfig:
    image_size: int = 224
    patch_size: int = 14
    dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    layer_norm_eps: float = 1e-6

    @property
    def tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


VITB14 = VitConfig()
TINY = VitConfig(patch_size=28, dim=64, depth=2, heads=2)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(3 * cfg.patch_size ** 2, cfg.dim)

    def forward(self, x):
        n, c, h, w = x.shape
        p = self.patch_size
        x = x.reshape(n, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(n, (h // p) * (w // p), c * p * p)
        return self.proj(x)


class Attention(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.scale = 1.0 / math.sqrt(cfg.head_dim)
        self.qkv = nn.Linear(cfg.dim, cfg.dim * 3)
        self.proj = nn.Linear(cfg.dim, cfg.dim)

    def forward(self, x):
        n, t, d = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q * self.scale) @ k.transpose(-2, -1), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        hidden = int(cfg.dim * cfg.mlp_ratio)
        self.fc1 = nn.Linear(cfg.dim, hidden)
        self.act = nn.GELU()  # exact erf form
        self.fc2 = nn.Linear(hidden, cfg.dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1.0):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), init))

    def forward(self, x):
        return x * self.gamma


class Block(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim, eps=cfg.layer_norm_eps)
        self.attn = Attention(cfg)
        self.ls1 = LayerScale(cfg.dim)
        self.norm2 = nn.LayerNorm(cfg.dim, eps=cfg.layer_norm_eps)
        self.mlp = Mlp(cfg)
        self.ls2 = LayerScale(cfg.dim)

    def forward(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x


class VisionTransformer(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.tokens, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim, eps=cfg.layer_norm_eps)

    def forward(self, x):
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, 0]


def random_init(cfg: VitConfig, seed: int) -> VisionTransformer:
    """Seeded random weights at realistic magnitudes; deterministic."""
    gen = torch.Generator().manual_seed(seed)
    model = VisionTransformer(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif "gamma" in name:
                p.fill_(1e-1)
            elif name in ("cls_token", "pos_embed"):
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
            else:
                fan_in = p.shape[-1] if p.ndim > 1 else p.shape[0]
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
    model.eval()
    return model


# published backbone's checkpoint keys -> this module's parameter names
_KEY_MAP = {
    "patch_embed.proj.weight": "patch_embed.proj.weight",
    "patch_embed.proj.bias": "patch_embed.proj.bias",
    "cls_token": "cls_token",
    "pos_embed": "pos_embed",
    "norm.weight": "norm.weight",
    "norm.bias": "norm.bias",
}


def load_state_dict(cfg: VitConfig, state: dict) -> VisionTransformer:
    """Build a model from a checkpoint state dict.

    Accepts either this module's own names or the published backbone's
    (identical block naming; the 4-D conv patch kernel is flattened into
    the linear patch projection).
    """
    model = VisionTransformer(cfg)
    converted = {}
    for key, value in state.items():
        value = torch.as_tensor(value)
        if key == "patch_embed.proj.weight" and value.ndim == 4:
            value = value.reshape(value.shape[0], -1)  # (dim, 3*p*p)
        converted[_KEY_MAP.get(key, key)] = value
    missing, unexpected = model.load_state_dict(converted, strict=False)
    missing = [k for k in missing if "mask_token" not in k]
    if missing or unexpected:
        raise ValueError(
            f"checkpoint does not match the ViT configuration: "
            f"missing {missing[:4]}, unexpected {unexpected[:4]}")
    model.eval()
    return model
