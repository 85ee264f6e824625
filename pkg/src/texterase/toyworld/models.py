"""Desk-scale networks: text encoder, cross-attention denoiser, probe.

The text encoder mirrors the module naming of the CLIP text model
(text_model.encoder.layers.N.{self_attn.*_proj, mlp.fc1, mlp.fc2}) so the
parameter-mask rules resolve on it unchanged.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


class TextSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        q = self.q_proj(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, -1)
        return self.out_proj(out)


class TextMLP(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TextEncoderLayer(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.layer_norm1 = nn.LayerNorm(width)
        self.self_attn = TextSelfAttention(width, heads)
        self.layer_norm2 = nn.LayerNorm(width)
        self.mlp = TextMLP(width, 4 * width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.layer_norm1(x))
        x = x + self.mlp(self.layer_norm2(x))
        return x


class _TextTransformer(nn.Module):
    def __init__(self, layers: int, width: int, heads: int):
        super().__init__()
        self.layers = nn.ModuleList(TextEncoderLayer(width, heads) for _ in range(layers))


class _TextEmbeddings(nn.Module):
    def __init__(self, vocab_size: int, width: int, max_seq: int):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, width)
        self.position_embedding = nn.Embedding(max_seq, width)


class _TextModel(nn.Module):
    def __init__(self, vocab_size: int, layers: int, width: int, heads: int, max_seq: int):
        super().__init__()
        self.embeddings = _TextEmbeddings(vocab_size, width, max_seq)
        self.encoder = _TextTransformer(layers, width, heads)
        self.final_layer_norm = nn.LayerNorm(width)


class ToyTextEncoder(nn.Module):
    """Small pre-norm transformer over word-level token ids."""

    def __init__(self, vocab_size: int, layers: int = 4, width: int = 64, heads: int = 4, max_seq: int = 8):
        super().__init__()
        self.width = width
        self.max_seq = max_seq
        self.num_layers = layers
        self.heads = heads
        self.vocab_size = vocab_size
        self.text_model = _TextModel(vocab_size, layers, width, heads, max_seq)
        nn.init.normal_(self.text_model.embeddings.token_embedding.weight, std=0.02)
        nn.init.normal_(self.text_model.embeddings.position_embedding.weight, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.text_model.embeddings.token_embedding(tokens)
        x = x + self.text_model.embeddings.position_embedding(positions)[None]
        for layer in self.text_model.encoder.layers:
            x = layer(x)
        return self.text_model.final_layer_norm(x)


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    angles = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Feature-map queries attending onto the token embedding sequence."""

    def __init__(self, channels: int, context_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q_in = x.reshape(b, c, h * w).transpose(1, 2)
        q = self.to_q(self.norm(q_in))
        k = self.to_k(context)
        v = self.to_v(context)
        q = q.view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ToyDenoiser(nn.Module):
    """Compact UNet with cross-attention conditioning at every resolution."""

    def __init__(self, context_dim: int = 64, base: int = 32, temb_dim: int = 128):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 3
        self.temb = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.temb_dim = temb_dim
        self.context_dim = context_dim
        self.base = base

        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, temb_dim)
        self.attn1 = CrossAttention(c1, context_dim)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, temb_dim)
        self.attn2 = CrossAttention(c2, context_dim)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c3, temb_dim)
        self.mid_attn = CrossAttention(c3, context_dim)
        self.mid2 = ResBlock(c3, c3, temb_dim)
        self.up2 = ResBlock(c3 + c2, c2, temb_dim)
        self.up_attn2 = CrossAttention(c2, context_dim)
        self.up1 = ResBlock(c2 + c1, c1, temb_dim)
        self.up_attn1 = CrossAttention(c1, context_dim)
        self.norm_out = nn.GroupNorm(math.gcd(8, c1), c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        temb = self.temb(timestep_embedding(t, self.temb_dim, dtype=self.conv_in.weight.dtype))
        h1 = self.down1(self.conv_in(x), temb)                      # 32x32, c1
        h1 = self.attn1(h1, context)
        h2 = self.down2(self.pool1(h1), temb)                       # 16x16, c2
        h2 = self.attn2(h2, context)
        m = self.mid1(self.pool2(h2), temb)                         # 8x8, c3
        m = self.mid_attn(m, context)
        m = self.mid2(m, temb)
        u2 = F.interpolate(m, scale_factor=2, mode="nearest")       # 16x16
        u2 = self.up2(torch.cat([u2, h2], dim=1), temb)
        u2 = self.up_attn2(u2, context)
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")      # 32x32
        u1 = self.up1(torch.cat([u1, h1], dim=1), temb)
        u1 = self.up_attn1(u1, context)
        return self.conv_out(F.silu(self.norm_out(u1)))


class ProbeNet(nn.Module):
    """Small convolutional classifier over the 16 color-shape classes."""

    def __init__(self, num_classes: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(128 * 4 * 4, 128), nn.ReLU(), nn.Linear(128, num_classes)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))
