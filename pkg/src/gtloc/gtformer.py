"""Global-token transformer backbone.

A ViT-style encoder whose token sequence carries, in fixed order, a handful
of global tokens embedded from a downsampled view of the whole image, the
patch tokens, and one class token. The trailing blocks are global-aware:
the sigmoid of each global token's query row against the key matrix gives a
per-token foreground probability row, the rows' mean multiplicatively
modulates the softmax attention, and the patch part of those rows reshapes
into coarse localization maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    num_heads: int = 6
    num_blocks: int = 12
    num_gta_blocks: int = 4
    num_global_tokens: int = 4
    num_classes: int = 200
    downsample_size: int = 32
    mlp_ratio: float = 4.0
    average_gta_maps: bool = False  # export maps averaged over all global-aware blocks
    modulate_attention: bool = True  # False = ablation: maps exported, attention unmodulated

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if not 1 <= self.num_gta_blocks <= self.num_blocks:
            raise ConfigError("need 1 <= num_gta_blocks <= num_blocks")
        k = math.isqrt(self.num_global_tokens)
        if k * k != self.num_global_tokens:
            raise ConfigError(f"num_global_tokens {self.num_global_tokens} is not a square")
        if self.downsample_size % k != 0:
            raise ConfigError(
                f"window factor {k} does not tile downsample_size {self.downsample_size}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def window_factor(self) -> int:
        return math.isqrt(self.num_global_tokens)

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_global_tokens + 1

    # Token layout: [global | patch | class], immutable across blocks.
    @property
    def global_slice(self) -> slice:
        return slice(0, self.num_global_tokens)

    @property
    def patch_slice(self) -> slice:
        return slice(self.num_global_tokens, self.num_global_tokens + self.num_patches)

    @property
    def class_index(self) -> int:
        return self.num_global_tokens + self.num_patches

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ForegroundMaps:
    """Per-global-token probability maps and their elementwise mean.

    Shapes are (..., G, h/P, w/P) and (..., h/P, w/P); values live strictly
    in (0, 1) because they are sigmoid outputs.
    """

    per_token: torch.Tensor
    fused: torch.Tensor


@dataclass
class GTAInternals:
    """Intermediate tensors of one global-aware attention evaluation."""

    q: torch.Tensor  # (B, heads, T, head_dim)
    k: torch.Tensor
    v: torch.Tensor
    global_queries: torch.Tensor  # (B, heads, G, head_dim)
    per_token_rows: torch.Tensor  # (B, G, T), head-averaged foreground rows
    fused_row: torch.Tensor  # (B, T)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection; equivalent to flatten + linear."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.image_size = config.image_size
        self.proj = nn.Conv2d(
            3, config.embed_dim, kernel_size=config.patch_size, stride=config.patch_size
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ConfigError(
                f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}"
            )
        return self.proj(x).flatten(2).transpose(1, 2)  # (B, N, D)


class GlobalEmbed(nn.Module):
    """Embed the whole image into a few global tokens.

    The image is bilinearly downsampled, a k x k window scans it with stride
    k, and the pixels sharing a within-window position are gathered into one
    subsampled global patch per position, then linearly projected. k^2 equals
    the number of global tokens, so k=2 yields the four-window layout and
    k=1 degenerates to a single whole-image token.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.k = config.window_factor
        self.downsample_size = config.downsample_size
        side = config.downsample_size // self.k
        self.proj = nn.Linear(3 * side * side, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ds = F.interpolate(
            x, size=(self.downsample_size, self.downsample_size),
            mode="bilinear", align_corners=False,
        )
        k = self.k
        groups = [
            ds[:, :, i::k, j::k].reshape(ds.shape[0], -1)
            for i in range(k)
            for j in range(k)
        ]
        return self.proj(torch.stack(groups, dim=1))  # (B, G, D)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    """Multi-head self-attention, optionally exporting and applying the
    global-token foreground rows.

    With `export_maps`, the sigmoid of each global query row against the
    keys (per head, scaled by 1/sqrt(head_dim)) is averaged over global
    tokens into one fused row; when `modulate` is also set, every softmax
    attention row is multiplied elementwise by that row (post-softmax, no
    re-normalization) before mixing the values. Exported maps are averaged
    over heads.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        num_global_tokens: int,
        export_maps: bool = False,
        modulate: bool = False,
    ):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.num_global = num_global_tokens
        self.export_maps = export_maps
        self.modulate = modulate
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def _project(self, x: torch.Tensor):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def forward(
        self,
        x: torch.Tensor,
        modulation: torch.Tensor | None = None,
        return_attention: bool = False,
    ):
        q, k, v = self._project(x)
        scores = (q @ k.transpose(-2, -1)) * self.scale  # (B, heads, T, T)
        attn = scores.softmax(dim=-1)
        maps = None
        mixed = attn
        if self.export_maps:
            fg_rows = torch.sigmoid(scores[:, :, : self.num_global, :])  # (B, heads, G, T)
            fused = fg_rows.mean(dim=2, keepdim=True)  # (B, heads, 1, T)
            if modulation is not None:
                fused = modulation
            if self.modulate:
                mixed = attn * fused
            maps = fg_rows.mean(dim=1)  # (B, G, T)
        out = (mixed @ v).transpose(1, 2).reshape(x.shape)
        out = self.proj(out)
        if return_attention:
            return out, maps, attn
        return out, maps

    def internals(self, x: torch.Tensor) -> GTAInternals:
        """Expose Q/K/V and the foreground rows for inspection."""
        q, k, v = self._project(x)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        fg_rows = torch.sigmoid(scores[:, :, : self.num_global, :])
        per_token = fg_rows.mean(dim=1)
        return GTAInternals(
            q=q,
            k=k,
            v=v,
            global_queries=q[:, :, : self.num_global, :],
            per_token_rows=per_token,
            fused_row=per_token.mean(dim=1),
        )


class Block(nn.Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, config: ModelConfig, global_aware: bool):
        super().__init__()
        dim = config.embed_dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(
            dim,
            config.num_heads,
            config.num_global_tokens,
            export_maps=global_aware,
            modulate=global_aware and config.modulate_attention,
        )
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * config.mlp_ratio))

    def forward(self, x: torch.Tensor, modulation: torch.Tensor | None = None):
        y, maps = self.attn(self.norm1(x), modulation=modulation)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, maps


def extract_localization_maps(global_rows: torch.Tensor, config: ModelConfig) -> ForegroundMaps:
    """Crop the patch columns out of the full foreground rows and reshape.

    `global_rows` is (..., G, T); the patch segment becomes one
    (h/P, w/P) map per global token and the fused map is their mean.
    """
    g = config.grid_size
    patches = global_rows[..., config.patch_slice]
    per_token = patches.reshape(*patches.shape[:-1], g, g)
    return ForegroundMaps(per_token=per_token, fused=per_token.mean(dim=-3))


class GTFormer(nn.Module):
    """Backbone producing class logits and coarse foreground maps.

    The first (num_blocks - num_gta_blocks) blocks are standard; the
    trailing blocks are global-aware. Global tokens ride through standard
    blocks as ordinary sequence members; only global-aware blocks export
    (and apply) foreground rows. Localization maps are read from the last
    global-aware block, or averaged over all of them when configured.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config)
        self.global_embed = GlobalEmbed(config)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.seq_len, config.embed_dim))
        num_standard = config.num_blocks - config.num_gta_blocks
        self.blocks = nn.ModuleList(
            [Block(config, global_aware=i >= num_standard) for i in range(config.num_blocks)]
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.num_classes)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    # -- embedding ---------------------------------------------------------

    @staticmethod
    def _ensure_batched(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if image.dim() == 3:
            return image[None], True
        return image, False

    def embed_patches(self, image: torch.Tensor) -> torch.Tensor:
        """Patch tokens with their positional embedding added."""
        x, single = self._ensure_batched(image)
        tokens = self.patch_embed(x) + self.pos_embed[:, self.config.patch_slice]
        return tokens[0] if single else tokens

    def embed_global_tokens(self, image: torch.Tensor) -> torch.Tensor:
        x, single = self._ensure_batched(image)
        tokens = self.global_embed(x) + self.pos_embed[:, self.config.global_slice]
        return tokens[0] if single else tokens

    def embed_sequence(self, image: torch.Tensor) -> torch.Tensor:
        """Assemble [global | patch | class] tokens plus positional embedding."""
        x, _ = self._ensure_batched(image)
        B = x.shape[0]
        parts = [
            self.global_embed(x),
            self.patch_embed(x),
            self.cls_token.expand(B, -1, -1),
        ]
        return torch.cat(parts, dim=1) + self.pos_embed

    # -- encoder -----------------------------------------------------------

    def forward_blocks(self, seq: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Run all blocks; collects the global foreground rows per GTA block."""
        collected = []
        for block in self.blocks:
            seq, maps = block(seq)
            if maps is not None:
                collected.append(maps)
        return seq, collected

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, ForegroundMaps]:
        x, single = self._ensure_batched(image)
        seq = self.embed_sequence(x)
        seq, collected = self.forward_blocks(seq)
        seq = self.norm(seq)
        logits = self.head(seq[:, self.config.class_index])
        rows = torch.stack(collected).mean(dim=0) if self.config.average_gta_maps else collected[-1]
        maps = extract_localization_maps(rows, self.config)
        if single:
            return logits[0], ForegroundMaps(maps.per_token[0], maps.fused[0])
        return logits, maps


# ---------------------------------------------------------------------------
# Pretrained ViT (DeiT-style) weight import.


def load_vit_weights(model: GTFormer, state: dict) -> tuple[list[str], list[str]]:
    """Map a stock ViT/DeiT state dict onto a GTFormer.

    Source layout is [class | patch] with per-block keys
    blocks.N.{norm1,attn.qkv,attn.proj,norm2,mlp.fc1,mlp.fc2}; those carry
    over one-to-one. The class position embedding moves to our trailing
    class slot, patch embeddings to the patch slice; global-token machinery
    keeps its fresh initialization. Returns (loaded, skipped) key lists.
    """
    cfg = model.config
    loaded, skipped = [], []
    own = model.state_dict()

    def take(src_key: str, dst_key: str, transform=None):
        if src_key not in state:
            skipped.append(src_key)
            return
        tensor = torch.as_tensor(state[src_key])
        if transform is not None:
            tensor = transform(tensor)
        if dst_key not in own or own[dst_key].shape != tensor.shape:
            skipped.append(src_key)
            return
        own[dst_key] = tensor.to(own[dst_key].dtype)
        loaded.append(src_key)

    take("patch_embed.proj.weight", "patch_embed.proj.weight")
    take("patch_embed.proj.bias", "patch_embed.proj.bias")
    take("cls_token", "cls_token")
    take("norm.weight", "norm.weight")
    take("norm.bias", "norm.bias")
    take("head.weight", "head.weight")
    take("head.bias", "head.bias")

    if "pos_embed" in state:
        src = torch.as_tensor(state["pos_embed"])  # (1, 1+N, D), class first
        if src.shape[1] == cfg.num_patches + 1 and src.shape[2] == cfg.embed_dim:
            dst = own["pos_embed"].clone()
            dst[:, cfg.patch_slice] = src[:, 1:]
            dst[:, cfg.class_index] = src[:, 0]
            own["pos_embed"] = dst
            loaded.append("pos_embed")
        else:
            skipped.append("pos_embed")

    for i in range(cfg.num_blocks):
        for part in (
            "norm1.weight", "norm1.bias",
            "attn.qkv.weight", "attn.qkv.bias",
            "attn.proj.weight", "attn.proj.bias",
            "norm2.weight", "norm2.bias",
            "mlp.fc1.weight", "mlp.fc1.bias",
            "mlp.fc2.weight", "mlp.fc2.bias",
        ):
            take(f"blocks.{i}.{part}", f"blocks.{i}.{part}")

    model.load_state_dict(own)
    return loaded, skipped
