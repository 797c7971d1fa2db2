"""Minimal Vision Transformer with key/value prefix hooks.

Token positions follow the positional-embedding index: 0 is the class token,
1..L are image patches in row-major order. Masking keeps a subset of patch
positions (no mask token), so every layer sees exactly the retained tokens.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

Prefix = Tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    n_classes: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} must be divisible by heads={self.heads}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TokenSequence:
    patches: np.ndarray  # L x (P*P*3) flattened patches
    kept_indices: np.ndarray  # positions in 1..L

    def __len__(self):
        return len(self.kept_indices)


def patchify(image, patch_size: int) -> TokenSequence:
    """Split an H x W x 3 image (array or LabeledImage) into row-major patches."""
    pixels = getattr(image, "pixels", image)
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    p = pixels.reshape(gh, patch_size, gw, patch_size, -1).transpose(0, 2, 1, 3, 4)
    p = p.reshape(gh * gw, -1)
    return TokenSequence(patches=p, kept_indices=np.arange(1, gh * gw + 1))


def patchify_batch(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, 3) -> (B, L, P*P*3), same ordering as :func:`patchify`."""
    b, h, w, c = x.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = x.reshape(b, gh, patch_size, gw, patch_size, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def _split_heads(self, t: torch.Tensor, batch: int) -> torch.Tensor:
        if t.dim() == 2:
            t = t.unsqueeze(0)
        t = t.expand(batch, -1, -1)
        return t.reshape(batch, t.shape[1], self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, prefix: Optional[Prefix] = None):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if prefix is not None:
            pk, pv = prefix
            if pk.shape[-1] != c or pv.shape[-1] != c:
                raise ShapeError(f"prefix width {pk.shape[-1]} does not match model dim {c}")
            if pk.shape[-2] != pv.shape[-2]:
                raise ShapeError("key and value prefixes must have equal row counts")
            if pk.shape[-2] > 0:
                k = torch.cat([self._split_heads(pk, b), k], dim=2)
                v = torch.cat([self._split_heads(pv, b), v], dim=2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, prefix=None, drop=None):
        a, attn = self.attn(self.norm1(x), prefix)
        x = x + a
        h = F.gelu(self.fc1(self.norm2(x)))
        if drop is not None:
            h = drop(h)
        return x + self.fc2(h), attn


@dataclass
class ForwardOutput:
    logits: Optional[torch.Tensor]
    hidden: List[torch.Tensor]
    attention: List[torch.Tensor] = field(default_factory=list)


class TinyViT(nn.Module):
    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        c = config.dim
        self.patch_embed = nn.Linear(config.patch_size**2 * 3, c)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_tokens + 1, c))
        self.blocks = nn.ModuleList(Block(c, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, config.n_classes)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear) and m is not self.patch_embed:
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def layernorm_parameters(self) -> List[nn.Parameter]:
        return [p for m in self.modules() if isinstance(m, nn.LayerNorm) for p in (m.weight, m.bias)]

    def embed(self, patches: torch.Tensor, kept: Optional[torch.Tensor] = None) -> torch.Tensor:
        b = patches.shape[0]
        x = self.patch_embed((patches - 0.5) * 4.0) + self.pos_embed[:, 1:]
        if kept is not None:
            idx = (kept - 1).to(torch.long)
            if idx.dim() == 1:
                idx = idx.unsqueeze(0).expand(b, -1)
            x = torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(b, -1, -1)
        return torch.cat([cls, x], dim=1)

    def forward(
        self,
        patches: torch.Tensor,
        kept: Optional[torch.Tensor] = None,
        attachments: Optional[Mapping[int, Prefix]] = None,
        mode: str = "deterministic",
        generator: Optional[torch.Generator] = None,
        upto: Optional[int] = None,
        return_attention: bool = False,
    ) -> ForwardOutput:
        """Run the encoder.

        ``attachments`` maps a 0-based layer index to a (key_prefix,
        value_prefix) pair. ``mode="mc_dropout"`` samples a dropout mask in
        the first layer's feedforward network only, drawn from ``generator``.
        ``upto`` stops after that many blocks and skips the head.
        """
        if mode not in ("deterministic", "mc_dropout"):
            raise ValueError(f"unknown mode {mode!r}")
        attachments = attachments or {}
        for layer in attachments:
            if not 0 <= layer < len(self.blocks):
                raise ShapeError(f"attachment references layer {layer}, model has {len(self.blocks)}")
        x = self.embed(patches, kept)
        hidden, attns = [], []
        n_blocks = len(self.blocks) if upto is None else upto
        for i, blk in enumerate(self.blocks[:n_blocks]):
            drop = None
            if i == 0:
                if mode == "mc_dropout":
                    drop = _MaskedDropout(self.config.dropout_rate, generator)
                elif self.training and self.config.dropout_rate > 0:
                    drop = lambda h: F.dropout(h, self.config.dropout_rate, True)  # noqa: E731
            x, attn = blk(x, attachments.get(i), drop)
            hidden.append(x)
            if return_attention:
                attns.append(attn)
        logits = None
        if upto is None:
            logits = self.head(self.norm(x[:, 0]))
        return ForwardOutput(logits=logits, hidden=hidden, attention=attns)


class _MaskedDropout:
    def __init__(self, rate: float, generator: Optional[torch.Generator]):
        self.rate = rate
        self.generator = generator

    def __call__(self, h: torch.Tensor) -> torch.Tensor:
        if self.rate <= 0:
            return h
        keep = torch.rand(h.shape, generator=self.generator, dtype=h.dtype) >= self.rate
        return h * keep / (1.0 - self.rate)


def to_patches(images: Union[np.ndarray, Sequence], patch_size: int, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([getattr(im, "pixels", im) for im in images]) if isinstance(images, (list, tuple)) else images
    return patchify_batch(torch.as_tensor(np.asarray(arr), dtype=dtype), patch_size)


@dataclass
class TrainResult:
    model: TinyViT
    loss_curve: List[float]
    val_accuracy: float
    seed: int


@torch.no_grad()
def evaluate_accuracy(model: TinyViT, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, len(x), batch_size):
        p = to_patches(x[i : i + batch_size], model.config.patch_size)
        correct += int((model(p).logits.argmax(-1).numpy() == y[i : i + batch_size]).sum())
    model.train(was_training)
    return correct / max(len(x), 1)


def _random_prefixes(batch: int, rows: int, config: ViTConfig, scale: float, gen: torch.Generator):
    out = {}
    for layer in range(config.depth):
        s = torch.rand(batch, 1, 1, generator=gen) * scale
        pk = torch.randn(batch, rows, config.dim, generator=gen) * s
        pv = torch.randn(batch, rows, config.dim, generator=gen) * s
        out[layer] = (pk, pv)
    return out


def train_source(
    dataset,
    config: ViTConfig,
    epochs: int = 30,
    lr: float = 1e-4,
    seed: int = 0,
    source_domain: int = 0,
    batch_size: int = 16,
    require_accuracy: Optional[float] = None,
    label_smoothing: float = 0.0,
    prefix_rows: int = 0,
    prefix_scale: float = 0.2,
) -> TrainResult:
    """Supervised training on the source domain's train split with Adam.

    With ``prefix_rows > 0`` every other batch runs with random key/value
    prefixes of that many rows in every layer (per-sample scale drawn from
    U(0, prefix_scale)), so the frozen network later tolerates attached
    prompts near their initialization.
    """
    if prefix_rows % 2:
        raise ConfigError(f"prefix_rows must be even, got {prefix_rows}")
    torch.manual_seed(seed)
    model = TinyViT(config)
    x_tr, y_tr = dataset.arrays(source_domain, "train")
    x_va, y_va = dataset.arrays(source_domain, "val")
    patches = to_patches(x_tr, config.patch_size)
    labels = torch.as_tensor(y_tr)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    curve = []
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(len(labels), generator=gen)
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            atts = None
            if prefix_rows and (i // batch_size) % 2:
                atts = _random_prefixes(len(idx), prefix_rows // 2, config, prefix_scale, gen)
            logits = model(patches[idx], attachments=atts).logits
            loss = F.cross_entropy(logits, labels[idx], label_smoothing=label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / max(len(labels), 1))
        logger.debug("epoch %d loss %.4f", epoch, curve[-1])
    model.eval()
    acc = evaluate_accuracy(model, x_va, y_va) if len(y_va) else float("nan")
    if require_accuracy is not None and not acc >= require_accuracy:
        raise TrainingError(
            f"source validation accuracy {acc:.4f} below required {require_accuracy:.4f} after {epochs} epochs",
            loss_curve=curve,
            val_accuracy=acc,
        )
    return TrainResult(model=model, loss_curve=curve, val_accuracy=acc, seed=seed)


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: TinyViT, path, seed: int = 0, extra: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {"config": asdict(model.config), "seed": seed, "digest": param_digest(model)}
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> TinyViT:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = json.loads(path.with_suffix(".json").read_text())
    model = TinyViT(ViTConfig(**meta["config"]))
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model
