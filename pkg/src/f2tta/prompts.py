"""Prefix prompts and their key/value attachment to attention layers."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ShapeError

SPECIFIC = "image_specific"
INVARIANT = "image_invariant"
DEFAULT_ORDER = (SPECIFIC, INVARIANT)


@dataclass
class PrefixPrompt:
    kind: str
    values: torch.Tensor  # L_p x C
    layers: Optional[Tuple[int, ...]] = None  # None: every layer

    def __post_init__(self):
        if self.kind not in (SPECIFIC, INVARIANT):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.values.dim() != 2:
            raise ShapeError(f"prompt values must be 2-D (L_p x C), got shape {tuple(self.values.shape)}")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def attaches_to(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers


@dataclass
class PromptAttachment:
    key_prefix: torch.Tensor
    value_prefix: torch.Tensor
    layer: int

    @property
    def rows(self) -> int:
        return self.key_prefix.shape[0]

    def as_prefix(self):
        return self.key_prefix, self.value_prefix


def random_prompt(kind: str, length: int, dim: int, generator=None, std: float = 0.02, dtype=torch.float32) -> PrefixPrompt:
    if length % 2:
        raise ShapeError(f"prompt length must be even, got {length}")
    return PrefixPrompt(kind, torch.randn(length, dim, generator=generator, dtype=dtype) * std)


def split_prompt(p: PrefixPrompt) -> Tuple[torch.Tensor, torch.Tensor]:
    """First half of the rows forms the key prefix, second half the value prefix."""
    if p.length % 2:
        raise ShapeError(f"prompt length {p.length} is odd and cannot be split into key/value halves")
    half = p.length // 2
    return p.values[:half], p.values[half:]


def make_attachment(prompts: Sequence[PrefixPrompt], layer: int, dim: Optional[int] = None, order=DEFAULT_ORDER) -> PromptAttachment:
    """Concatenate the key halves (and value halves) of ``prompts`` for one layer.

    Prompts are sorted by ``order`` (specific before invariant by default);
    with no prompts the attachment has zero rows and leaves attention unchanged.
    """
    prompts = [p for p in prompts if p.attaches_to(layer)]
    dims = {p.dim for p in prompts}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise ShapeError(f"prompts have mismatched feature widths {sorted(dims)}")
    if not prompts:
        c = dim or 0
        empty = torch.zeros(0, c)
        return PromptAttachment(empty, empty, layer)
    rank = {kind: i for i, kind in enumerate(order)}
    prompts = sorted(prompts, key=lambda p: rank.get(p.kind, len(rank)))
    halves = [split_prompt(p) for p in prompts]
    return PromptAttachment(
        key_prefix=torch.cat([k for k, _ in halves], dim=0),
        value_prefix=torch.cat([v for _, v in halves], dim=0),
        layer=layer,
    )


def attachments_for(prompts: Iterable[PrefixPrompt], depth: int, order=DEFAULT_ORDER) -> Dict[int, Tuple[torch.Tensor, torch.Tensor]]:
    """Per-layer (key, value) prefixes ready for :meth:`TinyViT.forward`."""
    prompts = list(prompts)
    if not prompts:
        return {}
    out = {}
    for layer in range(depth):
        att = make_attachment(prompts, layer, order=order)
        if att.rows:
            out[layer] = att.as_prefix()
    return out


def save_prompt(p: PrefixPrompt, path) -> Path:
    """Flat float32 blob plus a JSON header alongside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(p.values.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    header = {"kind": p.kind, "length": p.length, "dim": p.dim, "layers": list(p.layers) if p.layers is not None else None}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    return path


def load_prompt(path) -> PrefixPrompt:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    if flat.size != header["length"] * header["dim"]:
        raise ShapeError(f"{path}: expected {header['length']}x{header['dim']} values, found {flat.size}")
    values = torch.from_numpy(flat.reshape(header["length"], header["dim"]).copy())
    layers = tuple(header["layers"]) if header["layers"] is not None else None
    return PrefixPrompt(header["kind"], values, layers)
