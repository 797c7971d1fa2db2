"""Prompt bank keyed by low-frequency amplitude spectra, and the two graph
networks that distill stored prompts into the current image's prompts."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError


def lowfreq_window(h: int, w: int, beta: float) -> Tuple[slice, slice]:
    """Central window of the DC-centred spectrum: half-width floor(beta*H), clipped."""
    bh, bw = max(1, int(math.floor(beta * h))), max(1, int(math.floor(beta * w)))
    ch, cw = h // 2, w // 2
    return slice(max(0, ch - bh), min(h, ch + bh + 1)), slice(max(0, cw - bw), min(w, cw + bw + 1))


def lowfreq_key(image, beta: float = 0.1, per_channel: bool = False) -> np.ndarray:
    """Flattened low-frequency crop of the (unnormalized) amplitude spectrum."""
    if not 0 < beta <= 0.5:
        raise ParameterError(f"beta must be in (0, 0.5], got {beta}")
    x = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    amp = np.abs(np.fft.fft2(x, axes=(0, 1)))
    if not per_channel:
        amp = amp.mean(axis=-1, keepdims=True)
    amp = np.fft.fftshift(amp, axes=(0, 1))
    rows, cols = lowfreq_window(x.shape[0], x.shape[1], beta)
    crop = amp[rows, cols]
    return np.ascontiguousarray(crop.transpose(2, 0, 1)).reshape(-1)


def cosine_weights(key: np.ndarray, keys: np.ndarray, normalize: bool = True) -> np.ndarray:
    key = np.asarray(key, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    denom = np.linalg.norm(keys, axis=1) * np.linalg.norm(key)
    w = np.where(denom > 0, keys @ key / np.where(denom > 0, denom, 1.0), 0.0)
    if normalize:
        total = w.sum()
        w = w / total if total > 1e-12 else np.full_like(w, 1.0 / len(w))
    return w


@dataclass
class BankEntry:
    key: np.ndarray
    specific_prompt: torch.Tensor
    invariant_prompt: torch.Tensor
    insertion_index: int


class PromptBank:
    """FIFO memory of (low-frequency key, prompt pair) snapshots."""

    def __init__(self, capacity: int = 20, beta: float = 0.1):
        if capacity < 1:
            raise ParameterError(f"bank capacity must be >= 1, got {capacity}")
        if not 0 < beta <= 0.5:
            raise ParameterError(f"beta must be in (0, 0.5], got {beta}")
        self.capacity = capacity
        self.beta = beta
        self.entries: Deque[BankEntry] = deque()
        self._counter = 0

    def __len__(self):
        return len(self.entries)

    @property
    def is_full(self) -> bool:
        return len(self.entries) >= self.capacity

    def enqueue(self, key, specific_prompt: torch.Tensor, invariant_prompt: torch.Tensor) -> "PromptBank":
        key = np.array(key, dtype=np.float64, copy=True)
        if self.entries:
            head = self.entries[0]
            if key.shape != head.key.shape:
                raise ShapeError(f"key shape {key.shape} does not match bank keys {head.key.shape}")
            if specific_prompt.shape != head.specific_prompt.shape or invariant_prompt.shape != head.invariant_prompt.shape:
                raise ShapeError("prompt shapes do not match the bank schema")
        self.entries.append(
            BankEntry(key, specific_prompt.detach().clone(), invariant_prompt.detach().clone(), self._counter)
        )
        self._counter += 1
        while len(self.entries) > self.capacity:
            self.entries.popleft()
        return self

    def keys(self) -> np.ndarray:
        return np.stack([e.key for e in self.entries])

    def specific_prompts(self) -> torch.Tensor:
        return torch.stack([e.specific_prompt for e in self.entries])

    def invariant_prompts(self) -> torch.Tensor:
        return torch.stack([e.invariant_prompt for e in self.entries])

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "beta": self.beta,
            "counter": self._counter,
            "keys": [e.key for e in self.entries],
            "specific": [e.specific_prompt for e in self.entries],
            "invariant": [e.invariant_prompt for e in self.entries],
            "insertion_index": [e.insertion_index for e in self.entries],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "PromptBank":
        bank = cls(state["capacity"], state["beta"])
        for k, s, i, n in zip(state["keys"], state["specific"], state["invariant"], state["insertion_index"]):
            bank.entries.append(BankEntry(np.asarray(k), s.clone(), i.clone(), int(n)))
        bank._counter = state["counter"]
        return bank

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def load(cls, path) -> "PromptBank":
        return cls.from_state_dict(torch.load(path, weights_only=False))


def preinit_specific(bank: PromptBank, key, normalize: bool = True) -> torch.Tensor:
    """Cosine-weighted combination of the stored image-specific prompts."""
    if not bank.is_full:
        raise ParameterError(f"bank holds {len(bank)}/{bank.capacity} entries; use random initialization")
    keys = bank.keys()
    if np.shape(key) != keys.shape[1:]:
        raise ShapeError(f"key shape {np.shape(key)} does not match bank keys {keys.shape[1:]}")
    stored = bank.specific_prompts()
    w = torch.as_tensor(cosine_weights(key, keys, normalize), dtype=stored.dtype)
    return torch.einsum("b,blc->lc", w, stored)


class GraphNet(nn.Module):
    """Single-hop attention over bank nodes.

    Prompts are flattened row-major and embedded by ``encoder``; ``scorer``
    rates each (query, stored) node pair through a leaky ReLU; the softmax
    weighted sum of stored nodes is mapped back by ``decoder``.
    """

    def __init__(self, prompt_len: int, dim: int, node_dim: int = 512, init_std: float = 0.02, negative_slope: float = 0.2):
        super().__init__()
        self.prompt_len, self.dim, self.node_dim = prompt_len, dim, node_dim
        self.negative_slope = negative_slope
        self.encoder = nn.Linear(prompt_len * dim, node_dim)
        self.decoder = nn.Linear(node_dim, prompt_len * dim)
        self.scorer = nn.Linear(2 * node_dim, 1)
        nn.init.normal_(self.encoder.weight, std=init_std)
        nn.init.normal_(self.scorer.weight, std=init_std)
        nn.init.zeros_(self.encoder.bias)
        nn.init.zeros_(self.scorer.bias)
        nn.init.zeros_(self.decoder.weight)
        nn.init.zeros_(self.decoder.bias)

    def coefficients(self, query: torch.Tensor, stored: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if query.shape != (self.prompt_len, self.dim) or stored.shape[1:] != (self.prompt_len, self.dim):
            raise ShapeError(
                f"graph expects prompts of shape {(self.prompt_len, self.dim)}, got {tuple(query.shape)} / {tuple(stored.shape[1:])}"
            )
        n_q = self.encoder(query.reshape(1, -1))
        n_b = self.encoder(stored.reshape(stored.shape[0], -1))
        pair = torch.cat([n_q.expand(n_b.shape[0], -1), n_b], dim=-1)
        e = F.leaky_relu(self.scorer(pair).squeeze(-1), self.negative_slope)
        return torch.softmax(e, dim=0), n_b

    def forward(self, query: torch.Tensor, stored: torch.Tensor) -> torch.Tensor:
        """Decoded attention aggregate of the stored nodes, shape L_p x C."""
        a, n_b = self.coefficients(query, stored)
        return self.decoder(a @ n_b).reshape(self.prompt_len, self.dim)


def graph_enhance_specific(graph: GraphNet, preinit: torch.Tensor, stored: torch.Tensor) -> torch.Tensor:
    return preinit + graph(preinit, stored)


def graph_enhance_invariant(graph: GraphNet, invariant: torch.Tensor, stored: torch.Tensor, gamma: float = 0.9) -> torch.Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must be in [0, 1], got {gamma}")
    if gamma == 1.0:
        return invariant
    return gamma * invariant + (1.0 - gamma) * graph(invariant, stored)
