"""Free-form test streams: Dirichlet-length domain fragments, randomly interleaved."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class FragmentSpec:
    domain_id: int
    sample_ids: Tuple[str, ...]

    def __post_init__(self):
        if not self.sample_ids:
            raise ConfigError("fragment must hold at least one sample")

    def __len__(self):
        return len(self.sample_ids)


@dataclass(frozen=True)
class StreamManifest:
    fragments: Tuple[FragmentSpec, ...]
    delta: float
    seed: int
    fragments_per_domain: Dict[int, int]
    domain_sizes: Dict[int, int]

    @property
    def n_images(self) -> int:
        return sum(len(f) for f in self.fragments)

    @property
    def n_domains(self) -> int:
        return len(self.domain_sizes)

    def iter_samples(self):
        for frag in self.fragments:
            for sid in frag.sample_ids:
                yield frag.domain_id, sid

    def to_json(self) -> str:
        payload = {
            "delta": self.delta,
            "seed": self.seed,
            "roster": {
                str(d): {"fragments": self.fragments_per_domain[d], "size": self.domain_sizes[d]}
                for d in sorted(self.domain_sizes)
            },
            "n_images": self.n_images,
            "fragments": [{"domain_id": f.domain_id, "sample_ids": list(f.sample_ids)} for f in self.fragments],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StreamManifest":
        payload = json.loads(text)
        roster = payload["roster"]
        return cls(
            fragments=tuple(FragmentSpec(f["domain_id"], tuple(f["sample_ids"])) for f in payload["fragments"]),
            delta=payload["delta"],
            seed=payload["seed"],
            fragments_per_domain={int(d): r["fragments"] for d, r in roster.items()},
            domain_sizes={int(d): r["size"] for d, r in roster.items()},
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "StreamManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"stream manifest not found: {path}")
        return cls.from_json(path.read_text())


def largest_remainder(proportions: Sequence[float], total: int, minimum: int = 1) -> np.ndarray:
    """Integer lengths >= ``minimum`` summing to ``total``, closest to ``proportions * total``."""
    p = np.asarray(proportions, dtype=np.float64)
    m = len(p)
    if m * minimum > total:
        raise ConfigError(f"cannot split {total} items into {m} parts of at least {minimum}")
    p = p / p.sum() if p.sum() > 0 else np.full(m, 1.0 / m)
    quota = p * total
    lengths = np.maximum(np.floor(quota).astype(np.int64), minimum)
    rem = quota - np.floor(quota)
    idx = np.arange(m)
    diff = total - int(lengths.sum())
    while diff > 0:
        for i in np.lexsort((idx, -rem))[:diff]:
            lengths[i] += 1
        diff = total - int(lengths.sum())
    while diff < 0:
        cand = [i for i in np.lexsort((idx, rem)) if lengths[i] > minimum]
        for i in cand[: -diff]:
            lengths[i] -= 1
        diff = total - int(lengths.sum())
    return lengths


def make_stream(
    test_splits: Mapping[int, Sequence[str]],
    fragments_per_domain: int = 10,
    delta: float = 1.0,
    seed: int = 0,
) -> StreamManifest:
    """Cut each domain's test split into Dirichlet(delta)-sized fragments and shuffle all fragments."""
    if delta <= 0:
        raise ConfigError(f"delta must be > 0, got {delta}")
    if fragments_per_domain < 1:
        raise ConfigError(f"fragments_per_domain must be >= 1, got {fragments_per_domain}")
    rng = np.random.default_rng(seed)
    fragments: List[FragmentSpec] = []
    sizes, counts = {}, {}
    for d in sorted(test_splits):
        ids = list(test_splits[d])
        if not ids:
            raise ConfigError(f"test split of domain {d} is empty")
        if fragments_per_domain > len(ids):
            raise ConfigError(
                f"fragments_per_domain={fragments_per_domain} exceeds test split size {len(ids)} of domain {d}"
            )
        props = rng.dirichlet(np.full(fragments_per_domain, float(delta)))
        lengths = largest_remainder(props, len(ids))
        order = rng.permutation(len(ids))
        start = 0
        for n in lengths:
            fragments.append(FragmentSpec(int(d), tuple(ids[i] for i in order[start : start + n])))
            start += n
        sizes[int(d)] = len(ids)
        counts[int(d)] = fragments_per_domain
    shuffled = tuple(fragments[i] for i in rng.permutation(len(fragments)))
    return StreamManifest(shuffled, float(delta), int(seed), counts, sizes)


@dataclass
class StreamStats:
    length_histogram: Dict[int, int]
    switch_count: int
    fragments_per_domain: Dict[int, int]
    max_share: Dict[int, float] = field(default_factory=dict)


def stream_stats(manifest: StreamManifest) -> StreamStats:
    doms = [f.domain_id for f in manifest.fragments]
    switches = sum(1 for a, b in zip(doms, doms[1:]) if a != b)
    longest: Dict[int, int] = {}
    for f in manifest.fragments:
        longest[f.domain_id] = max(longest.get(f.domain_id, 0), len(f))
    return StreamStats(
        length_histogram=dict(sorted(Counter(len(f) for f in manifest.fragments).items())),
        switch_count=switches,
        fragments_per_domain=dict(sorted(Counter(doms).items())),
        max_share={d: longest[d] / manifest.domain_sizes[d] for d in sorted(longest)},
    )
