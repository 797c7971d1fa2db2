"""Online adaptation over a stream manifest: I-DiPT plus the SourceOnly and
entropy-minimization baselines. Every method writes the same per-image log."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import MissingSampleError, UsageError
from .pgd import GraphNet, PromptBank, graph_enhance_invariant, graph_enhance_specific, lowfreq_key, preinit_specific
from .prompts import DEFAULT_ORDER, INVARIANT, SPECIFIC, PrefixPrompt, attachments_for
from .uom import UncertaintySelection, masked_consistency_loss, pseudo_label_loss, select, source_probs
from .vit import TinyViT, param_digest, to_patches

logger = logging.getLogger(__name__)

LOG_FIELDS = ("k", "sample_id", "domain_id", "label", "pred", "prob_1", "source_pred", "source_prob_1", "loss")


@dataclass
class IDiPTConfig:
    specific_len: int = 8
    invariant_len: int = 4
    mc_passes: int = 10
    mask_ratio: float = 0.3
    bank_size: int = 20
    beta: float = 0.1
    gamma: float = 0.9
    node_dim: int = 512
    lr: float = 1e-3
    use_uom: bool = True
    use_pgd: bool = True
    normalize_weights: bool = True
    target_mode: str = "soft"
    prompt_order: Tuple[str, str] = DEFAULT_ORDER
    layers: Optional[Tuple[int, ...]] = None
    feature_layer: str = "first"
    init_std: float = 0.02
    per_channel_key: bool = False
    prompt_max_norm: Optional[float] = 1.0


@dataclass
class PredictionRecord:
    k: int
    sample_id: str
    domain_id: int
    label: int
    pred: int
    prob_1: float
    source_pred: int
    source_prob_1: float
    loss: float


class PredictionLog(list):
    """List of :class:`PredictionRecord` with CSV round-tripping."""

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self:
                w.writerow([r.k, r.sample_id, r.domain_id, r.label, r.pred, repr(r.prob_1), r.source_pred, repr(r.source_prob_1), repr(r.loss)])
        return path

    @classmethod
    def from_csv(cls, path) -> "PredictionLog":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"prediction log not found: {path}")
        log = cls()
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(
                    PredictionRecord(
                        k=int(row["k"]),
                        sample_id=row["sample_id"],
                        domain_id=int(row["domain_id"]),
                        label=int(row["label"]),
                        pred=int(row["pred"]),
                        prob_1=float(row["prob_1"]),
                        source_pred=int(row["source_pred"]),
                        source_prob_1=float(row["source_prob_1"]),
                        loss=float(row["loss"]),
                    )
                )
        return log


@dataclass
class AdaptOutputs:
    y_a: np.ndarray
    y_w: np.ndarray
    y_u: np.ndarray
    y_r: np.ndarray
    loss: float
    wall_time: float
    used_graph: bool
    selection: Optional[UncertaintySelection] = None
    post_step_loss: Optional[float] = None
    skipped: bool = False


def _freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class AdaptState:
    """All mutable state of an I-DiPT run over one stream.

    The backbone is frozen; the persistent image-invariant prompt, both graph
    networks, the prompt bank and the optimizer moments live here. The
    image-specific prompt gets a fresh optimizer every image.
    """

    def __init__(self, model: TinyViT, config: Optional[IDiPTConfig] = None, seed: int = 0):
        self.model = _freeze(model)
        self.config = config or IDiPTConfig()
        self.seed = int(seed)
        cfg = self.config
        dim = model.config.dim
        self.dtype = next(model.parameters()).dtype
        gen = torch.Generator().manual_seed(self.seed)
        self.invariant = nn.Parameter(torch.randn(cfg.invariant_len, dim, generator=gen, dtype=self.dtype) * cfg.init_std)
        torch.manual_seed(self.seed)
        self.graph_s = GraphNet(cfg.specific_len, dim, cfg.node_dim).to(self.dtype)
        self.graph_i = GraphNet(cfg.invariant_len, dim, cfg.node_dim).to(self.dtype)
        self.bank = PromptBank(cfg.bank_size, cfg.beta)
        self.optimizer = torch.optim.Adam(self.persistent_parameters(), lr=cfg.lr)
        self.k = 0
        self.events: List[dict] = []
        self.backbone_digest = param_digest(self.model)

    def persistent_parameters(self) -> List[nn.Parameter]:
        return [self.invariant, *self.graph_s.parameters(), *self.graph_i.parameters()]

    def trainable_parameter_count(self) -> int:
        per_image = self.config.specific_len * self.model.config.dim
        return per_image + sum(p.numel() for p in self.persistent_parameters())

    # ---- pieces of one adaptation step -------------------------------------------------

    def _image_seeds(self) -> Tuple[int, int]:
        dropout_seed, init_seed = np.random.SeedSequence([self.seed, self.k]).generate_state(2)
        return int(dropout_seed), int(init_seed)

    def _layers(self):
        return tuple(self.config.layers) if self.config.layers is not None else None

    def _cap(self, values: torch.Tensor) -> torch.Tensor:
        # graph residuals feed back through the bank; bound each row to keep the loop contractive
        cap = self.config.prompt_max_norm
        if cap is None:
            return values
        return torch.renorm(values, p=2, dim=0, maxnorm=cap)

    def build_prompts(self, base_specific: torch.Tensor, use_graph: bool) -> Tuple[PrefixPrompt, PrefixPrompt]:
        """Enhanced (specific, invariant) prompts as differentiable functions of the learnable state."""
        cfg = self.config
        if use_graph:
            phi_s = graph_enhance_specific(self.graph_s, base_specific, self.bank.specific_prompts())
            phi_i = graph_enhance_invariant(self.graph_i, self.invariant, self.bank.invariant_prompts(), cfg.gamma)
            phi_s, phi_i = self._cap(phi_s), self._cap(phi_i)
        else:
            phi_s, phi_i = base_specific, self.invariant
        layers = self._layers()
        return PrefixPrompt(SPECIFIC, phi_s, layers), PrefixPrompt(INVARIANT, phi_i, layers)

    def adaptation_loss(self, patches, sel, specific: PrefixPrompt, invariant: PrefixPrompt, y_w):
        if self.config.use_uom:
            return masked_consistency_loss(self.model, specific, invariant, patches, sel, self.config.target_mode, y_w)
        return pseudo_label_loss(self.model, specific, invariant, patches, y_w)

    def adapt_image(self, image, track_descent: bool = False) -> AdaptOutputs:
        if self.model is None:
            raise UsageError("adaptation state has no source model")
        t0 = time.perf_counter()
        cfg = self.config
        patches = to_patches([image], self.model.config.patch_size, self.dtype)
        dropout_seed, init_seed = self._image_seeds()

        y_w = source_probs(self.model, patches)
        sel = None
        if cfg.use_uom:
            sel = select(self.model, patches[0], cfg.mc_passes, cfg.mask_ratio, dropout_seed, cfg.feature_layer)

        key = lowfreq_key(image, cfg.beta, cfg.per_channel_key) if cfg.use_pgd else None
        use_graph = cfg.use_pgd and self.bank.is_full
        if use_graph:
            init = preinit_specific(self.bank, key, cfg.normalize_weights)
        else:
            gen = torch.Generator().manual_seed(init_seed)
            init = torch.randn(cfg.specific_len, self.model.config.dim, generator=gen, dtype=self.dtype) * cfg.init_std
        base_s = nn.Parameter(init.to(self.dtype))
        specific_opt = torch.optim.Adam([base_s], lr=cfg.lr)

        sp, ip = self.build_prompts(base_s, use_graph)
        out = self.adaptation_loss(patches, sel, sp, ip, y_w)
        loss_value = float(out.loss.detach())
        skipped = not math.isfinite(loss_value)
        if skipped:
            self.events.append({"k": self.k, "event": "non-finite loss, step skipped", "loss": loss_value})
            logger.warning("non-finite adaptation loss at image %d; step skipped", self.k)
        else:
            self.optimizer.zero_grad(set_to_none=True)
            specific_opt.zero_grad(set_to_none=True)
            out.loss.backward()
            specific_opt.step()
            self.optimizer.step()

        with torch.no_grad():
            sp, ip = self.build_prompts(base_s, use_graph)
            post = None
            if track_descent:
                post = float(self.adaptation_loss(patches, sel, sp, ip, y_w).loss)
            if skipped:
                y_a = y_w
            else:
                atts = attachments_for([sp, ip], self.model.config.depth, cfg.prompt_order)
                y_a = torch.softmax(self.model(patches, attachments=atts).logits, dim=-1)
            if cfg.use_pgd:
                self.bank.enqueue(key, sp.values, ip.values)
            if use_graph:
                self.invariant.copy_(ip.values)
        self.k += 1
        return AdaptOutputs(
            y_a=y_a[0].double().numpy(),
            y_w=y_w[0].double().numpy(),
            y_u=torch.softmax(out.y_u.detach(), -1)[0].double().numpy(),
            y_r=torch.softmax(out.y_r.detach(), -1)[0].double().numpy(),
            loss=loss_value,
            wall_time=time.perf_counter() - t0,
            used_graph=use_graph,
            selection=sel,
            post_step_loss=post,
            skipped=skipped,
        )

    # ---- checkpointing -------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "k": self.k,
            "invariant": self.invariant.detach().clone(),
            "graph_s": self.graph_s.state_dict(),
            "graph_i": self.graph_i.state_dict(),
            "bank": self.bank.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "events": list(self.events),
            "backbone_digest": self.backbone_digest,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def load(cls, path, model: TinyViT) -> "AdaptState":
        state = torch.load(path, weights_only=False)
        cfg = state["config"]
        cfg["prompt_order"] = tuple(cfg["prompt_order"])
        if cfg["layers"] is not None:
            cfg["layers"] = tuple(cfg["layers"])
        obj = cls(model, IDiPTConfig(**cfg), state["seed"])
        if obj.backbone_digest != state["backbone_digest"]:
            raise UsageError("checkpoint was produced with a different source model")
        with torch.no_grad():
            obj.invariant.copy_(state["invariant"])
        obj.graph_s.load_state_dict(state["graph_s"])
        obj.graph_i.load_state_dict(state["graph_i"])
        obj.bank = PromptBank.from_state_dict(state["bank"])
        obj.optimizer.load_state_dict(state["optimizer"])
        obj.k = state["k"]
        obj.events = state["events"]
        return obj


def _resolve(manifest, dataset):
    items = []
    for domain_id, sid in manifest.iter_samples():
        if sid not in dataset:
            raise MissingSampleError(sid)
        items.append(dataset.get(sid))
    return items


def _record(k, image, y_a, y_w, loss) -> PredictionRecord:
    return PredictionRecord(
        k=k,
        sample_id=image.sample_id,
        domain_id=int(image.domain_id),
        label=int(image.label),
        pred=int(np.argmax(y_a)),
        prob_1=float(y_a[1]),
        source_pred=int(np.argmax(y_w)),
        source_prob_1=float(y_w[1]),
        loss=float(loss),
    )


def run_stream(
    state: AdaptState,
    manifest,
    dataset,
    checkpoint_path=None,
    track_descent: bool = False,
    on_image: Optional[Callable[[AdaptOutputs], None]] = None,
) -> PredictionLog:
    """Adapt over the stream in manifest order without resets.

    Images already processed by ``state`` (``state.k``) are skipped, which
    resumes a run from a fragment-boundary checkpoint.
    """
    items = _resolve(manifest, dataset)
    log = PredictionLog()
    bounds = set(np.cumsum([len(f) for f in manifest.fragments]).tolist())
    for k, image in enumerate(items):
        if k < state.k:
            continue
        out = state.adapt_image(image, track_descent=track_descent)
        log.append(_record(k, image, out.y_a, out.y_w, out.loss))
        if on_image is not None:
            on_image(out)
        if checkpoint_path is not None and state.k in bounds:
            state.save(checkpoint_path)
    return log


@torch.no_grad()
def _batched_probs(model, images, batch_size=256):
    model = model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(images), batch_size):
        p = to_patches(list(images[i : i + batch_size]), model.config.patch_size, dtype)
        out.append(torch.softmax(model(p).logits, -1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def baseline_source_only(model: TinyViT, manifest, dataset) -> PredictionLog:
    items = _resolve(manifest, dataset)
    probs = _batched_probs(model, items)
    return PredictionLog(_record(k, im, p, p, float("nan")) for k, (im, p) in enumerate(zip(items, probs)))


def entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, -1)
    return -(logp.exp() * logp).sum(-1).mean()


def baseline_entropy_min(model: TinyViT, manifest, dataset, lr: float = 1e-3) -> PredictionLog:
    """One entropy-minimization step per image on layer-norm affine parameters only."""
    items = _resolve(manifest, dataset)
    source = _batched_probs(model, items)
    adapted = copy.deepcopy(model).eval()
    for p in adapted.parameters():
        p.requires_grad_(False)
    params = adapted.layernorm_parameters()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    dtype = next(adapted.parameters()).dtype
    log = PredictionLog()
    for k, image in enumerate(items):
        patches = to_patches([image], adapted.config.patch_size, dtype)
        loss = entropy(adapted(patches).logits)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            y_a = torch.softmax(adapted(patches).logits, -1)[0].double().numpy()
        log.append(_record(k, image, y_a, source[k], float(loss.detach())))
    return log


def entropy_min_parameter_count(model: TinyViT) -> int:
    return sum(p.numel() for p in model.layernorm_parameters())
