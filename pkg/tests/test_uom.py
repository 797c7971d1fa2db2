import math

import numpy as np
import pytest
import torch

from f2tta.errors import ParameterError
from f2tta.prompts import INVARIANT, SPECIFIC, PrefixPrompt
from f2tta.uom import (
    UncertaintySelection,
    estimate_uncertainty,
    kept_positions,
    masked_consistency_loss,
    n_selected,
    pseudo_label_loss,
    select,
    select_tokens,
    soft_cross_entropy,
    token_uncertainty,
)
from f2tta.vit import TinyViT, ViTConfig


def _patches(config, seed=0):
    return torch.rand(1, config.n_tokens, config.patch_size**2 * 3, generator=torch.Generator().manual_seed(seed))


def test_uncertainty_hand_example():
    pooled = np.array([[1.0], [3.0]])
    np.testing.assert_allclose(token_uncertainty(pooled), [1.0])


def test_dropout_off_gives_zero_uncertainty(tiny_config):
    cfg = ViTConfig(**{**tiny_config.__dict__, "dropout_rate": 0.0})
    torch.manual_seed(0)
    m = TinyViT(cfg).eval()
    u = estimate_uncertainty(m, _patches(cfg), D=10, seed=3)
    assert u.shape == (cfg.n_tokens,)
    assert np.all(u == 0)


def test_uncertainty_nonnegative_and_seeded(tiny_model, tiny_config):
    p = _patches(tiny_config)
    a = estimate_uncertainty(tiny_model, p, D=10, seed=5)
    b = estimate_uncertainty(tiny_model, p, D=10, seed=5)
    np.testing.assert_array_equal(a, b)
    assert np.all(a >= 0) and np.any(a > 0)
    final = estimate_uncertainty(tiny_model, p, D=10, seed=5, feature_layer="final")
    assert final.shape == a.shape


def test_too_few_passes(tiny_model, tiny_config):
    with pytest.raises(ParameterError):
        estimate_uncertainty(tiny_model, _patches(tiny_config), D=1)


def test_unknown_feature_layer(tiny_model, tiny_config):
    with pytest.raises(ParameterError):
        estimate_uncertainty(tiny_model, _patches(tiny_config), D=2, feature_layer="middle")


def test_selection_sizes_l10():
    scores = np.array([0.5, 0.9, 0.1, 0.7, 0.3, 0.8, 0.2, 0.6, 0.4, 0.05])
    u, r = select_tokens(scores, 0.3)
    assert list(u) == [2, 6, 4]
    assert list(r) == [10, 3, 7]


def test_equal_scores_tie_break():
    u, r = select_tokens(np.ones(10), 0.3)
    assert list(u) == [1, 2, 3]
    assert list(r) == [4, 5, 6]


def test_overlapping_sets_rejected():
    with pytest.raises(ParameterError):
        select_tokens(np.arange(3.0), 0.67)
    with pytest.raises(ParameterError):
        select_tokens(np.arange(3.0), 0.0)


@pytest.mark.parametrize("L,ratio,n", [(10, 0.3, 3), (16, 0.3, 4), (3, 0.1, 1), (100, 0.3, 30)])
def test_floor_rule(L, ratio, n):
    assert n_selected(L, ratio) == n


def test_kept_positions():
    assert kept_positions(5, [2, 4]).tolist() == [1, 3, 5]
    with pytest.raises(ParameterError):
        kept_positions(2, [1, 2])


def test_soft_ce_uniform_gives_two_ln2(tiny_config):
    torch.manual_seed(0)
    m = TinyViT(tiny_config).eval()
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    p = _patches(tiny_config)
    sel = select(m, p[0], D=4, ratio=0.3, seed=0)
    s = PrefixPrompt(SPECIFIC, torch.randn(8, 16))
    i = PrefixPrompt(INVARIANT, torch.randn(4, 16))
    out = masked_consistency_loss(m, s, i, p, sel)
    assert out.loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_soft_ce_one_hot_is_zero():
    logits = torch.tensor([[60.0, -60.0]])
    target = torch.tensor([[1.0, 0.0]])
    assert soft_cross_entropy(logits, target).item() == pytest.approx(0.0, abs=1e-12)


def _branch_setup(model, config, seed=0):
    p = _patches(config, seed)
    sel = select(model, p[0], D=6, ratio=0.3, seed=seed)
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(8, config.dim, generator=g).mul_(0.5).requires_grad_()
    i = torch.randn(4, config.dim, generator=g).mul_(0.5).requires_grad_()
    return p, sel, s, i


def test_gradients_reach_prompts_not_backbone(tiny_model, tiny_config):
    for prm in tiny_model.parameters():
        prm.requires_grad_(False)
    p, sel, s, i = _branch_setup(tiny_model, tiny_config)
    out = masked_consistency_loss(tiny_model, PrefixPrompt(SPECIFIC, s), PrefixPrompt(INVARIANT, i), p, sel)
    out.loss.backward()
    assert s.grad.abs().sum() > 0 and i.grad.abs().sum() > 0
    assert all(prm.grad is None for prm in tiny_model.parameters())
    assert out.loss.item() >= 0
    assert not out.y_w.requires_grad


def test_branch_inputs_drop_selected_tokens(tiny_model, tiny_config, monkeypatch):
    p, sel, s, i = _branch_setup(tiny_model, tiny_config)
    seen = []
    orig = TinyViT.forward

    def spy(self, patches, kept=None, **kw):
        seen.append(None if kept is None else kept.tolist())
        return orig(self, patches, kept=kept, **kw)

    monkeypatch.setattr(TinyViT, "forward", spy)
    masked_consistency_loss(tiny_model, PrefixPrompt(SPECIFIC, s), PrefixPrompt(INVARIANT, i), p, sel)
    # source pass on the full image, then the two masked branches
    assert seen[0] is None
    L = tiny_config.n_tokens
    assert len(seen[1]) == L - len(sel.uncertain_ids) and not set(seen[1]) & set(sel.uncertain_ids.tolist())
    assert len(seen[2]) == L - len(sel.reliable_ids) and not set(seen[2]) & set(sel.reliable_ids.tolist())


def test_hard_target_agreeing_prediction(tiny_model, tiny_config):
    p, sel, s, i = _branch_setup(tiny_model, tiny_config)
    sp, ip = PrefixPrompt(SPECIFIC, s), PrefixPrompt(INVARIANT, i)
    out = masked_consistency_loss(tiny_model, sp, ip, p, sel, target_mode="hard")
    cls = out.y_w.argmax(-1)
    expected = -torch.log_softmax(out.y_u, -1)[0, cls] - torch.log_softmax(out.y_r, -1)[0, cls]
    assert out.loss.item() == pytest.approx(expected.item(), rel=1e-6)
    with pytest.raises(ParameterError):
        masked_consistency_loss(tiny_model, sp, ip, p, sel, target_mode="fuzzy")


def test_pseudo_label_loss_uses_full_image(tiny_model, tiny_config):
    p, sel, s, i = _branch_setup(tiny_model, tiny_config)
    sp, ip = PrefixPrompt(SPECIFIC, s), PrefixPrompt(INVARIANT, i)
    out = pseudo_label_loss(tiny_model, sp, ip, p)
    from f2tta.prompts import attachments_for

    ref = tiny_model(p, attachments=attachments_for([sp], tiny_config.depth)).logits
    torch.testing.assert_close(out.y_u, ref)
    assert out.loss.item() >= 0


def test_selection_record_fields(tiny_model, tiny_config):
    sel = select(tiny_model, _patches(tiny_config)[0], D=4, ratio=0.25, seed=1)
    assert isinstance(sel, UncertaintySelection)
    assert len(sel.uncertain_ids) == len(sel.reliable_ids) == 4
    assert sel.D == 4 and sel.ratio == 0.25
