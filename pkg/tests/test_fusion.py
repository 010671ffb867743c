"""Transformer fusion and the parameter-free pooling baselines."""

import numpy as np
import pytest
import torch

from casediag.corpus import MODALITIES
from casediag.fusion import (
    FusionConfig,
    FusionModule,
    baseline_fuse,
    modality_index,
    truncate_scans,
)


def make_module(d=32, layers=1, heads=2, seed=0):
    torch.manual_seed(seed)
    return FusionModule(FusionConfig(embed_dim=d, n_layers=layers, n_heads=heads))


def test_output_shape_and_finiteness():
    fm = make_module()
    v = torch.randn(4, 32)
    m = torch.tensor([0, 1, 2, 3])
    out = fm(v, m)
    assert out.shape == (32,)
    assert torch.isfinite(out).all()


def test_single_scan_case_works():
    fm = make_module()
    out = fm(torch.randn(1, 32), torch.tensor([0]))
    assert out.shape == (32,)


def test_permutation_invariance():
    fm = make_module()
    fm.eval()
    v = torch.randn(5, 32)
    m = torch.tensor([0, 1, 2, 0, 4])
    base = fm(v, m).detach()
    for seed in range(5):
        perm = torch.randperm(5, generator=torch.Generator().manual_seed(seed))
        out = fm(v[perm], m[perm]).detach()
        torch.testing.assert_close(out, base, rtol=0, atol=1e-5)


def test_modality_embedding_changes_output():
    fm = make_module()
    v = torch.randn(2, 32)
    a = fm(v, torch.tensor([0, 1])).detach()
    b = fm(v, torch.tensor([0, 2])).detach()
    assert float((a - b).abs().max()) > 1e-6


def test_scan_cap_enforced():
    fm = make_module()
    v = torch.randn(31, 32)
    with pytest.raises(ValueError):
        fm(v, torch.zeros(31, dtype=torch.long))


def test_fusion_gradcheck():
    torch.manual_seed(0)
    fm = FusionModule(FusionConfig(embed_dim=16, n_layers=1, n_heads=2)).double()
    fm.eval()
    v = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
    m = torch.tensor([0, 3, 5])

    def f(x):
        return fm(x, m).sum()

    assert torch.autograd.gradcheck(f, (v,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_modality_index_total():
    for i, name in enumerate(MODALITIES):
        assert modality_index(name) == i


# ---------------------------------------------------------------- scan cap

def test_truncate_noop_under_cap():
    rng = np.random.default_rng(0)
    assert truncate_scans(list(range(5)), 30, True, rng) == list(range(5))


def test_truncate_eval_takes_head():
    rng = np.random.default_rng(0)
    assert truncate_scans(list(range(40)), 30, False, rng) == list(range(30))


def test_truncate_train_seeded_subsample():
    a = truncate_scans(list(range(40)), 30, True, np.random.default_rng(3))
    b = truncate_scans(list(range(40)), 30, True, np.random.default_rng(3))
    c = truncate_scans(list(range(40)), 30, True, np.random.default_rng(4))
    assert a == b
    assert len(a) == 30 and a == sorted(a)
    assert a != c


# ---------------------------------------------------------------- baselines

def test_baseline_max_and_mean():
    scores = [np.array([0.1, 0.9]), np.array([0.5, 0.2])]
    np.testing.assert_allclose(baseline_fuse(scores, "max"), [0.5, 0.9])
    np.testing.assert_allclose(baseline_fuse(scores, "mean"), [0.3, 0.55])


def test_baseline_max_dominates_mean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = [rng.random(6) for _ in range(4)]
        mx = baseline_fuse(scores, "max")
        mn = baseline_fuse(scores, "mean")
        assert np.all(mx >= mn - 1e-12)


def test_baseline_random_is_seeded_pick():
    scores = [np.array([0.1, 0.2]), np.array([0.3, 0.4]), np.array([0.5, 0.6])]
    a = baseline_fuse(scores, "random", seed=1)
    b = baseline_fuse(scores, "random", seed=1)
    np.testing.assert_array_equal(a, b)
    assert any(np.array_equal(a, s) for s in scores)


def test_baseline_rejects_unknown_mode():
    with pytest.raises(ValueError):
        baseline_fuse([np.array([0.1])], "median")
