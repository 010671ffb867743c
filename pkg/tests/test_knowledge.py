"""Text encoder, contrastive loss, and knowledge-base pretraining."""

import json
import math

import numpy as np
import pytest
import torch

from casediag.corpus import LabelSpace
from casediag.errors import UsageError
from casediag.knowledge import (
    KnowledgeConfig,
    KnowledgeTriple,
    TextEncoder,
    contrastive_loss,
    embed_labels,
    kb_triples,
    load_knowledge_base,
    pretrain_knowledge_encoder,
    trigram_buckets,
)


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm()


# ---------------------------------------------------------------- loss values

def test_loss_frozen_aligned_positive_orthogonal_negative():
    tar = torch.tensor([1.0, 0.0], dtype=torch.float64)
    loss = contrastive_loss(tar, tar.clone(), [torch.tensor([0.0, 1.0], dtype=torch.float64)],
                            temperature=1.0)
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)


def test_loss_frozen_symmetric_case():
    tar = unit([1.0, 1.0])
    other = unit([1.0, 0.0])
    # same dot with positive and negative -> log 2 regardless of the value
    loss = contrastive_loss(tar, other, [other.clone()], temperature=1.0)
    assert float(loss) == pytest.approx(math.log(2), abs=1e-9)


def test_loss_paper_literal_form():
    tar = torch.tensor([1.0, 0.0], dtype=torch.float64)
    loss = contrastive_loss(tar, tar.clone(), [torch.tensor([0.0, 1.0], dtype=torch.float64)],
                            temperature=1.0, paper_literal=True)
    assert float(loss) == pytest.approx(-1.0, abs=1e-9)


def test_loss_positive_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(20):
        tar = unit(rng.standard_normal(8))
        negs = [unit(rng.standard_normal(8)) for _ in range(4)]
        pos_a = unit(tar + 0.1 * torch.as_tensor(rng.standard_normal(8)))
        la = contrastive_loss(tar, pos_a, negs, temperature=0.07)
        assert float(la) > 0
        # moving the positive exactly onto the target strictly lowers the loss
        lb = contrastive_loss(tar, tar.clone(), negs, temperature=0.07)
        if float((tar * pos_a).sum()) < 1.0 - 1e-9:
            assert float(lb) < float(la)


def test_loss_input_validation():
    tar = torch.tensor([1.0, 0.0])
    with pytest.raises(UsageError):
        contrastive_loss(tar, tar, [], temperature=1.0)
    with pytest.raises(UsageError):
        contrastive_loss(tar, tar, [tar], temperature=0.0)
    with pytest.raises(UsageError):
        contrastive_loss(tar, torch.zeros(2), [tar], temperature=1.0)


def test_loss_gradcheck():
    tar = unit(np.random.default_rng(1).standard_normal(6)).detach().requires_grad_(True)
    pos = unit(np.random.default_rng(2).standard_normal(6))
    negs = [unit(np.random.default_rng(3 + i).standard_normal(6)) for i in range(3)]

    def f(t):
        return contrastive_loss(t, pos, negs, temperature=0.5)

    assert torch.autograd.gradcheck(f, (tar,), eps=1e-6, atol=1e-8, rtol=1e-4)


# ---------------------------------------------------------------- text encoder

def test_trigram_buckets_deterministic():
    a = trigram_buckets("pneumonia", 128)
    b = trigram_buckets("pneumonia", 128)
    np.testing.assert_array_equal(a, b)
    c = trigram_buckets("pneumonix", 128)
    assert not np.array_equal(a, c)


def test_encoder_rows_unit_norm():
    enc = TextEncoder(KnowledgeConfig(embed_dim=16, n_buckets=64, hidden_dim=16))
    out = enc(["alpha", "beta", "alpha"])
    assert out.shape == (3, 16)
    np.testing.assert_allclose(out.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)
    # same text, same row
    np.testing.assert_allclose(out[0].detach().numpy(), out[2].detach().numpy(), atol=1e-7)


# ---------------------------------------------------------------- kb plumbing

KB = [
    {"class_id": "d0", "name": "burafo", "synonyms": ["burafo disease"],
     "parent_id": "p0", "description": "a ring pattern upper left"},
    {"class_id": "d1", "name": "kelimo", "synonyms": ["kelimo disorder"],
     "parent_id": "p0", "description": "a solid pattern lower right"},
    {"class_id": "p0", "name": "pattern group", "synonyms": []},
]


def test_load_knowledge_base_and_triples(tmp_path):
    p = tmp_path / "kb.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in KB) + "\n")
    records = load_knowledge_base(p)
    assert [r["class_id"] for r in records] == ["d0", "d1", "p0"]
    triples = kb_triples(records)
    relations = {t.relation for t in triples}
    assert relations == {"synonym", "hierarchy", "description"}
    syn = [t for t in triples if t.relation == "synonym"]
    assert any(t.anchor == "burafo" and t.positive == "burafo disease" for t in syn)
    hier = [t for t in triples if t.relation == "hierarchy"]
    assert any("pattern group" in (t.anchor, t.positive) for t in hier)


def test_triple_validation():
    with pytest.raises(Exception):
        KnowledgeTriple(anchor="a", positive="", relation="synonym")
    with pytest.raises(Exception):
        KnowledgeTriple(anchor="a", positive="b", relation="sibling")


# ---------------------------------------------------------------- pretraining

def vocabulary_triples(n_terms=10):
    """Small synthetic vocabulary: each term has two synonyms built from a
    shared stem, so the encoder can learn stem identity."""
    terms = [f"stem{chr(97 + i)}" for i in range(n_terms)]
    triples = []
    for t in terms:
        triples.append(KnowledgeTriple(anchor=t, positive=f"{t} syndrome", relation="synonym"))
        triples.append(KnowledgeTriple(anchor=t, positive=f"{t} condition", relation="synonym"))
    return terms, triples


def test_pretrain_improves_synonym_margin():
    torch.manual_seed(0)
    cfg = KnowledgeConfig(embed_dim=32, n_buckets=256, hidden_dim=32,
                          epochs=60, n_negatives=8, lr=1e-2)
    enc = TextEncoder(cfg)
    terms, triples = vocabulary_triples()
    pretrain_knowledge_encoder(triples, enc, cfg, seed=0)
    # held-out synonym phrasing: anchor closer to own synonym than to others'
    with torch.no_grad():
        anchors = enc(terms)
        held_out = enc([f"{t} illness" for t in terms])
    sims = anchors @ held_out.T
    own = sims.diag()
    others = sims - torch.eye(len(terms)) * 10
    assert float((own > others.max(dim=1).values).float().mean()) >= 0.8


def test_pretrain_requires_multiple_anchors():
    cfg = KnowledgeConfig(embed_dim=8, n_buckets=32, hidden_dim=8, epochs=1)
    enc = TextEncoder(cfg)
    with pytest.raises(UsageError):
        pretrain_knowledge_encoder([], enc, cfg, seed=0)
    with pytest.raises(UsageError):
        pretrain_knowledge_encoder(
            [KnowledgeTriple("a", "a syn", "synonym")], enc, cfg, seed=0
        )


def test_pretrain_skips_anchor_without_same_relation_negatives():
    # the only description triple has no same-format negative pool
    cfg = KnowledgeConfig(embed_dim=8, n_buckets=32, hidden_dim=8, epochs=2,
                          n_negatives=2)
    enc = TextEncoder(cfg)
    triples = [
        KnowledgeTriple("a", "a syn", "synonym"),
        KnowledgeTriple("b", "b syn", "synonym"),
        KnowledgeTriple("a", "lonely description text", "description"),
    ]
    with pytest.warns(UserWarning, match="description"):
        pretrain_knowledge_encoder(triples, enc, cfg, seed=0)


# ---------------------------------------------------------------- embed_labels

def label_space(classes, names=None):
    return LabelSpace(
        level="disorder",
        classes=list(classes),
        names=names or {c: c for c in classes},
        counts={c: 0 for c in classes},
        category={c: "tail" for c in classes},
    )


def test_embed_labels_shape_order_and_unit_rows():
    enc = TextEncoder(KnowledgeConfig(embed_dim=16, n_buckets=64, hidden_dim=16))
    space = label_space(["x", "y", "z"])
    emb = embed_labels(space, enc)
    assert emb.matrix.shape == (3, 16)
    assert list(emb.classes) == ["x", "y", "z"]
    np.testing.assert_allclose(emb.matrix.norm(dim=1).numpy(), 1.0, atol=1e-6)


def test_embed_labels_identical_names_identical_rows():
    enc = TextEncoder(KnowledgeConfig(embed_dim=16, n_buckets=64, hidden_dim=16))
    space = label_space(["a", "b"], names={"a": "same text", "b": "same text"})
    emb = embed_labels(space, enc)
    np.testing.assert_allclose(emb.matrix[0].numpy(), emb.matrix[1].numpy(), atol=1e-7)


def test_embed_labels_covers_unseen_classes():
    enc = TextEncoder(KnowledgeConfig(embed_dim=16, n_buckets=64, hidden_dim=16))
    space = label_space(["seen", "test_only_tail_class"])
    emb = embed_labels(space, enc)
    assert emb.matrix.shape[0] == 2
    assert float(emb.matrix[1].norm()) == pytest.approx(1.0, abs=1e-6)
