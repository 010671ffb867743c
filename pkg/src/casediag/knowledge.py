"""Knowledge encoder: contrastive text pretraining and label-embedding export.

The text encoder is a small trainable model over hashed character trigrams
(no external weights): bucket embeddings are summed per text, passed through
an MLP, and L2-normalized. Pretraining pulls each class name toward its
synonyms, parent terms, and description while pushing away other classes'
texts of the same format. The exported per-class embedding matrix has
unit-norm rows ordered like the label space and provides rows for classes
never seen during visual training.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError, UsageError

RELATIONS = ("synonym", "hierarchy", "description")


@dataclass(frozen=True)
class KnowledgeTriple:
    anchor: str
    positive: str
    relation: str

    def __post_init__(self):
        if not self.positive:
            raise ValueError("triple positive text must be non-empty")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")


@dataclass
class KnowledgeConfig:
    embed_dim: int = 256
    n_buckets: int = 2048
    hidden_dim: int = 128
    temperature: float = 0.07
    n_negatives: int = 32
    paper_literal: bool = False
    epochs: int = 40
    lr: float = 1e-3


@dataclass
class KnowledgeEmbedding:
    """Per-class text embeddings: matrix (c, d) with unit rows, label-space order."""

    matrix: torch.Tensor
    classes: tuple


def trigram_buckets(text, n_buckets):
    s = f"#{text.strip().lower()}#"
    if len(s) < 3:
        s = s + "#" * (3 - len(s))
    return [zlib.crc32(s[i : i + 3].encode("utf-8")) % n_buckets for i in range(len(s) - 2)]


class TextEncoder(nn.Module):
    """Hashed-trigram bag -> MLP -> unit-norm embedding."""

    def __init__(self, cfg: KnowledgeConfig):
        super().__init__()
        self.cfg = cfg
        self.table = nn.Parameter(0.05 * torch.randn(cfg.n_buckets, cfg.hidden_dim))
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.embed_dim),
        )

    def forward(self, texts):
        dtype = self.table.dtype
        bags = []
        for text in texts:
            idx = torch.tensor(trigram_buckets(text, self.cfg.n_buckets), dtype=torch.long)
            bags.append(self.table[idx].sum(dim=0))
        h = self.mlp(torch.stack(bags).to(dtype))
        return nn.functional.normalize(h, dim=1, eps=1e-12)


def contrastive_loss(f_tar, f_pos, f_negs, temperature, paper_literal=False):
    """InfoNCE over one positive and n negatives.

    Default: -log( e^{s_pos/t} / (e^{s_pos/t} + sum_n e^{s_n/t}) ), strictly
    positive and bounded. With paper_literal the denominator keeps only the
    negatives, which is unbounded below; kept for fidelity experiments.
    """
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    tar = torch.as_tensor(f_tar)
    pos = torch.as_tensor(f_pos)
    negs = [torch.as_tensor(n) for n in f_negs]
    if not negs:
        raise UsageError("contrastive loss requires at least one negative")
    for v in [tar, pos, *negs]:
        if float(v.detach().norm()) == 0.0:
            raise UsageError("zero vector passed to contrastive loss")
    s_pos = (tar * pos).sum() / temperature
    s_negs = torch.stack([(tar * n).sum() / temperature for n in negs])
    if paper_literal:
        return torch.logsumexp(s_negs, dim=0) - s_pos
    return torch.logsumexp(torch.cat([s_pos.reshape(1), s_negs]), dim=0) - s_pos


def load_knowledge_base(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"knowledge base line {lineno}: {e}") from e
    return records


def kb_triples(records):
    """Expand knowledge-base records into (anchor, positive, relation) triples."""
    names = {r["class_id"]: r["name"] for r in records}
    triples = []
    for r in records:
        anchor = r["name"]
        for syn in r.get("synonyms", []):
            triples.append(KnowledgeTriple(anchor, syn, "synonym"))
        parent = r.get("parent_id")
        if parent and parent in names:
            triples.append(KnowledgeTriple(anchor, names[parent], "hierarchy"))
        desc = r.get("description")
        if desc:
            triples.append(KnowledgeTriple(anchor, desc, "description"))
    return triples


def pretrain_knowledge_encoder(triples, encoder: TextEncoder, config: KnowledgeConfig, seed=0):
    """Contrastive pretraining; negatives share the anchor's relation format.

    Trains the encoder in place and returns it. Anchors whose relation pool
    offers no negatives are skipped with a warning.
    """
    if not triples:
        raise UsageError("no knowledge triples to train on")
    if len({t.anchor for t in triples}) < 2:
        raise UsageError("pretraining requires at least 2 distinct anchors")
    by_relation = {}
    for t in triples:
        by_relation.setdefault(t.relation, []).append(t)

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=config.lr)
    warned = set()
    encoder.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(triples))
        for i in order:
            t = triples[int(i)]
            pool = [o.positive for o in by_relation[t.relation] if o.anchor != t.anchor]
            if not pool:
                if (t.anchor, t.relation) not in warned:
                    warned.add((t.anchor, t.relation))
                    warnings.warn(
                        f"anchor {t.anchor!r} has no {t.relation} negatives; skipped"
                    )
                continue
            k = min(config.n_negatives, len(pool))
            neg_idx = rng.choice(len(pool), size=k, replace=False)
            texts = [t.anchor, t.positive] + [pool[int(j)] for j in neg_idx]
            emb = encoder(texts)
            loss = contrastive_loss(
                emb[0], emb[1], list(emb[2:]), config.temperature, config.paper_literal
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
    encoder.eval()
    return encoder


def embed_labels(label_space, encoder: TextEncoder) -> KnowledgeEmbedding:
    """Encode each class's display name; rows ordered like the label space."""
    encoder.eval()
    names = [label_space.display_name(c) for c in label_space.classes]
    with torch.no_grad():
        matrix = encoder(names)
    return KnowledgeEmbedding(matrix=matrix.detach(), classes=tuple(label_space.classes))
