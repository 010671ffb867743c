"""Synthetic corpus generator: faithfulness, long-tail shape, determinism."""

import collections

import numpy as np
import pytest

from casediag.corpus import NORMAL_CLASS
from casediag.errors import DataError
from casediag.synthetic import (
    SyntheticConfig,
    class_patterns,
    generate_synthetic,
)

import oracles


def test_label_histogram_monotone_non_increasing():
    cfg = SyntheticConfig(n_classes=8, n_cases=200, tail_exponent=1.0,
                          height=32, width=32, depth=4)
    corpus = generate_synthetic(cfg, seed=0)
    counts = collections.Counter()
    for case in corpus.cases:
        for d in case.disorder_labels - {NORMAL_CLASS}:
            counts[d] += 1
    ordered = [counts[c] for c in sorted(counts)]
    assert len(ordered) == 8
    assert all(a >= b for a, b in zip(ordered, ordered[1:]))


def test_template_matcher_recovers_labels_noise_free():
    cfg = SyntheticConfig(
        n_classes=6, n_cases=80, conjunction_classes=2, multi_scan_rate=0.6,
        noise_sigma=0.0, height=32, width=32, depth=4,
    )
    corpus = generate_synthetic(cfg, seed=1)
    patterns = list(class_patterns(cfg).values())
    predicted = oracles.match_planted_labels(
        corpus, patterns, cfg.background_level, cfg.pattern_intensity
    )
    for case in corpus.cases:
        want = set(case.disorder_labels) - {NORMAL_CLASS}
        assert predicted[case.case_id] == want, case.case_id


def test_regeneration_is_byte_identical(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    cfg = dict(n_classes=4, n_cases=30, height=32, width=32, depth=4)
    generate_synthetic(SyntheticConfig(out_dir=str(a_dir), **cfg), seed=7)
    generate_synthetic(SyntheticConfig(out_dir=str(b_dir), **cfg), seed=7)
    a_files = sorted(p.relative_to(a_dir) for p in a_dir.rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(b_dir) for p in b_dir.rglob("*") if p.is_file())
    assert a_files == b_files
    for rel in a_files:
        assert (a_dir / rel).read_bytes() == (b_dir / rel).read_bytes(), rel


def test_different_seed_changes_voxels(tmp_path):
    cfg = dict(n_classes=4, n_cases=12, height=32, width=32, depth=4)
    a = generate_synthetic(SyntheticConfig(**cfg), seed=0)
    b = generate_synthetic(SyntheticConfig(**cfg), seed=1)
    diff = any(
        not np.array_equal(sa.load(), sb.load())
        for ca, cb in zip(a.cases, b.cases)
        for sa, sb in zip(ca.scans, cb.scans)
    )
    assert diff


def test_conjunction_without_multi_scan_rejected():
    with pytest.raises(DataError):
        SyntheticConfig(n_classes=4, n_cases=40, conjunction_classes=1,
                        multi_scan_rate=0.0, height=32, width=32, depth=4)


def test_conjunction_cases_have_two_scans_and_split_components():
    cfg = SyntheticConfig(
        n_classes=5, n_cases=60, conjunction_classes=2, multi_scan_rate=0.5,
        noise_sigma=0.0, height=32, width=32, depth=4,
    )
    corpus = generate_synthetic(cfg, seed=3)
    patterns = class_patterns(cfg)
    conj_ids = [cid for cid, p in patterns.items() if p.conjunction]
    assert len(conj_ids) == 2

    def scan_has_component(scan, comp):
        arr = scan.load()
        slices = [arr] if arr.ndim == 2 else [arr[:, :, k] for k in range(arr.shape[2])]
        from casediag.synthetic import texture_mask
        mask = texture_mask(comp)
        want = np.clip(np.where(mask, cfg.pattern_intensity, cfg.background_level), 0, 1)
        return any(
            np.allclose(sl[comp.r0:comp.r1, comp.c0:comp.c1], want, atol=1e-6)
            for sl in slices
        )

    seen_positive = 0
    for case in corpus.cases:
        for cid in conj_ids:
            if cid in case.disorder_labels:
                seen_positive += 1
                assert len(case.scans) >= 2, case.case_id
                c0, c1 = patterns[cid].components
                in0 = [scan_has_component(s, c0) for s in case.scans]
                in1 = [scan_has_component(s, c1) for s in case.scans]
                # both components present, but never both in the same scan
                assert any(in0) and any(in1)
                assert not any(a and b for a, b in zip(in0, in1)), case.case_id
    assert seen_positive > 0


def test_normal_cases_are_patternless():
    cfg = SyntheticConfig(n_classes=4, n_cases=50, normal_rate=0.3,
                          noise_sigma=0.0, height=32, width=32, depth=4)
    corpus = generate_synthetic(cfg, seed=2)
    normals = [c for c in corpus.cases if NORMAL_CLASS in c.disorder_labels]
    assert normals
    for case in normals:
        assert case.disorder_labels == frozenset({NORMAL_CLASS})
        for scan in case.scans:
            arr = scan.load()
            assert np.allclose(arr, cfg.background_level, atol=1e-6)


def test_three_d_band_centered_on_key_slice():
    cfg = SyntheticConfig(n_classes=3, n_cases=40, volume_rate=1.0,
                          noise_sigma=0.0, multi_scan_rate=0.0,
                          height=32, width=32, depth=8)
    corpus = generate_synthetic(cfg, seed=5)
    patterns = class_patterns(cfg)
    checked = 0
    for case in corpus.cases:
        labels = case.disorder_labels - {NORMAL_CLASS}
        if not labels:
            continue
        comp = patterns[sorted(labels)[0]].components[0]
        scan = case.scans[0]
        arr = scan.load()
        planted = [
            k for k in range(arr.shape[2])
            if arr[:, :, k].max() >= cfg.pattern_intensity - 1e-6
        ]
        assert planted, case.case_id
        assert scan.key_slice is not None
        # the planted band contains or sits adjacent to the key slice
        assert min(planted) - 1 <= scan.key_slice <= max(planted) + 1
        checked += 1
    assert checked > 0


def test_family_sharing_reuses_textures():
    cfg = SyntheticConfig(n_classes=8, n_cases=40, n_families=4,
                          family_sharing=True, height=32, width=32, depth=4)
    patterns = class_patterns(cfg)
    by_family = collections.defaultdict(set)
    for p in patterns.values():
        for comp in p.components:
            by_family[p.family].add(comp.texture)
    # one texture per family, reused by all family members
    assert all(len(t) == 1 for t in by_family.values())
    regions = {
        (c.r0, c.r1, c.c0, c.c1) for p in patterns.values() for c in p.components
    }
    assert len(regions) == sum(len(p.components) for p in patterns.values())


def test_knowledge_base_written_with_corpus(tmp_path):
    cfg = SyntheticConfig(n_classes=4, n_cases=20, height=32, width=32, depth=4,
                          out_dir=str(tmp_path / "c"))
    generate_synthetic(cfg, seed=0)
    kb = (tmp_path / "c" / "knowledge_base.jsonl").read_text().strip().splitlines()
    import json
    records = [json.loads(line) for line in kb]
    ids = {r["class_id"] for r in records}
    assert {"d00", "d01", "d02", "d03", NORMAL_CLASS} <= ids
    named = [r for r in records if r["class_id"] == "d00"][0]
    assert named["synonyms"]
    assert named.get("description")
    assert (tmp_path / "c" / "icd_map.json").exists()
