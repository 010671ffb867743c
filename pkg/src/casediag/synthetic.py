"""Synthetic planted-signal corpus generator.

Each abnormal class is realized as a textured block at a class-specific grid
cell, planted into noisy scans; normal cases are pure background. Conjunction
classes split their evidence into two component patterns placed in two
different scans of the same case, so no single scan suffices for diagnosis.
Class frequencies follow a configurable power law, producing head/medium/tail
strata, and the generator also emits the knowledge-base and disorder->ICD
mapping files that mirror the corpus structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    ANATOMIES,
    NORMAL_CLASS,
    Case,
    Corpus,
    Scan,
    save_manifest,
    save_voxels,
)
from .errors import DataError, UsageError

TEXTURES = ("solid", "hstripes", "vstripes", "checker", "ring", "diag", "dots", "cross")

SCAN_MODALITIES = ("CT", "MRI", "X-ray", "Ultrasound")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    n_cases: int = 400
    tail_exponent: float = 1.0
    multi_scan_rate: float = 0.5
    conjunction_classes: int = 0
    conjunction_decoy_rate: float = 0.35
    normal_rate: float = 0.12
    extra_label_rate: float = 0.15
    n_families: int = 4
    family_sharing: bool = False
    height: int = 64
    width: int = 64
    depth: int = 8
    volume_rate: float = 0.5
    background_level: float = 0.15
    noise_sigma: float = 0.05
    pattern_intensity: float = 1.0
    out_dir: str | None = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise UsageError("n_classes must be >= 1")
        if self.n_cases < 1:
            raise UsageError("n_cases must be >= 1")
        if not 0 <= self.conjunction_classes <= self.n_classes:
            raise UsageError("conjunction_classes must be in [0, n_classes]")
        if self.n_families < 1 or self.n_families > self.n_classes:
            self.n_families = min(max(1, self.n_families), self.n_classes)
        expected_multi = int(round(self.multi_scan_rate * self.n_cases))
        if self.conjunction_classes > 0 and self.conjunction_classes > expected_multi:
            raise DataError(
                f"infeasible config: {self.conjunction_classes} conjunction classes "
                f"but only ~{expected_multi} multi-scan cases"
            )


@dataclass
class PatternComponent:
    """One textured block: rows [r0, r1) x cols [c0, c1), planted at `texture`."""

    r0: int
    r1: int
    c0: int
    c1: int
    texture: str


@dataclass
class ClassPattern:
    """The planted signature of one abnormal class.

    Non-conjunction classes have a single component that appears in every scan
    of a positive case; conjunction classes have two components that must land
    in two different scans.
    """

    class_id: str
    components: list[PatternComponent]
    conjunction: bool
    family: int


def class_ids(config):
    width = max(2, len(str(config.n_classes - 1)))
    return [f"d{k:0{width}d}" for k in range(config.n_classes)]


def family_of(config, k):
    return k % config.n_families


def class_patterns(config) -> dict[str, ClassPattern]:
    """Deterministic pattern layout for a config; the oracle for faithfulness tests."""
    ids = class_ids(config)
    n_conj = config.conjunction_classes
    slots_needed = (config.n_classes - n_conj) + 2 * n_conj
    grid = 1
    while grid * grid < slots_needed:
        grid += 1
    cell_h = config.height // grid
    cell_w = config.width // grid
    if cell_h < 4 or cell_w < 4:
        raise UsageError(
            f"image {config.height}x{config.width} too small for {slots_needed} pattern slots"
        )

    def slot_region(slot, shrink):
        row, col = divmod(slot, grid)
        r0 = row * cell_h
        c0 = col * cell_w
        mh = min(max(1, int(cell_h * shrink / 2)), (cell_h - 2) // 2)
        mw = min(max(1, int(cell_w * shrink / 2)), (cell_w - 2) // 2)
        return r0 + mh, r0 + cell_h - mh, c0 + mw, c0 + cell_w - mw

    patterns = {}
    slot = 0
    for k, cid in enumerate(ids):
        fam = family_of(config, k)
        if config.family_sharing:
            texture = TEXTURES[fam % len(TEXTURES)]
            shrink = 0.2 + 0.25 * (k // config.n_families)
        else:
            texture = TEXTURES[k % len(TEXTURES)]
            shrink = 0.2
        conj = k < n_conj
        n_comp = 2 if conj else 1
        comps = []
        for _ in range(n_comp):
            r0, r1, c0, c1 = slot_region(slot, shrink)
            comps.append(PatternComponent(r0, r1, c0, c1, texture))
            slot += 1
        patterns[cid] = ClassPattern(class_id=cid, components=comps, conjunction=conj, family=fam)
    return patterns


def texture_mask(comp: PatternComponent):
    """Boolean mask of shape (r1-r0, c1-c0) for the component's texture."""
    h = comp.r1 - comp.r0
    w = comp.c1 - comp.c0
    rr, cc = np.mgrid[0:h, 0:w]
    t = comp.texture
    if t == "solid":
        m = np.ones((h, w), dtype=bool)
    elif t == "hstripes":
        m = (rr // 2) % 2 == 0
    elif t == "vstripes":
        m = (cc // 2) % 2 == 0
    elif t == "checker":
        m = ((rr // 2) + (cc // 2)) % 2 == 0
    elif t == "ring":
        b = max(1, min(h, w) // 4)
        m = (rr < b) | (rr >= h - b) | (cc < b) | (cc >= w - b)
    elif t == "diag":
        m = (rr + cc) % 6 < 3
    elif t == "dots":
        m = ((rr % 4) < 2) & ((cc % 4) < 2)
    else:  # cross
        bh = max(1, h // 3)
        bw = max(1, w // 3)
        m = (abs(rr - h // 2) <= bh // 2) | (abs(cc - w // 2) <= bw // 2)
    return m


def _plant(slice2d, comp, intensity):
    mask = texture_mask(comp)
    region = slice2d[comp.r0 : comp.r1, comp.c0 : comp.c1]
    region[mask] = intensity


def _pseudo_word(rng, n_syllables=2):
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(n_syllables)
    )


_POSITION_WORDS = ["upper", "middle", "lower"]


def _position_phrase(comp, height, width):
    row = min(2, 3 * (comp.r0 + comp.r1) // (2 * height))
    col = min(2, 3 * (comp.c0 + comp.c1) // (2 * width))
    horiz = ["left", "central", "right"][col]
    return f"{_POSITION_WORDS[row]} {horiz}"


def build_vocabulary(config, rng):
    """Names, synonyms, parents, and descriptions for every class.

    Classes in the same family share a root word (and, with family_sharing,
    a texture), so the knowledge base mirrors the visual structure.
    """
    ids = class_ids(config)
    patterns = class_patterns(config)
    family_words = []
    seen = set()
    while len(family_words) < config.n_families:
        w = _pseudo_word(rng, 3)
        if w not in seen:
            seen.add(w)
            family_words.append(w)
    variant_words = []
    while len(variant_words) < config.n_classes:
        w = _pseudo_word(rng, 2)
        if w not in seen:
            seen.add(w)
            variant_words.append(w)

    icd_codes = [f"c{f:02d}" for f in range(config.n_families)]
    entries = []
    icd_map = {}
    for k, cid in enumerate(ids):
        fam = family_of(config, k)
        root = family_words[fam]
        variant = variant_words[k]
        name = f"{root} {variant}"
        comp = patterns[cid].components[0]
        desc = (
            f"a {comp.texture} patterned focal region in the "
            f"{_position_phrase(comp, config.height, config.width)} zone"
        )
        if patterns[cid].conjunction:
            desc += " with a paired secondary focus on a companion scan"
        entries.append(
            {
                "class_id": cid,
                "name": name,
                "synonyms": [f"{variant} {root}", f"{root} {variant} lesion"],
                "parent_id": icd_codes[fam],
                "description": desc,
            }
        )
        icd_map[cid] = icd_codes[fam]
    for f, code in enumerate(icd_codes):
        entries.append(
            {
                "class_id": code,
                "name": f"{family_words[f]} group",
                "synonyms": [f"{family_words[f]} disorders"],
                "description": f"any disorder of the {family_words[f]} family",
            }
        )
    entries.append(
        {
            "class_id": NORMAL_CLASS,
            "name": "normal",
            "synonyms": ["no abnormality", "unremarkable study"],
            "description": "no focal pattern present on any scan",
        }
    )
    return entries, icd_map


def _allocate_counts(total, n_classes, exponent):
    """Largest-remainder quotas over power-law weights; monotone non-increasing."""
    weights = np.array([(k + 1.0) ** (-exponent) for k in range(n_classes)])
    raw = total * weights / weights.sum()
    sizes = np.floor(raw).astype(int)
    short = total - sizes.sum()
    order = sorted(range(n_classes), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return list(sizes)


def _deal_labels(config, rng):
    """Per-case label sets hitting exact per-class quotas.

    Tokens are dealt emptiest-case-first so every abnormal case ends with at
    least one label and per-class totals match the power-law allocation.
    """
    n_normal = int(round(config.normal_rate * config.n_cases))
    n_abnormal = config.n_cases - n_normal
    if n_abnormal < config.n_classes:
        raise DataError(
            f"too few abnormal cases ({n_abnormal}) for {config.n_classes} classes"
        )
    n_secondary = int(round(config.extra_label_rate * n_abnormal))
    quotas = _allocate_counts(n_abnormal + n_secondary, config.n_classes, config.tail_exponent)
    quotas = [min(q, n_abnormal) for q in quotas]
    ids = class_ids(config)

    label_sets = [set() for _ in range(n_abnormal)]
    for k, cid in enumerate(ids):
        eligible = [i for i in range(n_abnormal) if cid not in label_sets[i]]
        rng.shuffle(eligible)
        eligible.sort(key=lambda i: len(label_sets[i]))
        for i in eligible[: quotas[k]]:
            label_sets[i].add(cid)
    # Quota clamping can in principle leave a case empty; give it the most
    # frequent class so counts stay monotone non-increasing.
    for s in label_sets:
        if not s:
            s.add(ids[0])
    return label_sets, n_normal


def generate_synthetic(config: SyntheticConfig, seed: int) -> Corpus:
    """Generate the corpus; when config.out_dir is set, also write it to disk.

    Deterministic for a fixed (config, seed): regenerating produces
    byte-identical voxel files and an identical manifest.
    """
    rng = np.random.default_rng(seed)
    patterns = class_patterns(config)
    vocab, icd_map = build_vocabulary(config, rng)
    names = {e["class_id"]: e["name"] for e in vocab}
    label_sets, n_normal = _deal_labels(config, rng)
    conj_ids = [cid for cid, p in patterns.items() if p.conjunction]

    out_dir = Path(config.out_dir) if config.out_dir else None
    vox_dir = out_dir / "voxels" if out_dir else None

    cases = []
    n_total = len(label_sets) + n_normal
    id_width = max(3, len(str(n_total - 1)))
    all_labels = list(label_sets) + [None] * n_normal
    for idx, labels in enumerate(all_labels):
        case_id = f"case{idx:0{id_width}d}"
        is_normal = labels is None
        disorder_labels = {NORMAL_CLASS} if is_normal else set(labels)
        has_conj = bool(disorder_labels & set(conj_ids))
        two_scans = has_conj or rng.random() < config.multi_scan_rate

        # Decoys keep the conjunction task honest for per-scan pooling: a
        # fooled-rate draw appends one extra scan per conjunction class that
        # holds a single component alone, indistinguishable scan-by-scan from
        # a true component scan. Only cross-scan fusion can tell "one half
        # present" from "both halves present in different scans".
        decoys = []
        if conj_ids and not is_normal and not has_conj:
            if rng.random() < config.conjunction_decoy_rate:
                decoys = [
                    patterns[c].components[int(rng.integers(2))] for c in conj_ids
                ]

        n_scans = 2 if two_scans else 1
        scans = []
        for s in range(n_scans):
            comps = []
            for cid in sorted(disorder_labels - {NORMAL_CLASS}):
                pat = patterns[cid]
                if pat.conjunction:
                    comps.append(pat.components[s % 2])
                else:
                    comps.append(pat.components[0])
            scans.append(_make_scan(config, rng, case_id, s, comps, vox_dir))
        for j, comp in enumerate(decoys):
            scans.append(_make_scan(config, rng, case_id, n_scans + j, [comp], vox_dir))

        icd_labels = (
            frozenset({NORMAL_CLASS})
            if is_normal
            else frozenset(icd_map[d] for d in disorder_labels)
        )
        cases.append(
            Case(
                case_id=case_id,
                scans=scans,
                disorder_labels=frozenset(disorder_labels),
                icd_labels=icd_labels,
                anatomy=ANATOMIES[int(rng.integers(len(ANATOMIES)))],
            )
        )

    corpus = Corpus(cases=cases, root=out_dir, display_names=names)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_manifest(corpus, out_dir / "manifest.jsonl")
        with open(out_dir / "knowledge_base.jsonl", "w", encoding="utf-8") as f:
            for e in vocab:
                f.write(json.dumps(e) + "\n")
        (out_dir / "icd_map.json").write_text(json.dumps(icd_map, indent=1), encoding="utf-8")
    return corpus


def _make_scan(config, rng, case_id, s, comps, vox_dir):
    is_3d = rng.random() < config.volume_rate
    h, w, d = config.height, config.width, config.depth
    if is_3d:
        vol = config.background_level + config.noise_sigma * rng.standard_normal((h, w, d))
        key_slice = int(rng.integers(d // 3, 2 * d // 3 + 1)) if d >= 3 else d // 2
        band = max(1, d // 4)
        lo = max(0, key_slice - band // 2)
        hi = min(d, lo + max(1, band))
        for z in range(lo, hi):
            for comp in comps:
                _plant(vol[:, :, z], comp, config.pattern_intensity)
        vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
        arr, dims, key = vol, "3D", key_slice
    else:
        img = config.background_level + config.noise_sigma * rng.standard_normal((h, w))
        for comp in comps:
            _plant(img, comp, config.pattern_intensity)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        arr, dims, key = img, "2D", None

    modality = SCAN_MODALITIES[int(rng.integers(len(SCAN_MODALITIES)))]
    scan_id = f"{case_id}-s{s}"
    if vox_dir is not None:
        path = vox_dir / f"{scan_id}.npy"
        save_voxels(path, arr)
        return Scan(
            scan_id=scan_id, modality=modality, dims=dims, path=str(path), key_slice=key
        )
    return Scan(
        scan_id=scan_id, modality=modality, dims=dims, voxels=arr, key_slice=key
    )
