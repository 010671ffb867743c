"""Case/scan data model, manifest IO, label spaces, and train/val/test splitting.

A corpus is a list of cases. Each case holds one or more scans (2D images or
3D volumes) plus multi-label diagnoses at two granularities: fine-grained
disorder names and the coarser ICD codes they map into. Voxel data lives in
sidecar ``.npy`` files referenced from the manifest; scans load them lazily.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ManifestError, MissingAssetError, UsageError

log = logging.getLogger(__name__)

MODALITIES = (
    "CT",
    "MRI",
    "X-ray",
    "Ultrasound",
    "Fluoroscopy",
    "NuclearMedicine",
    "Mammography",
    "DSA",
    "BariumEnema",
)

ANATOMIES = (
    "HeadNeck",
    "Spine",
    "Chest",
    "Breast",
    "AbdomenPelvis",
    "UpperLimb",
    "LowerLimb",
)

NORMAL_CLASS = "normal"

# Strata by training-positive count: head >= 100, medium in [30, 100), tail < 30.
HEAD_MIN_COUNT = 100
MEDIUM_MIN_COUNT = 30

SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


def categorize(count, is_normal=False):
    """Head/medium/tail assignment for one class; the normal class is always head."""
    if is_normal:
        return "head"
    if count >= HEAD_MIN_COUNT:
        return "head"
    if count >= MEDIUM_MIN_COUNT:
        return "medium"
    return "tail"


def save_voxels(path, array):
    """Write a voxel array as float32 .npy (C-order, little-endian)."""
    array = np.asarray(array, dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, array)


def load_voxels(path):
    path = Path(path)
    if not path.exists():
        raise MissingAssetError(f"voxel file not found: {path}")
    arr = np.load(path)
    return np.asarray(arr, dtype=np.float32)


@dataclass
class Scan:
    """One 2D image or 3D volume; voxels come from a file or live in memory.

    2D voxel arrays have shape (H, W); 3D arrays have shape (H, W, D).
    key_slice is only meaningful for 3D scans and indexes the depth axis.
    """

    scan_id: str
    modality: str
    dims: str  # "2D" | "3D"
    path: str | None = None
    key_slice: int | None = None
    voxels: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r} (scan {self.scan_id})")
        if self.dims not in ("2D", "3D"):
            raise DataError(f"dims must be '2D' or '3D', got {self.dims!r}")
        if self.key_slice is not None and self.dims != "3D":
            raise DataError(f"key_slice only valid for 3D scans (scan {self.scan_id})")

    def load(self):
        """Return the voxel array, reading the sidecar file on first use."""
        if self.voxels is not None:
            return self.voxels
        if self.path is None:
            raise DataError(f"scan {self.scan_id} has neither voxels nor a path")
        arr = load_voxels(self.path)
        self._check_array(arr)
        return arr

    def _check_array(self, arr):
        want_rank = 2 if self.dims == "2D" else 3
        if arr.ndim != want_rank:
            raise DataError(
                f"scan {self.scan_id}: voxel rank {arr.ndim} does not match dims {self.dims}"
            )
        if self.key_slice is not None:
            depth = arr.shape[2]
            if not 0 <= self.key_slice < depth:
                raise DataError(
                    f"scan {self.scan_id}: key_slice {self.key_slice} out of range for depth {depth}"
                )


@dataclass
class Case:
    """A patient record: 1..S scans plus label sets at both granularities."""

    case_id: str
    scans: list[Scan]
    disorder_labels: frozenset[str]
    icd_labels: frozenset[str]
    anatomy: str | None = None
    split: str | None = None

    def __post_init__(self):
        if not self.scans:
            raise DataError(f"case {self.case_id} has no scans")
        if not self.disorder_labels:
            raise DataError(f"case {self.case_id} has an empty disorder label set")
        self.disorder_labels = frozenset(self.disorder_labels)
        self.icd_labels = frozenset(self.icd_labels)
        if self.anatomy is not None and self.anatomy not in ANATOMIES:
            raise DataError(f"case {self.case_id}: unknown anatomy {self.anatomy!r}")
        if self.split is not None and self.split not in SPLIT_NAMES:
            raise DataError(f"case {self.case_id}: unknown split {self.split!r}")

    def labels(self, level):
        if level == "disorder":
            return self.disorder_labels
        if level == "icd":
            return self.icd_labels
        raise UsageError(f"level must be 'disorder' or 'icd', got {level!r}")


@dataclass
class LabelSpace:
    """Ordered class universe at one granularity, with counts and strata.

    Counts are positive-case counts over the training portion only; the
    category per class follows the head/medium/tail thresholds, except that
    the normal class is always head. Classes absent from training keep a row
    (count 0, tail) so the knowledge classifier can still embed them.
    """

    level: str
    classes: list[str]
    names: dict[str, str]
    counts: dict[str, int]
    category: dict[str, str]

    def __post_init__(self):
        if self.level not in ("disorder", "icd"):
            raise UsageError(f"level must be 'disorder' or 'icd', got {self.level!r}")

    def __len__(self):
        return len(self.classes)

    def index(self, class_id):
        return self.classes.index(class_id)

    def display_name(self, class_id):
        return self.names.get(class_id, class_id)

    def members(self, stratum):
        """Class ids in one stratum ('head' | 'medium' | 'tail')."""
        return [c for c in self.classes if self.category[c] == stratum]

    def label_vector(self, case: Case):
        """Multi-hot {0,1}^c vector for one case, in class order."""
        labels = case.labels(self.level)
        return np.array([1.0 if c in labels else 0.0 for c in self.classes], dtype=np.float64)

    def to_dict(self):
        return {
            "level": self.level,
            "classes": list(self.classes),
            "names": dict(self.names),
            "counts": dict(self.counts),
            "category": dict(self.category),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            level=d["level"],
            classes=list(d["classes"]),
            names=dict(d["names"]),
            counts={k: int(v) for k, v in d["counts"].items()},
            category=dict(d["category"]),
        )


@dataclass
class SplitAssignment:
    """case_id -> train/val/test bucket; a pure function of (case ids, seed)."""

    assignment: dict[str, str]
    seed: int

    def bucket(self, case_id):
        return self.assignment[case_id]

    def cases_in(self, corpus: "Corpus", bucket):
        return [c for c in corpus.cases if self.assignment[c.case_id] == bucket]

    def to_dict(self):
        return {"seed": self.seed, "assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, d):
        return cls(assignment=dict(d["assignment"]), seed=int(d["seed"]))


@dataclass
class Corpus:
    """Immutable after load; safe to share across workers."""

    cases: list[Case]
    root: Path | None = None
    display_names: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.cases)

    def case_ids(self):
        return [c.case_id for c in self.cases]

    def get(self, case_id):
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


def load_manifest(path, mapping_path=None, check_assets=True):
    """Parse a JSONL manifest into a Corpus.

    Each line is one case record with fields case_id, scans[], disorders[],
    icd[], and optional anatomy/split. Scan paths are resolved relative to
    the manifest's directory. When a disorder->ICD mapping file is given,
    cases without explicit icd labels get them derived from it; disorders
    missing from the mapping produce a warning, never a crash.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    mapping = load_icd_mapping(mapping_path) if mapping_path else None

    cases = []
    seen_ids = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid JSON ({e.msg})", line=lineno) from e
        try:
            case = _case_from_record(rec, root, mapping)
        except DataError as e:
            raise ManifestError(str(e), line=lineno) from e
        if case.case_id in seen_ids:
            raise ManifestError(f"duplicate case_id {case.case_id!r}", line=lineno)
        seen_ids.add(case.case_id)
        cases.append(case)

    if check_assets:
        for case in cases:
            for scan in case.scans:
                if scan.path is not None and not Path(scan.path).exists():
                    raise MissingAssetError(
                        f"case {case.case_id}, scan {scan.scan_id}: voxel file missing: {scan.path}"
                    )

    display_names = {}
    names_path = root / "class_names.json"
    if names_path.exists():
        display_names = json.loads(names_path.read_text(encoding="utf-8"))
    return Corpus(cases=cases, root=root, display_names=display_names)


def _case_from_record(rec, root, mapping):
    for key in ("case_id", "scans", "disorders", "icd"):
        if key not in rec:
            raise DataError(f"missing field {key!r}")
    scans = []
    for s in rec["scans"]:
        for key in ("scan_id", "modality", "dims", "path"):
            if key not in s:
                raise DataError(f"scan record missing field {key!r}")
        scans.append(
            Scan(
                scan_id=s["scan_id"],
                modality=s["modality"],
                dims=s["dims"],
                path=str(root / s["path"]),
                key_slice=s.get("key_slice"),
            )
        )
    disorders = frozenset(rec["disorders"])
    icd = frozenset(rec["icd"])
    if not icd and mapping is not None:
        icd = derive_icd(disorders, mapping, case_id=rec["case_id"])
    return Case(
        case_id=rec["case_id"],
        scans=scans,
        disorder_labels=disorders,
        icd_labels=icd,
        anatomy=rec.get("anatomy"),
        split=rec.get("split"),
    )


def save_manifest(corpus, path):
    """Write a corpus back out as JSONL.

    Scan paths under the manifest's directory are stored relative to it,
    paths elsewhere stay absolute, and in-memory voxel arrays are
    materialized into a voxels/ directory beside the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent

    def scan_path(s):
        if s.path is None:
            target = root / "voxels" / f"{s.scan_id}.npy"
            save_voxels(target, s.load())
            return str(target.relative_to(root))
        p = Path(s.path)
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p.resolve())

    lines = []
    for case in corpus.cases:
        scans = []
        for s in case.scans:
            rec = {
                "scan_id": s.scan_id,
                "modality": s.modality,
                "dims": s.dims,
                "path": scan_path(s),
            }
            if s.key_slice is not None:
                rec["key_slice"] = int(s.key_slice)
            scans.append(rec)
        entry = {
            "case_id": case.case_id,
            "scans": scans,
            "disorders": sorted(case.disorder_labels),
            "icd": sorted(case.icd_labels),
        }
        if case.anatomy is not None:
            entry["anatomy"] = case.anatomy
        if case.split is not None:
            entry["split"] = case.split
        lines.append(json.dumps(entry))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if corpus.display_names:
        (root / "class_names.json").write_text(
            json.dumps(corpus.display_names, indent=1), encoding="utf-8"
        )


def load_icd_mapping(path):
    """Static disorder -> ICD code lookup, stored as a JSON object."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"ICD mapping file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def derive_icd(disorders, mapping, case_id=""):
    if disorders == {NORMAL_CLASS}:
        return frozenset({NORMAL_CLASS})
    codes = set()
    unmapped = []
    for d in disorders:
        if d == NORMAL_CLASS:
            codes.add(NORMAL_CLASS)
        elif d in mapping:
            codes.add(mapping[d])
        else:
            unmapped.append(d)
    if unmapped:
        log.warning("case %s: no ICD mapping for disorders %s", case_id, sorted(unmapped))
    return frozenset(codes)


def build_label_space(corpus, level, splits=None, display_names=None):
    """Build the class universe at one level with training-portion counts.

    The class list is the union of labels over the whole corpus (so test-only
    tail classes keep a row), ordered by descending training count with the
    class id as tie-break. Counts use only cases assigned to 'train'; with no
    split assignment every case counts.
    """
    if level not in ("disorder", "icd"):
        raise UsageError(f"level must be 'disorder' or 'icd', got {level!r}")
    if not corpus.cases:
        raise DataError("cannot build a label space from an empty corpus")

    all_classes = set()
    counts: dict[str, int] = {}
    for case in corpus.cases:
        labels = case.labels(level)
        all_classes.update(labels)
        in_train = True
        if splits is not None:
            in_train = splits.bucket(case.case_id) == "train"
        if in_train:
            for lab in labels:
                counts[lab] = counts.get(lab, 0) + 1

    classes = sorted(all_classes, key=lambda c: (-counts.get(c, 0), c))
    names = dict(display_names or corpus.display_names or {})
    return LabelSpace(
        level=level,
        classes=classes,
        names={c: names.get(c, c) for c in classes},
        counts={c: counts.get(c, 0) for c in classes},
        category={c: categorize(counts.get(c, 0), is_normal=(c == NORMAL_CLASS)) for c in classes},
    )


def split_corpus(corpus, seed):
    """Assign cases to train/val/test in a 7:1:2 ratio, deterministically.

    Bucket sizes come from largest-remainder rounding of the fractions. A
    repair pass then guarantees that any class reaching medium/head training
    counts also has at least one test positive (when its total count permits),
    mirroring the guarantee that head and medium classes appear on both sides.
    Tail classes may remain exclusive to one side.
    """
    n = len(corpus.cases)
    if n < 10:
        raise DataError(f"corpus too small to split: {n} cases (need >= 10)")

    ids = sorted(corpus.case_ids())
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ids)))
    shuffled = [ids[i] for i in order]

    sizes = _largest_remainder(n, SPLIT_FRACTIONS)
    assignment = {}
    start = 0
    for bucket, size in zip(SPLIT_NAMES, sizes):
        for cid in shuffled[start : start + size]:
            assignment[cid] = bucket
        start += size

    splits = SplitAssignment(assignment=assignment, seed=seed)
    _repair_split(corpus, splits, rng)
    return splits


def _largest_remainder(n, fractions):
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    short = n - sum(sizes)
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in remainders[:short]:
        sizes[i] += 1
    return sizes


def _repair_split(corpus, splits, rng):
    # Only classes that end up medium/head can violate the both-sides rule,
    # and only by having every positive land in train.
    for level in ("disorder", "icd"):
        by_class: dict[str, list[Case]] = {}
        for case in corpus.cases:
            for lab in case.labels(level):
                by_class.setdefault(lab, []).append(case)
        for lab, members in sorted(by_class.items()):
            train_members = [c for c in members if splits.assignment[c.case_id] == "train"]
            test_members = [c for c in members if splits.assignment[c.case_id] == "test"]
            if len(train_members) < MEDIUM_MIN_COUNT or test_members or len(members) < 2:
                continue
            # Swap one member into test against a test case that can spare it.
            mover = train_members[int(rng.integers(len(train_members)))]
            candidates = [
                c for c in splits.cases_in(corpus, "test") if not (c.labels(level) & {lab})
            ]
            if not candidates:
                continue
            swap = candidates[int(rng.integers(len(candidates)))]
            splits.assignment[mover.case_id] = "test"
            splits.assignment[swap.case_id] = "train"


def apply_manifest_splits(corpus):
    """SplitAssignment from pre-assigned split fields; None if any is missing."""
    if any(c.split is None for c in corpus.cases):
        return None
    return SplitAssignment(
        assignment={c.case_id: c.split for c in corpus.cases}, seed=-1
    )


def subsample_cases(cases, fraction, seed):
    """Seed-stable selection of round(fraction * n) cases, at least one."""
    if not 0 < fraction <= 1.0:
        raise UsageError(f"fraction must be in (0, 1], got {fraction}")
    ids = sorted(c.case_id for c in cases)
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(ids))))
    chosen = set(ids[i] for i in rng.permutation(len(ids))[:k])
    return [c for c in cases if c.case_id in chosen]


def substitute_scan(case, scan_index, new_scan):
    """Copy of a case with one scan replaced (cases stay immutable)."""
    scans = list(case.scans)
    scans[scan_index] = new_scan
    return replace(case, scans=scans)
