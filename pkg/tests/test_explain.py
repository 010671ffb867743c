"""Score-CAM saliency maps."""

import numpy as np
import pytest
import torch

from conftest import TINY, tiny_encoder_cfg
from casediag.corpus import Scan, build_label_space
from casediag.errors import DataError, UsageError
from casediag.explain import score_cam
from casediag.fusion import FusionConfig
from casediag.model import build_model

TINY_FUSION = FusionConfig(embed_dim=32, n_layers=1, n_heads=2)


def make_model(variant, n_classes):
    torch.manual_seed(0)
    return build_model(tiny_encoder_cfg(variant), n_classes, fusion_cfg=TINY_FUSION)


@pytest.fixture(scope="module")
def space(small_corpus, small_splits):
    return build_label_space(small_corpus, "disorder", small_splits)


def first_case_with_3d(corpus):
    for case in corpus.cases:
        for i, s in enumerate(case.scans):
            if s.dims == "3D":
                return case, i
    raise AssertionError("corpus has no 3D scan")


def test_vit_variant_rejected(small_corpus, space):
    model = make_model("vit", len(space.classes))
    case = small_corpus.cases[0]
    with pytest.raises(UsageError):
        score_cam(model, case, space, space.classes[0], geometry=TINY)


def test_unknown_target_class_rejected(small_corpus, space):
    model = make_model("resnet", len(space.classes))
    with pytest.raises(DataError):
        score_cam(model, small_corpus.cases[0], space, "no_such_class", geometry=TINY)


def test_bad_scan_index_rejected(small_corpus, space):
    model = make_model("resnet", len(space.classes))
    case = small_corpus.cases[0]
    with pytest.raises(DataError):
        score_cam(model, case, space, space.classes[0], geometry=TINY,
                  scan_index=len(case.scans))


def test_resnet_saliency_shape_and_range(small_corpus, space):
    model = make_model("resnet", len(space.classes))
    case = small_corpus.cases[0]
    sal = score_cam(model, case, space, space.classes[0], geometry=TINY)
    assert sal.values.shape == (TINY.height, TINY.width)
    assert sal.values.dtype == np.float32
    assert float(sal.values.min()) >= 0.0
    peak = float(sal.values.max())
    assert peak == pytest.approx(1.0) or peak == 0.0
    assert sal.case_id == case.case_id
    assert sal.scan_id == case.scans[0].scan_id
    assert sal.target_class == space.classes[0]


def test_mix_saliency_on_3d_scan(small_corpus, space):
    model = make_model("resnet_vit_mix", len(space.classes))
    case, idx = first_case_with_3d(small_corpus)
    sal = score_cam(model, case, space, space.classes[0], geometry=TINY,
                    scan_index=idx, slice_index=1)
    assert sal.values.shape == (TINY.height, TINY.width)
    assert sal.slice_index == 1
    with pytest.raises(DataError):
        score_cam(model, case, space, space.classes[0], geometry=TINY,
                  scan_index=idx, slice_index=TINY.depth)


def test_mix_default_slice_is_the_key_slice(small_corpus, space):
    model = make_model("resnet_vit_mix", len(space.classes))
    case, idx = first_case_with_3d(small_corpus)
    sal = score_cam(model, case, space, space.classes[0], geometry=TINY, scan_index=idx)
    # canonical key-slice index after depth resampling
    assert sal.slice_index is not None
    assert 0 <= sal.slice_index < TINY.depth


def test_constant_scan_yields_empty_map(space):
    model = make_model("resnet", len(space.classes))
    flat = np.full((32, 32), 0.5, dtype=np.float32)
    from casediag.corpus import Case

    case = Case(
        case_id="flat_case",
        scans=[Scan(scan_id="flat_scan", modality="CT", dims="2D", voxels=flat)],
        disorder_labels=frozenset({space.classes[0]}),
        icd_labels=frozenset(),
    )
    sal = score_cam(model, case, space, space.classes[0], geometry=TINY)
    assert np.all(sal.values == 0.0)
