"""
Tests for manifests, group plans, regular shapes and gather/scatter
"""

import json

import numpy as np
import pytest

from errors import InfeasibleConfigError, InvalidInputError
from grouping import (WeightManifest, build_group_plan, bundled_manifest_path, gather, load_manifest,
                      regular_dims, scatter)
from tensor_core import element_count


def test_regular_dims_spot_values():
    assert regular_dims(589824, 2) == (768, 768)
    assert regular_dims(14155776, 2) == (3456, 4096)
    assert regular_dims(14155776, 3) == (216, 256, 256)
    assert regular_dims(565248, 5) == (6, 23, 16, 16, 16)


def test_regular_dims_bounds():
    for n in (1, 7, 97, 1000, 4099, 123457):
        for order in (1, 2, 3, 4):
            dims = regular_dims(n, order)
            assert len(dims) == order
            assert n <= element_count(dims) < 2 * n
            if order > 1:
                assert max(dims) <= 4 * min(dims)


def test_regular_dims_prime_pads_up():
    dims = regular_dims(97, 2)
    assert element_count(dims) > 97


def test_manifest_validation():
    with pytest.raises(InvalidInputError):
        WeightManifest([("a", (2, 2)), ("a", (3, 3))])
    with pytest.raises(InvalidInputError):
        WeightManifest([("a", (2, 2, 2))])
    with pytest.raises(InvalidInputError):
        WeightManifest.from_list([{"name": "a", "shape": [2, 2], "dtype": "f8"}])


def test_manifest_file_round_trip(tmp_path):
    manifest = WeightManifest([("l0.q", (4, 3)), ("l0.v", (4, 3))])
    path = str(tmp_path / "m.json")
    manifest.save(path)
    assert load_manifest(path).entries == manifest.entries
    assert manifest.offsets() == [0, 12, 24]


def test_bundled_manifests_have_published_totals():
    vit = load_manifest(bundled_manifest_path("vit_base_qv"))
    assert len(vit) == 24 and vit.total_elements == 24 * 768 * 768
    unet = load_manifest(bundled_manifest_path("unet_qv"))
    assert len(unet) == 42 and unet.total_elements == 565248
    widths = [shape[0] for _, shape in unet.entries]
    assert widths.count(64) == 10 and widths.count(128) == 32


def test_weight_wise_plan_aligns_with_weights():
    manifest = WeightManifest([("a", (2, 3)), ("b", (4, 3))])
    plan = build_group_plan(manifest, 2, 2, reshape=False, rho=1.0, mode="weight-wise")
    assert [(g.start, g.end) for g in plan.groups] == [(0, 6), (6, 18)]
    assert [g.target_shape for g in plan.groups] == [(2, 3), (4, 3)]
    with pytest.raises(InvalidInputError):
        build_group_plan(manifest, 1, 2, reshape=False, rho=1.0, mode="weight-wise")


def test_group_wise_ranges_are_near_equal():
    manifest = WeightManifest([("a", (3, 3)), ("b", (2, 2))])
    plan = build_group_plan(manifest, 3, 1, reshape=True, rho=1.0)
    assert [g.length for g in plan.groups] == [5, 4, 4]
    assert plan.groups[-1].end == 13


def test_projection_ratio_sets_lora_elements():
    manifest = WeightManifest([("a", (2, 2)), ("b", (2, 2))])
    plan = build_group_plan(manifest, 1, 2, reshape=True, rho=0.5)
    group = plan.groups[0]
    assert group.lora_elements == 4
    assert group.target_shape == (2, 2)
    # round half up
    odd = build_group_plan(WeightManifest([("a", (1, 5))]), 1, 1, reshape=True, rho=0.5)
    assert odd.groups[0].lora_elements == 3


def test_stacked_shape_without_reshape():
    manifest = WeightManifest([("a", (2, 3)), ("b", (4, 3))])
    plan = build_group_plan(manifest, 1, 2, reshape=False, rho=1.0)
    assert plan.groups[0].target_shape == (6, 3)


def test_non_reshaped_plan_infeasible_cases():
    manifest = WeightManifest([("a", (2, 3)), ("b", (2, 2))])
    with pytest.raises(InfeasibleConfigError):
        build_group_plan(manifest, 1, 2, reshape=False, rho=1.0)
    with pytest.raises(InfeasibleConfigError):
        build_group_plan(manifest, 3, 1, reshape=False, rho=1.0)
    with pytest.raises(InfeasibleConfigError):
        build_group_plan(manifest, 2, 2, reshape=False, rho=0.5, mode="weight-wise")


def test_gather_then_scatter_index_by_index(rng):
    manifest = WeightManifest([("a", (2, 3)), ("b", (3, 2)), ("c", (1, 4))])
    deltas = {name: rng.standard_normal(shape) for name, shape in manifest.entries}
    flat = gather(manifest, deltas)
    assert flat[0] == deltas["a"][0, 0]
    assert flat[5] == deltas["a"][1, 2]
    assert flat[6] == deltas["b"][0, 0]
    assert flat[12] == deltas["c"][0, 0]
    plan = build_group_plan(manifest, 3, 2, reshape=True, rho=1.0)
    pieces = [flat[g.start:g.end] for g in plan.groups]
    back = scatter(pieces, plan, manifest)
    assert list(back) == ["a", "b", "c"]
    for name in deltas:
        assert back[name].tobytes() == deltas[name].tobytes()


def test_scatter_truncates_padded_group_tensors():
    manifest = WeightManifest([("a", (1, 5))])
    plan = build_group_plan(manifest, 1, 2, reshape=True, rho=1.0)
    assert plan.groups[0].target_shape == (2, 3)
    padded = np.arange(element_count(plan.groups[0].target_shape), dtype=np.float64)
    out = scatter([padded], plan, manifest)
    np.testing.assert_array_equal(out["a"], [[0.0, 1.0, 2.0, 3.0, 4.0]])


def test_gather_rejects_missing_or_misshaped():
    manifest = WeightManifest([("a", (2, 2))])
    with pytest.raises(InvalidInputError):
        gather(manifest, {})
    with pytest.raises(InvalidInputError):
        gather(manifest, {"a": np.zeros((2, 3))})


def test_manifest_json_shape(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps([{"name": "w", "shape": [3, 5]}]))
    manifest = load_manifest(str(path))
    assert manifest.shape_of("w") == (3, 5)


def test_regular_dims_random_sweep(rng):
    for _ in range(300):
        n = int(np.exp(rng.uniform(0.0, 26 * np.log(2))))
        order = int(rng.integers(2, 6))
        dims = regular_dims(n, order)
        p = element_count(dims)
        assert len(dims) == order
        assert n <= p < 2 * n, (n, order, dims)
        assert max(dims) <= 4 * min(dims), (n, order, dims)
