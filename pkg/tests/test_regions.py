import numpy as np
import pytest

from moveact.regions import (
    BinaryMask,
    BoundingBox,
    NoSourceRegionError,
    RegionError,
    RegionMasks,
    RegionParams,
    bbox_to_mask,
    build_region_masks,
    dilate,
    edge_ring,
    resample_mask,
    subtract_target,
    threshold_source_mask,
)


def mask_of(arr) -> BinaryMask:
    return BinaryMask(np.asarray(arr, dtype=np.uint8))


def brute_dilate(data: np.ndarray, kernel: int) -> np.ndarray:
    """Independent enumeration oracle for square-kernel dilation."""
    h, w = data.shape
    r = kernel // 2
    out = np.zeros_like(data)
    for i in range(h):
        for j in range(w):
            if data[i, j]:
                out[max(0, i - r):min(h, i + r + 1), max(0, j - r):min(w, j + r + 1)] = 1
    return out


class FakeHeatmap:
    def __init__(self, raw):
        self.raw = np.asarray(raw, dtype=np.float64)
        ptp = np.ptp(self.raw)
        self.data = np.zeros_like(self.raw) if ptp == 0 else (self.raw - self.raw.min()) / ptp


# ----------------------------------------------------------- bbox_to_mask

def test_full_image_box_is_all_ones():
    m = bbox_to_mask(BoundingBox(0, 0, 1, 1), (16, 16))
    assert m.data.all()


def test_half_box_matches_cell_center_oracle():
    m = bbox_to_mask(BoundingBox(0, 0, 0.5, 0.5), (16, 16))
    expected = np.zeros((16, 16), np.uint8)
    for i in range(16):
        for j in range(16):
            cy, cx = (i + 0.5) / 16, (j + 0.5) / 16
            if cx < 0.5 and cy < 0.5:
                expected[i, j] = 1
    assert (m.data == expected).all()
    assert m.count == 64  # exactly the top-left 8×8 block


def test_subcell_box_snaps_to_single_cell():
    m = bbox_to_mask(BoundingBox(0.30, 0.30, 0.31, 0.31), (8, 8))
    assert m.count == 1
    assert m.data[2, 2] == 1


def test_degenerate_box_rejected():
    with pytest.raises(RegionError):
        BoundingBox(0.5, 0.2, 0.5, 0.8)
    with pytest.raises(RegionError):
        BoundingBox(0.2, 0.9, 0.4, 0.1)


# ------------------------------------------------- threshold_source_mask

def test_threshold_binary_heatmap():
    raw = np.zeros((4, 4))
    raw[1, 1] = raw[2, 3] = 1.0
    m = threshold_source_mask(FakeHeatmap(raw), 0.5)
    assert (m.data == raw.astype(np.uint8)).all()


def test_threshold_uses_normalized_values():
    # raw in [0.1, 0.9]: normalized >= 0.3 means raw >= 0.1 + 0.3*0.8 = 0.34
    raw = np.linspace(0.1, 0.9, 16).reshape(4, 4)
    m = threshold_source_mask(FakeHeatmap(raw), 0.3)
    assert (m.data == (raw >= 0.34 - 1e-12).astype(np.uint8)).all()


def test_threshold_near_one_selects_argmax():
    rng = np.random.default_rng(0)
    raw = rng.random((8, 8))
    m = threshold_source_mask(FakeHeatmap(raw), 0.999)
    assert m.count == 1
    assert m.data[np.unravel_index(raw.argmax(), raw.shape)] == 1


def test_constant_heatmap_is_no_source_error():
    with pytest.raises(NoSourceRegionError):
        threshold_source_mask(FakeHeatmap(np.full((4, 4), 0.7)), 0.3)


def test_threshold_idempotent_on_binary_heatmap():
    raw = np.zeros((6, 6))
    raw[2:4, 2:4] = 1.0
    m1 = threshold_source_mask(FakeHeatmap(raw), 0.4)
    m2 = threshold_source_mask(FakeHeatmap(m1.data.astype(float)), 0.4)
    assert (m1.data == m2.data).all()


# --------------------------------------------------------- subtract_target

def test_subtract_disjoint_unchanged():
    src = mask_of([[1, 1, 0, 0]] * 4)
    tgt = mask_of([[0, 0, 1, 1]] * 4)
    assert (subtract_target(src, tgt).data == src.data).all()


def test_subtract_containment_gives_empty():
    src = mask_of([[0, 1, 0], [0, 1, 0], [0, 0, 0]])
    tgt = mask_of([[1, 1, 1], [1, 1, 1], [0, 0, 0]])
    assert subtract_target(src, tgt).count == 0


def test_subtract_three_cell_overlap():
    src = np.zeros((4, 4), np.uint8)
    src[0, :] = 1  # 4 cells
    tgt = np.zeros((4, 4), np.uint8)
    tgt[0, :3] = 1  # overlaps 3 of them
    out = subtract_target(mask_of(src), mask_of(tgt))
    expected = np.zeros((4, 4), np.uint8)
    expected[0, 3] = 1
    assert (out.data == expected).all()


# ------------------------------------------------------------------ dilate

def test_dilate_center_pixel():
    data = np.zeros((5, 5), np.uint8)
    data[2, 2] = 1
    out = dilate(mask_of(data), 3)
    assert (out.data == brute_dilate(data, 3)).all()
    assert out.count == 9


def test_dilate_all_ones_fixed_point():
    data = np.ones((6, 6), np.uint8)
    assert (dilate(mask_of(data), 3).data == data).all()


def test_dilate_two_distant_pixels_stay_disjoint_blocks():
    data = np.zeros((9, 9), np.uint8)
    data[4, 1] = data[4, 5] = 1  # distance 4, kernel 3 -> no merge
    out = dilate(mask_of(data), 3)
    assert (out.data == brute_dilate(data, 3)).all()
    assert out.count == 18


@pytest.mark.parametrize("kernel", [2, 1, 0, 4])
def test_dilate_rejects_bad_kernels(kernel):
    with pytest.raises(RegionError):
        dilate(mask_of(np.ones((3, 3))), kernel)


# --------------------------------------------------------------- edge_ring

def test_edge_ring_of_center_pixel():
    data = np.zeros((5, 5), np.uint8)
    data[2, 2] = 1
    ring = edge_ring(mask_of(data), 3)
    assert ring.count == 8
    assert ring.data[2, 2] == 0


def test_edge_ring_clipped_at_border():
    data = np.zeros((6, 6), np.uint8)
    data[0, 0] = 1
    ring = edge_ring(mask_of(data), 3)
    expected = brute_dilate(data, 3) & ~data
    assert (ring.data == expected).all()
    assert ring.count == 3


def test_edge_ring_full_grid_errors():
    with pytest.raises(RegionError):
        edge_ring(mask_of(np.ones((4, 4))), 3)


# ------------------------------------------------------ build_region_masks

def test_build_region_masks_disjoint_and_partition():
    raw = np.zeros((8, 8))
    raw[0:3, 0:3] = 1.0  # object top-left
    masks = build_region_masks(FakeHeatmap(raw), BoundingBox(0.6, 0.6, 1.0, 1.0), RegionParams())
    t, s, e, b = (m.as_bool() for m in (masks.target, masks.source, masks.edge, masks.background))
    assert not (t & s).any() and not (t & e).any() and not (s & e).any()
    assert (b == ~(s | t)).all()
    assert ((b.astype(int) + s.astype(int) + t.astype(int)) == 1).all()


def test_build_region_masks_edit_in_place():
    raw = np.zeros((8, 8))
    raw[2:4, 2:4] = 1.0
    # box covering the thresholded source region exactly
    masks = build_region_masks(FakeHeatmap(raw), BoundingBox(0.25, 0.25, 0.5, 0.5), RegionParams())
    assert masks.source.count == 0
    assert masks.edge.count == 0
    assert (masks.background.data == 1 - masks.target.data).all()


def test_region_masks_invariants_enforced():
    ones = mask_of(np.ones((4, 4)))
    zeros = mask_of(np.zeros((4, 4)))
    with pytest.raises(RegionError):
        RegionMasks(target=ones, source=ones, edge=zeros, background=zeros)


# ------------------------------------------------------------ resample_mask

def test_resample_identity():
    rng = np.random.default_rng(1)
    m = mask_of((rng.random((16, 16)) > 0.5).astype(np.uint8))
    assert (resample_mask(m, (16, 16)).data == m.data).all()


def test_resample_single_pixel_upscale():
    data = np.zeros((16, 16), np.uint8)
    data[3, 5] = 1
    up = resample_mask(mask_of(data), (32, 32))
    assert up.count == 4
    assert up.data[6:8, 10:12].all()


def test_resample_round_trip_identity_over_random_masks():
    rng = np.random.default_rng(2)
    for _ in range(100):
        data = (rng.random((16, 16)) > rng.random()).astype(np.uint8)
        m = mask_of(data)
        back = resample_mask(resample_mask(m, (32, 32)), (16, 16))
        assert (back.data == data).all()


# -------------------------------------------------------------- properties

def test_dilation_monotonicity_randomized():
    rng = np.random.default_rng(3)
    for _ in range(200):
        data = (rng.random((10, 10)) > 0.75).astype(np.uint8)
        m = mask_of(data)
        d3 = dilate(m, 3)
        d5 = dilate(m, 5)
        assert (d3.data >= m.data).all()
        assert (d5.data >= d3.data).all()


def test_partition_property_randomized():
    rng = np.random.default_rng(4)
    built = 0
    while built < 200:
        raw = rng.random((8, 8))
        box = sorted(rng.random(2)), sorted(rng.random(2))
        (x0, x1), (y0, y1) = box
        if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
            continue
        try:
            masks = build_region_masks(FakeHeatmap(raw), BoundingBox(x0, y0, x1, y1), RegionParams())
        except RegionError:
            continue
        total = masks.background.data + masks.source.data + masks.target.data
        assert (total == 1).all()
        assert not (masks.edge.as_bool() & masks.source.as_bool()).any()
        assert not (masks.edge.as_bool() & masks.target.as_bool()).any()
        built += 1
