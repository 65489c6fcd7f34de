import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alc.metrics import dice
from alc.synthgen import (
    HQ, LQ, EmptyHQError, InvalidDimensionError, corrupt_label, generate, load_dataset,
    make_shapes_dataset, morph, save_dataset, split_hq_lq,
)


def dilate_by_enumeration(mask, r):
    """Pixel p is set iff some mask pixel lies within Euclidean distance r."""
    pts = np.argwhere(mask)
    out = np.zeros_like(mask, dtype=bool)
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if len(pts) and ((pts - (y, x)) ** 2).sum(1).min() <= r * r:
                out[y, x] = True
    return out


def erode_by_enumeration(mask, r):
    """Pixel p survives iff every offset within distance r lands inside the mask
    (off-grid counts as background)."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]
    for y in range(h):
        for x in range(w):
            out[y, x] = all(0 <= y + dy < h and 0 <= x + dx < w and mask[y + dy, x + dx] for dy, dx in offs)
    return out


def square(n=9, side=3, grid=None):
    grid = grid or n
    m = np.zeros((grid, grid), dtype=bool)
    a = (grid - side) // 2
    m[a:a + side, a:a + side] = True
    return m


def test_make_shapes_deterministic():
    a = make_shapes_dataset(7, 1, (32, 32), 2)
    b = make_shapes_dataset(7, 1, (32, 32), 2)
    assert a.samples[0].image.tobytes() == b.samples[0].image.tobytes()
    assert np.array_equal(a.samples[0].label, b.samples[0].label)


def test_make_shapes_ranges():
    d = make_shapes_dataset(7, 100, (32, 32), 2)
    for s in d.samples:
        assert set(np.unique(s.label)) <= {0, 1}
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.image.dtype == np.float32


def test_foreground_coverage_seed3():
    d = make_shapes_dataset(3, 10, (32, 32), 3)
    for s in d.samples:
        frac = (s.label > 0).mean()
        assert 0.01 <= frac <= 0.60


def test_small_grid_rejected():
    with pytest.raises(InvalidDimensionError):
        make_shapes_dataset(0, 1, (15, 32), 2)


def test_morph_radius_zero_identity():
    m = np.random.default_rng(0).random((12, 12)) > 0.5
    assert np.array_equal(morph(m, 0, "dilate"), m)
    assert np.array_equal(morph(m, 0, "erode"), m)


def test_morph_dilate_square_radius1():
    out = morph(square(), 1, "dilate")
    assert out.sum() == 21
    assert np.array_equal(out, dilate_by_enumeration(square(), 1))


def test_morph_erode_square_radius2_empties():
    assert morph(square(), 2, "erode").sum() == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 4))
def test_morph_matches_enumeration(seed, r):
    m = np.random.default_rng(seed).random((14, 14)) > 0.6
    assert np.array_equal(morph(m, r, "dilate"), dilate_by_enumeration(m, r))
    assert np.array_equal(morph(m, r, "erode"), erode_by_enumeration(m, r))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_dilation_grows_erosion_shrinks(seed, r):
    m = np.random.default_rng(seed).random((16, 16)) > 0.5
    assert np.all(morph(m, r, "dilate")[m])
    assert not np.any(morph(m, r, "erode")[~m])


def test_corrupt_radius_zero_identity():
    lab = make_shapes_dataset(1, 1, 32, 3).samples[0].label
    out = corrupt_label(lab, 0, 0, np.random.default_rng(0), 3)
    assert np.array_equal(out, lab)


def test_corrupt_changes_nonempty_label():
    d = make_shapes_dataset(2, 20, 32, 2)
    rng = np.random.default_rng(5)
    for s in d.samples:
        out = corrupt_label(s.label, 3, 15, rng, 2)
        assert dice(out == 1, s.label == 1) < 1.0


def test_corrupt_forced_dilate_square_area():
    lab = np.zeros((32, 32), dtype=np.uint8)
    lab[11:21, 11:21] = 1
    out = corrupt_label(lab, 3, 3, np.random.default_rng(0), 2, mode="dilate")
    expected = dilate_by_enumeration(lab == 1, 3)
    assert (lab == 1).sum() == 100
    assert (out == 1).sum() == expected.sum()
    assert np.array_equal(out == 1, expected)


def test_corrupt_is_seeded():
    lab = make_shapes_dataset(4, 1, 32, 3).samples[0].label
    a = corrupt_label(lab, 3, 15, np.random.default_rng(11), 3)
    b = corrupt_label(lab, 3, 15, np.random.default_rng(11), 3)
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_corrupt_never_invents_classes(seed, n_classes):
    lab = make_shapes_dataset(seed, 1, 32, n_classes).samples[0].label
    out = corrupt_label(lab, 1, 6, np.random.default_rng(seed), n_classes)
    assert set(np.unique(out)) <= set(np.unique(lab)) | {0}
    assert out.max() < n_classes


@pytest.mark.parametrize("ratio,n_hq", [(0.1, 10), (0.2, 20), (1.0, 100)])
def test_split_counts(ratio, n_hq):
    base = make_shapes_dataset(7, 100, 32, 2)
    d = split_hq_lq(base, ratio, (3, 15), np.random.default_rng(0))
    assert len(d.by_quality(HQ)) == n_hq
    assert len(d.by_quality(LQ)) == 100 - n_hq
    for s in d.samples:
        clean = d.clean_labels[s.id]
        if s.quality == HQ:
            assert np.array_equal(s.label, clean)
        else:
            assert not np.array_equal(s.label, clean)
    assert d.hq_ratio == pytest.approx(ratio)


def test_split_all_hq_untouched():
    base = make_shapes_dataset(7, 100, 32, 2)
    d = split_hq_lq(base, 1.0, (3, 15), np.random.default_rng(0))
    for a, b in zip(base.samples, d.samples):
        assert np.array_equal(a.label, b.label)


def test_split_empty_hq_error():
    base = make_shapes_dataset(7, 5, 32, 2)
    with pytest.raises(EmptyHQError):
        split_hq_lq(base, 0.1, (3, 15), np.random.default_rng(0))


def test_generate_bit_identical():
    a = generate(7, 30, 32, 2, 0.1, (3, 15))
    b = generate(7, 30, 32, 2, 0.1, (3, 15))
    assert a.fingerprint() == b.fingerprint()


def test_disk_roundtrip(tmp_path):
    d = generate(7, 12, 32, 3, 0.25, (3, 15))
    save_dataset(d, tmp_path / "ds")
    files = sorted(p.name for p in (tmp_path / "ds").iterdir())
    assert "manifest.json" in files and "s0000.img" in files and "s0000.clean" in files
    raw = (tmp_path / "ds" / "s0000.img").read_bytes()
    assert len(raw) == 32 * 32 * 4
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(32, 32), d.samples[0].image)
    e = load_dataset(tmp_path / "ds")
    assert e.fingerprint() == d.fingerprint()
    assert e.n_classes == 3
    for sid, lab in d.clean_labels.items():
        assert np.array_equal(e.clean_labels[sid], lab)
    assert e.meta["seed"] == 7
