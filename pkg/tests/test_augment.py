from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import wasserstein_distance

from octdenoise.augment import (
    APPLY_ORDER, PAIRS, AugmentationSpec, ElasticSpec, OcclusionSpec, apply_recipe, elastic_deform,
    expand_dataset, hflip, occlude, occlusion_patches, read_metadata, rotate, variant_recipe,
    variant_seeds,
)
from octdenoise.image_core import BScan, ScanMeta, load_bscan, read_manifest
from octdenoise.phantom import NoiseSpec, PhantomConfig, add_noise, generate_phantom

images = arrays(np.float32, st.tuples(st.integers(16, 40), st.integers(16, 40)),
                elements=st.floats(0, 1, width=32, allow_subnormal=False))


def _smooth(height=496, width=384, seed=0):
    return generate_phantom(PhantomConfig(height=height, width=width, texture_sigma=0.0, seed=seed))[0]


@settings(max_examples=30, deadline=None)
@given(images)
def test_hflip_is_an_involution(px):
    scan = BScan(px)
    assert np.array_equal(hflip(hflip(scan)).pixels, scan.pixels)
    np.testing.assert_array_equal(hflip(scan).pixels.mean(axis=0), scan.pixels.mean(axis=0)[::-1])


def test_hflip_moves_pixel_to_mirror_column():
    px = np.zeros((16, 20), np.float32)
    px[3, 4] = 1
    assert hflip(BScan(px)).pixels[3, 15] == 1


@settings(max_examples=30, deadline=None)
@given(images, st.integers(0, 2 ** 31))
def test_zero_parameter_identities(px, seed):
    scan = BScan(px)
    assert np.array_equal(rotate(scan, 0).pixels, scan.pixels)
    assert np.array_equal(elastic_deform(scan, ElasticSpec(16, 0.0), seed).pixels, scan.pixels)
    assert np.array_equal(occlude(scan, OcclusionSpec(count=0), seed).pixels, scan.pixels)


@pytest.mark.parametrize("degrees", [-45, -10, 7.5, 30])
def test_center_is_a_fixed_point(degrees):
    px = np.zeros((33, 41), np.float32)
    px[16, 20] = 1
    assert rotate(BScan(px), degrees).pixels[16, 20] == pytest.approx(1.0)


def test_positive_rotation_is_counter_clockwise():
    px = np.zeros((33, 33), np.float32)
    px[16, 26] = 1
    out = rotate(BScan(px), 45).pixels
    r, c = np.unravel_index(out.argmax(), out.shape)
    assert r < 16 and c > 16


def test_rotation_limit():
    with pytest.raises(ValueError):
        rotate(BScan(np.zeros((16, 16))), 50)
    with pytest.raises(ValueError):
        AugmentationSpec(rotation_degrees=-46)


@pytest.mark.parametrize("shape", [(496, 384), (128, 128)])
def test_rotation_round_trip(shape):
    scan = _smooth(*shape)
    back = rotate(rotate(scan, 10), -10).pixels.astype(np.float64)
    # compare only where both rotations sampled inside the image
    ones = BScan(np.ones(shape, np.float32))
    valid = rotate(rotate(ones, 10), -10).pixels > 1 - 1e-6
    assert np.mean(np.abs(back - scan.pixels)[valid]) < 0.02


def test_elastic_is_deterministic():
    scan = _smooth(64, 64)
    a = elastic_deform(scan, ElasticSpec(), 5)
    b = elastic_deform(scan, ElasticSpec(), 5)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.pixels.tobytes() != elastic_deform(scan, ElasticSpec(), 6).pixels.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_elastic_preserves_histogram(seed):
    scan = _smooth(seed=seed)
    out = elastic_deform(scan, ElasticSpec(32, 4.0), seed)
    assert wasserstein_distance(scan.pixels.ravel(), out.pixels.ravel()) < 0.01


@settings(max_examples=30, deadline=None)
@given(images, st.integers(0, 2 ** 31), st.integers(1, 6))
def test_occlusion_changes_exactly_the_patch_union(px, seed, count):
    scan = BScan(px)
    params = OcclusionSpec(count=count, patch_height=8, patch_width=5)
    out = occlude(scan, params, seed).pixels
    assert np.all(out <= scan.pixels)
    support = np.zeros(px.shape, bool)
    for top, left, _ in occlusion_patches(px.shape, params, seed):
        assert 0 <= top <= px.shape[0] - 8 and 0 <= left <= px.shape[1] - 5
        support[top:top + 8, left:left + 5] = True
    assert np.array_equal(out != scan.pixels, support & (scan.pixels != 0))


def test_single_patch_is_a_60_by_20_rectangle():
    scan = BScan(np.full((128, 96), 0.5, np.float32))
    out = occlude(scan, OcclusionSpec(count=1), 4).pixels
    rows, cols = np.nonzero(out != scan.pixels)
    assert len(rows) == 60 * 20
    assert rows.max() - rows.min() == 59 and cols.max() - cols.min() == 19


def test_recipe_schedule():
    seeds = variant_seeds(0, "S01_left_000", 0)
    assert variant_recipe(0, seeds) == ()
    singles = [variant_recipe(k, seeds)[0] for k in range(1, 6)]
    assert singles == ["occlusion", "elastic", "rotate_ccw", "rotate_cw", "hflip"]
    for slot in range(6, 40):
        recipe = variant_recipe(slot, variant_seeds(0, "S01_left_000", slot))
        assert len(recipe) == 2
        assert set(recipe) in [set(p) for p in PAIRS]
        assert list(recipe) == [t for t in APPLY_ORDER if t in recipe]


# -- expansion --------------------------------------------------------------

def _inputs(n, size=48):
    out = []
    for i in range(n):
        scan, labels = generate_phantom(PhantomConfig(height=size, width=size, seed=i))
        meta = ScanMeta(subject_id=f"S{i // 2:02d}", eye="left", scan_index=i % 2, kind="clean")
        out.append((BScan(scan.pixels, meta), labels))
    return out


SPEC = AugmentationSpec(occlusion=OcclusionSpec(patch_height=12, patch_width=6), elastic=ElasticSpec(16, 2.0))


def test_expand_counts_and_manifest(tmp_path):
    pairs = _inputs(5)
    noise = NoiseSpec(sigma=0.4)
    manifest = expand_dataset([s for s, _ in pairs], SPEC, noise, tmp_path, factor=4,
                              splits=["train", "train", "train", "test", "test"],
                              label_maps=[l for _, l in pairs])
    assert len(manifest.entries) == 20
    assert len(list(tmp_path.glob("*.clean.octf"))) == 20
    assert len(list(tmp_path.glob("*.noisy.octf"))) == 20
    assert len(list(tmp_path.glob("*.labels.pgm"))) == 5
    assert manifest.counts() == {"train": 12, "test": 8}
    for e in manifest.entries:
        clean = load_bscan(tmp_path / e.clean_path).pixels
        noisy = load_bscan(tmp_path / e.noisy_path).pixels
        assert clean.shape == noisy.shape == (48, 48)
        assert np.mean(clean != noisy) > 0.5


def test_factor_one_is_originals_plus_noise(tmp_path):
    (scan, _), = _inputs(1)
    noise = NoiseSpec(sigma=0.1)
    manifest = expand_dataset([scan], SPEC, noise, tmp_path, factor=1)
    e, = manifest.entries
    assert np.array_equal(load_bscan(tmp_path / e.clean_path).pixels, scan.pixels)
    rec, = read_metadata(tmp_path / "augment_metadata.txt")
    assert rec.transforms == "original"
    assert np.array_equal(load_bscan(tmp_path / e.noisy_path).pixels,
                          add_noise(scan, rec.noise).pixels)


def test_noisy_pairs_reproduce_from_metadata(tmp_path):
    scans = [s for s, _ in _inputs(3)]
    expand_dataset(scans, SPEC, NoiseSpec(sigma=0.3), tmp_path, factor=8)
    records = read_metadata(tmp_path / "augment_metadata.txt")
    assert len(records) == 24
    for rec in records:
        clean = load_bscan(tmp_path / rec.clean)
        stored = load_bscan(tmp_path / rec.noisy).pixels
        assert stored.tobytes() == add_noise(clean, rec.noise).pixels.tobytes()


def test_variants_reproduce_from_seeds(tmp_path):
    scans = [s for s, _ in _inputs(2)]
    expand_dataset(scans, SPEC, NoiseSpec(sigma=0.3), tmp_path, factor=10)
    for scan in scans:
        sid = f"{scan.meta.subject_id}_{scan.meta.eye}_{scan.meta.scan_index:03d}"
        for slot in range(10):
            seeds = variant_seeds(SPEC.seed, sid, slot)
            want = apply_recipe(scan, variant_recipe(slot, seeds), SPEC, seeds).pixels
            got = load_bscan(tmp_path / f"{sid}_v{slot:02d}.clean.octf").pixels
            assert got.tobytes() == want.tobytes()


def test_parallel_expansion_matches_serial(tmp_path):
    scans = [s for s, _ in _inputs(3)]
    expand_dataset(scans, SPEC, NoiseSpec(sigma=0.3), tmp_path / "a", factor=3, jobs=1)
    expand_dataset(scans, SPEC, NoiseSpec(sigma=0.3), tmp_path / "b", factor=3, jobs=2)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_per_scan_factor(tmp_path):
    scans = [s for s, _ in _inputs(2)]
    manifest = expand_dataset(scans, replace(SPEC, seed=2), NoiseSpec(sigma=0.2), tmp_path, factor=[3, 1])
    assert len(manifest.entries) == 4
    with pytest.raises(ValueError):
        expand_dataset(scans, SPEC, NoiseSpec(), tmp_path, factor=[3])


def test_patch_must_fit():
    with pytest.raises(ValueError):
        occlusion_patches((32, 32), OcclusionSpec(count=1), 0)
