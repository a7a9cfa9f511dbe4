import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import tiles
from plumebias.synthgen import GenConfig, generate_dataset
from plumebias.tiles import (
    Dataset, DuplicateIdError, InvalidMaskError, MalformedManifestError, ShapeMismatchError, Tile,
    compute_coverage, load_dataset, save_dataset, split_groups,
)


def _tile(mask, tid="a", c=1):
    mask = np.asarray(mask, bool)
    return Tile(tid, np.zeros((c,) + mask.shape, np.float32), mask)


def test_coverage_full_empty_quarter():
    assert compute_coverage(_tile(np.ones((32, 32)))) == 1.0
    assert compute_coverage(_tile(np.zeros((32, 32)))) == 0.0
    m = np.zeros(1024, bool)
    m[:256] = True
    assert compute_coverage(_tile(m.reshape(32, 32))) == 0.25


@given(tiles())
def test_coverage_bounds(t):
    cov = compute_coverage(t)
    assert 0.0 <= cov <= 1.0
    assert (cov == 1.0) == bool(t.mask.all())
    assert cov == t.mask.sum() / t.mask.size


def test_tile_rejects_bad_input():
    with pytest.raises(ShapeMismatchError):
        Tile("a", np.zeros((1, 4, 4)), np.ones((4, 5), bool))
    with pytest.raises(ValueError):
        Tile("a", np.full((1, 2, 2), np.nan), np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        Tile("a", np.zeros((1, 2, 2)), np.ones((2, 2), bool), lon=180.0)
    with pytest.raises(InvalidMaskError):
        Tile("a", np.zeros((1, 2, 2)), np.full((2, 2), 2))


def test_tile_arrays_are_read_only_copies():
    px = np.zeros((1, 2, 2), np.float32)
    t = Tile("a", px, np.ones((2, 2), bool))
    px[0, 0, 0] = 9
    assert t.pixels[0, 0, 0] == 0
    with pytest.raises(ValueError):
        t.pixels[0, 0, 0] = 1


def _cov_tile(cov, tid):
    m = np.zeros(100, bool)
    m[: int(round(cov * 100))] = True
    return _tile(m.reshape(10, 10), tid)


def test_split_groups_boundary_goes_high():
    ts = [_cov_tile(c, str(c)) for c in (0.2, 0.5, 0.9)]
    low, high = split_groups(ts, 0.5)
    assert [t.coverage for t in low] == [0.2]
    assert [t.coverage for t in high] == [0.5, 0.9]


def test_split_groups_all_full():
    low, high = split_groups([_cov_tile(1.0, str(i)) for i in range(3)], 0.5)
    assert low == [] and len(high) == 3


def test_split_groups_generated_counts():
    ds = generate_dataset(GenConfig(n_tiles=100, seed=2))
    low, high = split_groups(ds.tiles, 0.5)
    assert len(low) + len(high) == 100


def test_split_groups_rejects_threshold_outside_unit_interval():
    with pytest.raises(ValueError):
        split_groups([], 0.0)
    with pytest.raises(ValueError):
        split_groups([], 1.0)


@given(st.lists(tiles(size=st.just(4)), max_size=12), st.floats(0.01, 0.99))
def test_split_groups_partition(ts, threshold):
    low, high = split_groups(ts, threshold)
    assert len(low) + len(high) == len(ts)
    ids_low = {id(t) for t in low}
    ids_high = {id(t) for t in high}
    assert not ids_low & ids_high
    assert ids_low | ids_high == {id(t) for t in ts}
    assert all(t.coverage < threshold for t in low)
    assert all(t.coverage >= threshold for t in high)


def test_dataset_rejects_mixed_shapes_and_duplicates():
    with pytest.raises(ShapeMismatchError):
        Dataset.from_tiles([_tile(np.ones((2, 2)), "a"), _tile(np.ones((3, 3)), "b")])
    with pytest.raises(DuplicateIdError):
        Dataset.from_tiles([_tile(np.ones((2, 2)), "a"), _tile(np.ones((2, 2)), "a")])
    with pytest.raises(ValueError):
        Dataset((), 1, 2, 2, "holdout")


def test_roundtrip_empty(tmp_path):
    ds = Dataset((), 1, 32, 32, "test")
    back = load_dataset(save_dataset(ds, tmp_path / "e.tds"))
    assert back == ds and len(back) == 0


def test_roundtrip_generated_field_by_field(tmp_path):
    ds = generate_dataset(GenConfig(n_tiles=3, seed=7))
    back = load_dataset(save_dataset(ds, tmp_path / "g.tds"))
    assert back == ds
    for a, b in zip(ds.tiles, back.tiles):
        assert a.id == b.id and a.label == b.label and a.lat == b.lat and a.lon == b.lon
        assert a.pixels.dtype == b.pixels.dtype == np.float32
        assert a.pixels.tobytes() == b.pixels.tobytes()
        np.testing.assert_array_equal(a.mask, b.mask)
    assert back.attrs == ds.attrs


@given(st.lists(tiles(channels=st.just(2), size=st.just(5)), max_size=6, unique_by=lambda t: t.id),
       st.sampled_from(["train", "val", "test", "deploy"]))
def test_roundtrip_property(tmp_path_factory, ts, split):
    ds = Dataset(tuple(ts), 2, 5, 5, split)
    path = tmp_path_factory.mktemp("rt") / "d.tds"
    assert load_dataset(save_dataset(ds, path)) == ds


def test_save_is_byte_stable(tmp_path):
    ds = generate_dataset(GenConfig(n_tiles=4, seed=1))
    a, b = save_dataset(ds, tmp_path / "a"), save_dataset(ds, tmp_path / "b")
    for name in ("manifest.json", "payload.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_payload_layout_little_endian(tmp_path):
    px = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    t = Tile("x", px, np.array([[1, 0], [0, 1]], bool), 1)
    root = save_dataset(Dataset.from_tiles([t]), tmp_path / "l")
    raw = (root / "payload.bin").read_bytes()
    assert raw[:32] == px.astype("<f4").tobytes()
    assert raw[32:] == bytes([1, 0, 0, 1])


@pytest.fixture
def saved(tmp_path):
    ds = generate_dataset(GenConfig(n_tiles=2, seed=3, size=8))
    return save_dataset(ds, tmp_path / "s.tds")


def _edit_manifest(root, fn):
    m = json.loads((root / "manifest.json").read_text())
    fn(m)
    (root / "manifest.json").write_text(json.dumps(m))


def test_manifest_two_tiles_payload_one(saved):
    raw = (saved / "payload.bin").read_bytes()
    (saved / "payload.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ShapeMismatchError):
        load_dataset(saved)


def test_malformed_manifest(saved):
    (saved / "manifest.json").write_text("{not json")
    with pytest.raises(MalformedManifestError):
        load_dataset(saved)


def test_manifest_missing_key(saved):
    _edit_manifest(saved, lambda m: m.pop("channels"))
    with pytest.raises(MalformedManifestError):
        load_dataset(saved)


def test_manifest_duplicate_ids(saved):
    def dup(m):
        m["tiles"][1]["id"] = m["tiles"][0]["id"]
    _edit_manifest(saved, dup)
    with pytest.raises(DuplicateIdError):
        load_dataset(saved)


def test_bad_mask_byte(saved):
    raw = bytearray((saved / "payload.bin").read_bytes())
    raw[-1] = 7
    (saved / "payload.bin").write_bytes(bytes(raw))
    with pytest.raises(InvalidMaskError):
        load_dataset(saved)


def test_error_kinds_are_distinct():
    kinds = {MalformedManifestError, ShapeMismatchError, DuplicateIdError, InvalidMaskError}
    assert len(kinds) == 4
    assert all(issubclass(k, ValueError) for k in kinds)
