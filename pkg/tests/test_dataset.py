import hashlib
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_pair
from semcd.dataset import (
    MANIFEST_NAME,
    TileSpec,
    build_index,
    class_weights,
    class_weights_from_counts,
    imbalance_table,
    label_counts,
    split_pairs,
    tile,
    tile_origins,
)
from semcd.inference import stitch
from semcd.io import read_raster, write_raster
from semcd.raster import BINARY_CHANGE, L1, Nomenclature, change_pair_nomenclature, compare_lcms
from semcd.synth import generate_pair, synth_generate
from semcd.validation import ImagePair, check_image


# ------------------------------------------------------------------ validation


def test_image_pair_validation(rng):
    img = rng.random((8, 8, 3))
    lab = np.ones((8, 8), np.uint8)
    with pytest.raises(ValueError, match="lcm2.*'p7'|'p7'.*lcm2"):
        ImagePair(img, img, lab, np.ones((8, 9), np.uint8), None, pair_id="p7")
    with pytest.raises(ValueError):
        ImagePair(img, rng.random((8, 8, 4)))
    with pytest.raises(ValueError):
        ImagePair(img, img, np.full((8, 8), 9, np.uint8))
    bad = img.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_image(bad)
    assert check_image(np.zeros((4, 4))).shape == (4, 4, 1)


def test_scored_mask_and_swap(rng):
    p = make_pair(rng, 8)
    p.lcm1[0, 0] = 0
    assert not p.scored_mask()[0, 0] and p.scored_mask().sum() == 63
    s = p.swapped()
    assert np.array_equal(s.image1, p.image2) and np.array_equal(s.lcm1, p.lcm2)


# ------------------------------------------------------------------------- io


@pytest.mark.parametrize(
    "arr,suffix",
    [
        (np.arange(12, dtype=np.uint8).reshape(3, 4), ".png"),
        (np.arange(36, dtype=np.uint8).reshape(3, 4, 3), ".png"),
        (np.arange(12, dtype=np.uint16).reshape(3, 4) * 5000, ".png"),
        (np.random.default_rng(0).random((3, 4)).astype(np.float32), ".tif"),
    ],
)
def test_raster_round_trip(tmp_path, arr, suffix):
    path = tmp_path / f"r{suffix}"
    write_raster(path, arr)
    back = read_raster(path)
    assert back.dtype == arr.dtype
    assert np.array_equal(back, arr)


def test_png_rejects_float(tmp_path):
    with pytest.raises(ValueError):
        write_raster(tmp_path / "x.png", np.zeros((2, 2), np.float32))


# ---------------------------------------------------------------------- index


def _write_pair(root: Path, pid, size=8, lcm2_shape=None, with_lcm=True):
    rng = np.random.default_rng(sum(map(ord, pid)))
    d = root / pid
    write_raster(d / "img1.png", rng.integers(0, 255, (size, size, 3), dtype=np.uint8))
    write_raster(d / "img2.png", rng.integers(0, 255, (size, size, 3), dtype=np.uint8))
    if with_lcm:
        lcm1 = rng.integers(1, 6, (size, size)).astype(np.uint8)
        lcm2 = rng.integers(1, 6, lcm2_shape or (size, size)).astype(np.uint8)
        write_raster(d / "lcm1.png", lcm1)
        write_raster(d / "lcm2.png", lcm2)
        if lcm2.shape == lcm1.shape:
            write_raster(d / "change.png", compare_lcms(lcm1, lcm2))
    else:
        write_raster(d / "change.png", np.zeros((size, size), np.uint8))


def test_build_index_sorted_and_optional_rasters(tmp_path):
    _write_pair(tmp_path, "b")
    _write_pair(tmp_path, "a", with_lcm=False)
    idx = build_index(tmp_path)
    assert idx.pair_ids == ["a", "b"]
    a = idx.load("a")
    assert a.lcm1 is None and a.change is not None
    assert set(idx.split_assignment.values()) <= {"train", "test"}


def test_build_index_empty_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("# nothing\n")
    assert len(build_index(tmp_path)) == 0


def test_build_index_errors(tmp_path):
    _write_pair(tmp_path, "bad", lcm2_shape=(8, 9))
    with pytest.raises(ValueError, match="bad") as err:
        build_index(tmp_path)
    assert "lcm2" in str(err.value)

    other = tmp_path / "other"
    (other / "p").mkdir(parents=True)
    write_raster(other / "p" / "img1.png", np.zeros((4, 4), np.uint8))
    with pytest.raises((FileNotFoundError, ValueError), match="img2"):
        build_index(other)


def test_manifest_split_and_round_trip(tmp_path):
    _write_pair(tmp_path, "x")
    _write_pair(tmp_path, "y")
    lines = ["x\ttest\tx/img1.png\tx/img2.png\tx/lcm1.png\tx/lcm2.png\tx/change.png",
             "y\tauto\ty/img1.png\ty/img2.png\t-\t-\ty/change.png"]
    (tmp_path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    idx = build_index(tmp_path)
    assert idx.split_assignment["x"] == "test"
    expected = "train" if hashlib.sha1(b"y").digest()[0] % 2 == 0 else "test"
    assert idx.split_assignment["y"] == expected
    assert idx.load("y").lcm1 is None
    (tmp_path / "copy.tsv").write_text(idx.to_manifest())
    again = build_index(tmp_path, manifest=tmp_path / "copy.tsv")
    assert again.split_assignment == idx.split_assignment


def test_split_pairs_disjoint():
    keep, held = split_pairs(list(range(20)), 0.1, seed=0)
    assert len(held) == 2 and not set(keep) & set(held)
    assert split_pairs([1], 0.5)[1] == []


# --------------------------------------------------------------------- tiling


def test_tile_exact_division():
    x = np.zeros((1024, 1024), np.uint8)
    tiles = tile({"x": x}, TileSpec(512, 512))
    assert [t.origin for t in tiles] == [(0, 0), (0, 512), (512, 0), (512, 512)]


def test_tile_padding_rows():
    x = np.arange(513 * 512, dtype=np.float32).reshape(513, 512)
    tiles = tile({"x": x}, TileSpec(512, 512, "zero"))
    assert len(tiles) == 2
    assert tiles[1].origin == (512, 0)
    assert tiles[1].valid == (1, 512)
    assert not tiles[1].rasters["x"][1:].any()
    with pytest.raises(ValueError):
        tile({"x": x}, TileSpec(512, 512, "none"))
    with pytest.raises(ValueError):
        TileSpec(64, 65)


def test_tile_origins_cover():
    assert tile_origins(10, 4, 3) == [0, 3, 6]
    assert tile_origins(11, 4, 3) == [0, 3, 6, 9]
    assert tile_origins(4, 4, 2) == [0]


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(1, 40),
    w=st.integers(1, 40),
    t=st.integers(1, 16),
    frac=st.floats(0.1, 1.0),
    mode=st.sampled_from(["reflect", "zero"]),
)
def test_tile_stitch_round_trip(h, w, t, frac, mode):
    s = max(1, int(t * frac))
    rng = np.random.default_rng(h * 100 + w)
    img = rng.random((h, w, 2)).astype(np.float32)
    lab = rng.integers(0, 6, (h, w)).astype(np.uint8)
    tiles = tile({"img": img, "lab": lab}, TileSpec(t, s, mode))
    origins = [tt.origin for tt in tiles]
    back = stitch([tt.rasters["img"].transpose(2, 0, 1) for tt in tiles], origins, (h, w))
    assert np.allclose(back.transpose(1, 2, 0), img)
    # labels tiled with the same origins; unpadded pixels reproduce the source
    for tt in tiles:
        r, c = tt.origin
        vh, vw = tt.valid
        assert np.array_equal(tt.rasters["lab"][:vh, :vw], lab[r:r + vh, c:c + vw])


# -------------------------------------------------------------------- weights


def test_class_weights_examples():
    w = class_weights_from_counts({0: 50, 1: 100, 2: 100}, Nomenclature("two", L1.classes[:3]))
    assert w.weights.tolist() == [0.0, 1.0, 1.0]
    # 1/990 : 1/10 rescaled to mean 1 -> 2*10/1000 and 2*990/1000
    w = class_weights_from_counts({0: 990, 1: 10}, BINARY_CHANGE)
    assert w.weights == pytest.approx([0.02, 1.98], rel=1e-12)


def test_class_weights_clip_and_absent():
    with pytest.warns(UserWarning, match="no training pixels"):
        w = class_weights_from_counts({1: 1_000_000, 2: 1}, L1, clip_max=1000)
    assert w.weights[0] == 0
    scored = w.weights[1:]
    assert (scored > 0).all()
    assert scored.max() / scored.min() <= 1000 * (1 + 1e-12)
    assert w.warnings and len(w.warnings) == 3


@settings(max_examples=30, deadline=None)
@given(
    counts=st.lists(st.integers(1, 10**6), min_size=5, max_size=5),
    scale=st.integers(2, 50),
)
def test_class_weights_scale_invariant(counts, scale):
    c = {i + 1: n for i, n in enumerate(counts)}
    a = class_weights_from_counts(c, L1, 1000).weights
    b = class_weights_from_counts({k: v * scale for k, v in c.items()}, L1, 1000).weights
    assert np.allclose(a, b, rtol=1e-12)
    assert a[0] == 0


def test_label_counts_per_target(rng):
    pairs = [make_pair(rng, 8, pair_id=str(i)) for i in range(2)]
    lcm, nom = label_counts(pairs, "lcm", L1)
    assert sum(lcm.values()) == 2 * 2 * 64
    ch, nom = label_counts(pairs, "change", L1)
    assert nom is BINARY_CHANGE and sum(ch.values()) == 128
    cp, nom = label_counts(pairs, "change_pair", L1)
    assert nom.n_classes == 21 and cp.get(0, 0) == ch[0]


def test_class_weights_from_index(tiny_dataset):
    idx = build_index(tiny_dataset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = class_weights(idx, "train", L1, "change_pair")
    assert len(w.weights) == change_pair_nomenclature(L1).n_classes


# ------------------------------------------------------------------ imbalance


def _fixture_pair(lcm1, lcm2):
    img = np.zeros(lcm1.shape + (3,), np.float32)
    return ImagePair(img, img, lcm1, lcm2, compare_lcms(lcm1, lcm2))


def test_imbalance_hand_count():
    lcm1 = np.full((10, 10), 2, np.uint8)
    lcm2 = lcm1.copy()
    lcm2[0, :3] = 1
    t = imbalance_table([_fixture_pair(lcm1, lcm2)])
    assert t.transition(2, 1) == pytest.approx(3.0)
    assert t.no_change == pytest.approx(97.0)
    assert "2→1 3.000%" in t.rows()
    assert t.percent.sum() + t.no_change == pytest.approx(100.0)


def test_imbalance_all_no_change():
    lcm = np.full((5, 5), 3, np.uint8)
    t = imbalance_table([_fixture_pair(lcm, lcm)])
    assert t.no_change == 100.0 and not t.percent.any()
    assert "No change\t100.000%" in t.format()


def test_imbalance_matches_recount(tiny_dataset):
    idx = build_index(tiny_dataset)
    pairs = list(idx.pairs())
    t = imbalance_table(pairs)
    n = sum(p.lcm1.size for p in pairs)
    for a in range(1, 6):
        for b in range(1, 6):
            hits = sum(int(((p.lcm1 == a) & (p.lcm2 == b) & (compare_lcms(p.lcm1, p.lcm2) == 1)).sum())
                       for p in pairs)
            assert t.transition(a, b) == pytest.approx(100.0 * hits / n, abs=1e-12)


# ---------------------------------------------------------------------- synth


def test_synth_deterministic(tmp_path):
    a = synth_generate(tmp_path / "a", seed=7, n_pairs=2, size=32)
    b = synth_generate(tmp_path / "b", seed=7, n_pairs=2, size=32)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_synth_zero_density():
    rng = np.random.default_rng(0)
    _, _, lcm1, lcm2, change = generate_pair(rng, 64, 0.0)
    assert np.array_equal(lcm1, lcm2) and not change.any()


def test_synth_density_and_consistency():
    rng = np.random.default_rng(11)
    changed = total = 0
    for _ in range(4):
        img1, img2, lcm1, lcm2, change = generate_pair(rng, 256, 0.3)
        assert np.array_equal(change, compare_lcms(lcm1, lcm2))
        assert img1.shape == (256, 256, 3) and img1.dtype == np.uint8
        changed += int(change.sum())
        total += change.size
    assert abs(changed / total - 0.3) <= 0.1


def test_synth_errors(tmp_path):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        generate_pair(rng, 4, 0.1)
    with pytest.raises(ValueError):
        generate_pair(rng, 64, 1.5)
