import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpnseg.dataio import (
    BACKGROUND,
    DUCT,
    MASS,
    TISSUE,
    CaseManifest,
    LabelMap,
    PhantomConfig,
    Volume,
    VolumeHeader,
    gen_phantom,
    image_volume,
    label_map,
    lesion_contrast,
    normalize_array,
    patch_grid,
    read_volume,
    truncate_normalize,
    write_corpus,
    write_volume,
)
from hpnseg.errors import ConfigurationError, ContractError, DimensionError, FormatError


def stats_oracle(values):
    # pure-python population mean/std
    m = sum(values) / len(values)
    s = math.sqrt(sum((v - m) ** 2 for v in values) / len(values))
    return [(v - m) / s for v in values]


class TestMpvFormat:
    def test_round_trip_image(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
        v = image_volume(arr, "venous", (0.5, 0.7, 1.25))
        write_volume(v, tmp_path / "a.mpv")
        back = read_volume(tmp_path / "a.mpv")
        assert back.header == v.header
        assert back.voxels.tobytes() == arr.tobytes()

    def test_round_trip_labels(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 4, size=(4, 3, 2)).astype(np.uint8)
        write_volume(label_map(arr), tmp_path / "l.mpv")
        back = read_volume(tmp_path / "l.mpv")
        assert isinstance(back, LabelMap)
        np.testing.assert_array_equal(back.voxels, arr)

    def test_float_one_bytes(self, tmp_path):
        write_volume(image_volume(np.ones((1, 1, 1))), tmp_path / "one.mpv")
        assert (tmp_path / "one.mpv").read_bytes()[-4:] == bytes([0x00, 0x00, 0x80, 0x3F])

    def test_header_text(self):
        text = VolumeHeader((2, 3, 4), (1.0, 0.5, 2.0), "u8", "none", "labels").encode().decode()
        assert text == (
            "magic: MPVOL1\nkind: labels\ndims: 2 3 4\nspacing: 1.0 0.5 2.0\ndtype: u8\nphase: none\n\n"
        )

    def test_x_fastest_order(self, tmp_path):
        arr = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        write_volume(image_volume(arr), tmp_path / "o.mpv")
        payload = (tmp_path / "o.mpv").read_bytes()[-32:]
        vals = struct.unpack("<8f", payload)
        assert vals[:2] == (arr[0, 0, 0], arr[1, 0, 0])
        assert vals[2] == arr[0, 1, 0]

    def test_short_payload_rejected(self, tmp_path):
        head = VolumeHeader((2, 2, 2)).encode()
        (tmp_path / "s.mpv").write_bytes(head + np.ones(7, "<f4").tobytes())
        with pytest.raises(FormatError) as info:
            read_volume(tmp_path / "s.mpv")
        assert info.value.offset == len(head)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.mpv").write_bytes(VolumeHeader((1, 1, 1)).encode().replace(b"MPVOL1", b"MPVOL9") + bytes(4))
        with pytest.raises(FormatError) as info:
            read_volume(tmp_path / "m.mpv")
        assert info.value.offset == 0

    def test_bad_dtype_offset(self, tmp_path):
        raw = VolumeHeader((1, 1, 1)).encode().replace(b"dtype: f32", b"dtype: f64")
        (tmp_path / "d.mpv").write_bytes(raw + bytes(8))
        with pytest.raises(FormatError) as info:
            read_volume(tmp_path / "d.mpv")
        assert info.value.offset == raw.index(b"dtype")

    def test_label_out_of_range(self, tmp_path):
        raw = VolumeHeader((1, 1, 2), dtype="u8", kind="labels").encode() + bytes([1, 9])
        (tmp_path / "x.mpv").write_bytes(raw)
        with pytest.raises(FormatError):
            read_volume(tmp_path / "x.mpv")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            write_volume(image_volume(np.zeros((1, 1, 1))), tmp_path / "missing" / "v.mpv")

    def test_dims_mismatch(self):
        with pytest.raises(DimensionError):
            Volume(VolumeHeader((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.integers(0, 2**31))
    def test_round_trip_property(self, tmp_path_factory, dims, seed):
        arr = np.random.default_rng(seed).normal(scale=1e3, size=dims).astype(np.float32)
        path = tmp_path_factory.mktemp("rt") / "v.mpv"
        write_volume(image_volume(arr, "arterial"), path)
        assert read_volume(path).voxels.tobytes() == arr.tobytes()


class TestNormalize:
    def test_example(self):
        out = normalize_array(np.array([-200.0, 0.0, 300.0]))
        expected = stats_oracle([-100.0, 0.0, 240.0])
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(out, [-1.0280, -0.3271, 1.3551], atol=1e-3)

    def test_constant_gives_zeros(self):
        v = truncate_normalize(image_volume(np.full((2, 2, 2), 50.0)))
        assert not v.voxels.any()

    def test_unit_statistics(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = truncate_normalize(image_volume(rng.normal(50, 80, size=(6, 6, 6))))
            x = v.voxels.astype(np.float64)
            assert abs(x.mean()) < 1e-5
            assert abs(x.std() - 1) < 1e-5

    def test_rejects_labels(self):
        with pytest.raises(ContractError):
            truncate_normalize(label_map(np.zeros((2, 2, 2))))


class TestPhantom:
    def test_deterministic(self):
        a, b = gen_phantom(7), gen_phantom(7)
        for va, vb in zip((a.arterial, a.venous, a.labels), (b.arterial, b.venous, b.labels)):
            assert va.header == vb.header
            assert va.voxels.tobytes() == vb.voxels.tobytes()
        assert gen_phantom(8).arterial.voxels.tobytes() != a.arterial.voxels.tobytes()

    def test_fractions_and_labels(self):
        cfg = PhantomConfig()
        for seed in range(20):
            lab = gen_phantom(seed, cfg).labels.voxels
            assert set(np.unique(lab)) == {BACKGROUND, TISSUE, MASS, DUCT}
            frac = float((lab == MASS).mean())
            assert cfg.lesion_fraction[0] <= frac <= cfg.lesion_fraction[1]

    def test_split_conspicuity(self):
        cfg = PhantomConfig()
        for seed in range(20):
            art, ven = lesion_contrast(gen_phantom(seed, cfg))
            visible, hidden = (art, ven) if seed % 2 == 0 else (ven, art)
            assert visible == pytest.approx(cfg.visible_contrast, abs=1e-3)
            assert hidden == pytest.approx(cfg.hidden_contrast, abs=1e-3)

    def test_both_visible_mode(self):
        art, ven = lesion_contrast(gen_phantom(3, PhantomConfig(conspicuity="both")))
        assert art == pytest.approx(0.8, abs=1e-3) and ven == pytest.approx(0.8, abs=1e-3)

    def test_small_dims(self):
        case = gen_phantom(0, PhantomConfig(dims=(16, 16, 16)))
        assert case.dims == (16, 16, 16)
        with pytest.raises(ConfigurationError):
            gen_phantom(0, PhantomConfig(dims=(4, 16, 16)))

    def test_corpus_manifest(self, tmp_path):
        cfg = PhantomConfig(dims=(16, 16, 16))
        m = write_corpus(tmp_path, [3, 4], cfg)
        back = CaseManifest.read(tmp_path / "manifest.tsv")
        assert back.ids() == m.ids() == ["case00003", "case00004"]
        case = back.load(1)
        ref = gen_phantom(4, cfg)
        assert case.venous.voxels.tobytes() == ref.venous.voxels.tobytes()
        np.testing.assert_array_equal(case.labels.voxels, ref.labels.voxels)

    def test_manifest_bad_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\tb\tc\n")
        with pytest.raises(FormatError):
            CaseManifest.read(tmp_path / "m.tsv")


class TestPatchGrid:
    def test_single_window(self):
        assert patch_grid((64, 64, 64), 64, 32) == [(0, 0, 0)]

    def test_overlapping(self):
        grid = patch_grid((96, 96, 96), 64, 32)
        assert len(grid) == 8
        assert set(grid) == {(x, y, z) for x in (0, 32) for y in (0, 32) for z in (0, 32)}

    def test_clamped_last_window(self):
        grid = patch_grid((70, 70, 70), 64, 64)
        assert sorted({c[0] for c in grid}) == [0, 6]

    def test_stride_beyond_patch(self):
        with pytest.raises(ContractError):
            patch_grid((8, 8, 8), 2, 3)

    def test_patch_too_big(self):
        with pytest.raises(ContractError):
            patch_grid((8, 8, 8), 16, 8)

    @settings(max_examples=100, deadline=None)
    @given(
        st.tuples(st.integers(6, 20), st.integers(6, 20), st.integers(6, 20)),
        st.integers(1, 6),
        st.integers(1, 6),
    )
    def test_cover_and_bounds(self, dims, patch, stride):
        stride = min(stride, patch)
        hits = np.zeros(dims, dtype=int)
        for c in patch_grid(dims, patch, stride):
            assert all(0 <= c[i] and c[i] + patch <= dims[i] for i in range(3))
            hits[c[0]:c[0] + patch, c[1]:c[1] + patch, c[2]:c[2] + patch] += 1
        assert hits.min() >= 1
