import numpy as np
import pytest

from promptseg.data import (
    KIND_IMAGE,
    KIND_MASK,
    ManifestError,
    RasterError,
    SampleRecord,
    SplitError,
    leave_one_site_out,
    load_manifest,
    load_sample,
    read_raster,
    split_train_val,
    write_raster,
)


def write_pair(root, sid, image, mask):
    write_raster(root / f"{sid}_i.bin", image, KIND_IMAGE)
    write_raster(root / f"{sid}_m.bin", mask, KIND_MASK)
    return f"{sid},{'S'},{sid}_i.bin,{sid}_m.bin"


def make_manifest(tmp_path, n_per_site, image_size=8):
    rng = np.random.default_rng(0)
    lines = []
    for site, n in n_per_site.items():
        for i in range(n):
            sid = f"{site}{i:03d}"
            img = rng.random((image_size, image_size)).astype(np.float32)
            msk = (rng.random((image_size, image_size)) < 0.4).astype(np.uint8)
            write_raster(tmp_path / f"{sid}_i.bin", img, KIND_IMAGE)
            write_raster(tmp_path / f"{sid}_m.bin", msk, KIND_MASK)
            lines.append(f"{sid},{site},{sid}_i.bin,{sid}_m.bin")
    path = tmp_path / "manifest.csv"
    path.write_text("# comment line\n" + "\n".join(lines) + "\n")
    return path


class TestLoadManifest:
    def test_basic_parse(self, tmp_path):
        path = make_manifest(tmp_path, {"A": 2})
        m = load_manifest(path)
        assert len(m.records) == 2
        assert m.sites == {"A"}

    def test_six_sites(self, tmp_path):
        path = make_manifest(tmp_path, {s: 2 for s in "ABCDEF"})
        m = load_manifest(path)
        assert m.sites == set("ABCDEF")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.csv")

    def test_duplicate_id(self, tmp_path):
        path = make_manifest(tmp_path, {"A": 2})
        lines = path.read_text().splitlines()
        lines.append(lines[-1])
        path.write_text("\n".join(lines))
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)

    def test_malformed_record(self, tmp_path):
        path = make_manifest(tmp_path, {"A": 2})
        path.write_text(path.read_text() + "only,three,fields\n")
        with pytest.raises(ManifestError, match="4 comma-separated"):
            load_manifest(path)

    def test_dangling_resource(self, tmp_path):
        path = make_manifest(tmp_path, {"A": 1})
        path.write_text(path.read_text() + "X1,A,ghost_i.bin,ghost_m.bin\n")
        with pytest.raises(ManifestError, match="does not exist"):
            load_manifest(path)

    def test_empty_field(self, tmp_path):
        path = make_manifest(tmp_path, {"A": 1})
        first = path.read_text().splitlines()[1]
        path.write_text(first.replace("A000,A", "A001,") + "\n" + first)
        with pytest.raises(ManifestError):
            load_manifest(path)


class TestSplit:
    @pytest.fixture()
    def manifest(self, tmp_path):
        return load_manifest(make_manifest(tmp_path, {"A": 10, "B": 7, "C": 20}))

    def test_ten_samples_default_ratio(self, manifest):
        tr, va = split_train_val(manifest, "A", seed=0)
        assert (len(tr), len(va)) == (9, 1)

    def test_seven_samples_rounding(self, manifest):
        tr, va = split_train_val(manifest, "B", seed=0)
        assert (len(tr), len(va)) == (6, 1)

    def test_determinism(self, manifest):
        assert split_train_val(manifest, "C", seed=5) == split_train_val(manifest, "C", seed=5)

    def test_seed_changes_split(self, manifest):
        splits = {tuple(split_train_val(manifest, "C", seed=s)[1]) for s in range(10)}
        assert len(splits) > 1

    def test_partition_property(self, manifest):
        ids = set(manifest.site_ids("C"))
        for seed in range(25):
            tr, va = split_train_val(manifest, "C", seed=seed)
            assert set(tr) | set(va) == ids
            assert not set(tr) & set(va)
            assert len(tr) + len(va) == len(ids)

    def test_unknown_site(self, manifest):
        with pytest.raises(SplitError, match="unknown site"):
            split_train_val(manifest, "Z", seed=0)

    def test_too_small_site(self, tmp_path):
        manifest = load_manifest(make_manifest(tmp_path, {"A": 1, "B": 3}))
        with pytest.raises(SplitError, match="at least 2"):
            split_train_val(manifest, "A", seed=0)

    def test_bad_ratio(self, manifest):
        with pytest.raises(SplitError):
            split_train_val(manifest, "A", ratio=(9, 0), seed=0)


class TestLeaveOneSiteOut:
    @pytest.fixture()
    def manifest(self, tmp_path):
        return load_manifest(make_manifest(tmp_path, {s: 4 for s in "ABCDEF"}))

    def test_six_sites(self, manifest):
        plan = leave_one_site_out(manifest, "A", seed=0)
        assert set(plan.target_sites) == set("BCDEF")
        assert plan.source_site == "A"

    def test_two_sites(self, tmp_path):
        manifest = load_manifest(make_manifest(tmp_path, {"A": 3, "B": 3}))
        plan = leave_one_site_out(manifest, "B", seed=0)
        assert set(plan.target_sites) == {"A"}

    def test_determinism(self, manifest):
        assert leave_one_site_out(manifest, "C", seed=3) == leave_one_site_out(manifest, "C", seed=3)

    def test_single_site_rejected(self, tmp_path):
        manifest = load_manifest(make_manifest(tmp_path, {"A": 4}))
        with pytest.raises(SplitError):
            leave_one_site_out(manifest, "A", seed=0)

    def test_targets_disjoint_and_exclude_source(self, manifest):
        for source in manifest.sites:
            plan = leave_one_site_out(manifest, source, seed=1)
            assert source not in plan.target_sites
            seen: set[str] = set()
            for ids in plan.target_sites.values():
                assert not seen & set(ids)
                seen |= set(ids)
            source_ids = set(manifest.site_ids(source))
            assert set(plan.train_ids) | set(plan.val_ids) == source_ids
            assert not seen & source_ids


class TestRasters:
    def test_image_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8)
        write_raster(tmp_path / "x.bin", img, KIND_IMAGE)
        back, kind = read_raster(tmp_path / "x.bin")
        assert kind == KIND_IMAGE
        np.testing.assert_array_equal(back, img)

    def test_mask_round_trip(self, tmp_path):
        msk = (np.arange(64).reshape(8, 8) % 2).astype(np.uint8)
        write_raster(tmp_path / "m.bin", msk, KIND_MASK)
        back, kind = read_raster(tmp_path / "m.bin")
        assert kind == KIND_MASK
        np.testing.assert_array_equal(back, msk)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "junk.bin").write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(RasterError, match="not a DSIM"):
            read_raster(tmp_path / "junk.bin")

    def test_truncated_payload(self, tmp_path):
        write_raster(tmp_path / "x.bin", np.zeros((4, 4), np.float32), KIND_IMAGE)
        data = (tmp_path / "x.bin").read_bytes()
        (tmp_path / "x.bin").write_bytes(data[:-8])
        with pytest.raises(RasterError, match="payload size"):
            read_raster(tmp_path / "x.bin")


class TestLoadSample:
    def write_record(self, tmp_path, image, mask, sid="s0"):
        write_raster(tmp_path / f"{sid}_i.bin", image, KIND_IMAGE)
        write_raster(tmp_path / f"{sid}_m.bin", mask, KIND_MASK)
        return SampleRecord(sid, "A", str(tmp_path / f"{sid}_i.bin"), str(tmp_path / f"{sid}_m.bin"))

    def test_valid_sample(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((288, 288)).astype(np.float32)
        msk = (rng.random((288, 288)) < 0.3).astype(np.uint8)
        rec = self.write_record(tmp_path, img, msk)
        s = load_sample(rec, 288)
        assert s.image.shape == (288, 288)
        assert s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) <= {0, 1}

    def test_size_mismatch(self, tmp_path):
        rec = self.write_record(tmp_path, np.zeros((256, 256), np.float32), np.zeros((256, 256), np.uint8))
        with pytest.raises(RasterError, match="shape"):
            load_sample(rec, 288)

    def test_intensity_out_of_range(self, tmp_path):
        img = np.full((8, 8), 1.5, np.float32)
        rec = self.write_record(tmp_path, img, np.zeros((8, 8), np.uint8))
        with pytest.raises(RasterError, match=r"\[0, 1\]"):
            load_sample(rec, 8)

    def test_non_binary_mask(self, tmp_path):
        msk = np.zeros((8, 8), np.uint8)
        msk[0, 0] = 2
        rec = self.write_record(tmp_path, np.zeros((8, 8), np.float32), msk)
        with pytest.raises(RasterError, match="non-binary"):
            load_sample(rec, 8)

    def test_fuzz_never_returns_invalid(self, tmp_path):
        # random files must either parse to valid samples or raise RasterError
        rng = np.random.default_rng(7)
        for i in range(50):
            blob = rng.bytes(rng.integers(0, 200))
            p_i = tmp_path / f"f{i}_i.bin"
            p_m = tmp_path / f"f{i}_m.bin"
            p_i.write_bytes(blob)
            p_m.write_bytes(blob)
            rec = SampleRecord(f"f{i}", "A", str(p_i), str(p_m))
            try:
                s = load_sample(rec, 8)
            except RasterError:
                continue
            assert s.image.shape == (8, 8)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            assert set(np.unique(s.mask)) <= {0, 1}
