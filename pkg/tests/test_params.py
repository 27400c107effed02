import math

import numpy as np
import pytest

from nscaching.params import (MODEL_KINDS, CheckpointError, check_kind, init_params, load_checkpoint,
                              save_checkpoint, table_layout, xavier_bound)

EXPECTED_TABLES = {
    "TransE": ["entity", "relation"],
    "TransH": ["entity", "relation", "relation_norm"],
    "TransD": ["entity", "relation", "entity_proj", "relation_proj"],
    "DistMult": ["entity", "relation"],
    "ComplEx": ["entity", "relation", "entity_im", "relation_im"],
}


class TestInit:
    def test_table_layout(self, kind):
        p = init_params(kind, 7, 3, 4)
        assert p.table_names() == EXPECTED_TABLES[kind]
        for name, by_entity in table_layout(kind):
            assert p[name].shape == ((7 if by_entity else 3), 4)
            assert p[name].dtype == np.float32

    def test_shape_and_bound_d50(self):
        p = init_params("TransE", 10, 2, 50, dtype=np.float64)
        assert p["entity"].shape == (10, 50)
        assert np.abs(p["entity"]).max() <= math.sqrt(6 / (10 + 50))

    def test_xavier_bound(self):
        assert xavier_bound(10, 5) == pytest.approx(math.sqrt(6 / 15))

    def test_values_within_bound(self, kind):
        p = init_params(kind, 50, 4, 10, seed=3, dtype=np.float64)
        assert np.abs(p["entity"]).max() <= xavier_bound(50, 10)
        assert np.abs(p["relation"]).max() <= xavier_bound(4, 10)

    def test_uniform_moments(self):
        p = init_params("TransE", 2000, 1, 50, seed=1, dtype=np.float64)
        b = xavier_bound(2000, 50)
        # variance of U(-b, b) is b^2 / 3
        assert np.var(p["entity"]) == pytest.approx(b * b / 3, rel=0.02)

    def test_deterministic(self, kind):
        assert init_params(kind, 9, 2, 6, seed=5).equals(init_params(kind, 9, 2, 6, seed=5))
        assert not init_params(kind, 9, 2, 6, seed=5).equals(init_params(kind, 9, 2, 6, seed=6))

    def test_transh_normals_unit(self):
        p = init_params("TransH", 5, 4, 8)
        np.testing.assert_allclose(np.linalg.norm(p["relation_norm"], axis=1), 1.0, rtol=1e-6)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            check_kind("RotatE")
        with pytest.raises(ValueError):
            init_params("TransE", 0, 1, 4)
        with pytest.raises(ValueError):
            init_params("TransE", 3, 1, 0)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip_bit_exact(self, tmp_path, kind, dtype):
        p = init_params(kind, 6, 2, 5, seed=2, dtype=dtype)
        save_checkpoint(p, {"epoch": 3, "config_hash": "abc"}, tmp_path / "m.ckpt")
        q, meta = load_checkpoint(tmp_path / "m.ckpt", expect_kind=kind, expect_dim=5)
        assert q.equals(p)
        assert meta == {"epoch": "3", "config_hash": "abc"}

    def test_payload_size(self, tmp_path):
        p = init_params("TransD", 6, 2, 5)
        save_checkpoint(p, {}, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        payload = raw[raw.index(b"END\n") + 4:]
        assert len(payload) == (6 * 5 * 2 + 2 * 5 * 2) * 4
        # first table is the entity table, little-endian
        np.testing.assert_array_equal(np.frombuffer(payload[:120], "<f4").reshape(6, 5), p["entity"])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello\n")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x")

    def test_mismatch(self, tmp_path):
        save_checkpoint(init_params("TransE", 4, 1, 3), {}, tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(tmp_path / "m.ckpt", expect_kind="TransH")
        with pytest.raises(CheckpointError, match="dim"):
            load_checkpoint(tmp_path / "m.ckpt", expect_dim=4)

    def test_truncated_names_table(self, tmp_path):
        save_checkpoint(init_params("ComplEx", 4, 2, 3), {}, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-4])
        with pytest.raises(CheckpointError, match="relation_im"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(init_params("TransE", 4, 1, 3), {}, tmp_path / "m.ckpt")
        with open(tmp_path / "m.ckpt", "ab") as f:
            f.write(b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_missing_header_key(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NSCACHING-CHECKPOINT 1\nkind: TransE\nEND\n")
        with pytest.raises(CheckpointError, match="lacks"):
            load_checkpoint(tmp_path / "x")


def test_all_kinds_listed():
    assert set(MODEL_KINDS) == set(EXPECTED_TABLES)
