import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prmcs.embed import (
    EmbeddingMatrix,
    ManifestEntry,
    cosine,
    encode_text,
    hash_token,
    init_params,
    load_matrix,
    load_params,
    manifest_path,
    save_matrix,
    save_params,
)
from prmcs.errors import (
    BadMagic,
    DimensionMismatch,
    ManifestMismatch,
    TruncatedFile,
    VersionMismatch,
)

from oracles import fnv1a


class TestHashToken:
    def test_empty_string_is_offset(self):
        assert hash_token("", 2**64) == 0xCBF29CE484222325
        assert hash_token("", 4096) == 0xCBF29CE484222325 % 4096

    def test_mod_one(self):
        assert hash_token("a", 1) == 0

    def test_golf_frozen(self):
        # fnv1a("golf") = 0x9cefca720ea68439
        assert hash_token("golf", 4096) == 1081

    @given(st.text(max_size=20), st.integers(min_value=1, max_value=10000))
    def test_matches_reference(self, token, v):
        assert hash_token(token, v) == fnv1a(token.encode("utf-8")) % v


class TestCosine:
    def test_self_similarity(self):
        x = np.array([1.0, 2.0, -3.0])
        assert cosine(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_zero_vector_rule(self):
        assert cosine(np.zeros(2), np.array([1.0, 1.0])) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine(np.zeros(2), np.zeros(3))

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.floats(0.01, 100.0))
    def test_symmetry_and_scale_invariance(self, u, v, alpha):
        u, v = np.array(u), np.array(v)
        c = cosine(u, v)
        assert cosine(v, u) == pytest.approx(c, abs=1e-12)
        assert cosine(alpha * u, v) == pytest.approx(c, abs=1e-9)


def small_matrix():
    data = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
    manifest = [ManifestEntry(row=i, id=f"img{i}", lang="en") for i in range(3)]
    return EmbeddingMatrix(dim=4, data=data, manifest=manifest)


class TestMatrixIO:
    def test_roundtrip_bytes(self, tmp_path):
        path = str(tmp_path / "m.prmc")
        m = small_matrix()
        save_matrix(path, m)
        back = load_matrix(path)
        assert back.data.tobytes() == m.data.tobytes()
        assert [e.id for e in back.manifest] == ["img0", "img1", "img2"]
        # saving the loaded matrix reproduces the file bytes
        path2 = str(tmp_path / "m2.prmc")
        save_matrix(path2, back)
        assert (tmp_path / "m.prmc").read_bytes() == (tmp_path / "m2.prmc").read_bytes()

    def test_empty_matrix(self, tmp_path):
        path = str(tmp_path / "empty.prmc")
        save_matrix(path, EmbeddingMatrix(dim=5, data=np.zeros((0, 5), np.float32), manifest=[]))
        assert load_matrix(path).rows == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.prmc"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(BadMagic):
            load_matrix(str(path))

    def test_version_mismatch(self, tmp_path):
        path = str(tmp_path / "v.prmc")
        save_matrix(path, small_matrix())
        blob = bytearray((tmp_path / "v.prmc").read_bytes())
        blob[4] = 9
        (tmp_path / "v.prmc").write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_matrix(path)

    def test_truncated_payload(self, tmp_path):
        path = str(tmp_path / "t.prmc")
        save_matrix(path, small_matrix())
        blob = (tmp_path / "t.prmc").read_bytes()
        (tmp_path / "t.prmc").write_bytes(blob[:-5])
        with pytest.raises(TruncatedFile):
            load_matrix(path)

    def test_manifest_mismatch(self, tmp_path):
        path = str(tmp_path / "mm.prmc")
        save_matrix(path, small_matrix())
        with open(manifest_path(path), "a", encoding="utf-8") as fh:
            fh.write('{"row": 3, "id": "extra", "lang": "en"}\n')
        with pytest.raises(ManifestMismatch):
            load_matrix(path)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ManifestMismatch):
            EmbeddingMatrix(
                dim=2,
                data=np.zeros((2, 2), np.float32),
                manifest=[ManifestEntry(0, "x", "en"), ManifestEntry(1, "x", "en")],
            )


class TestParamsIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = init_params(seed=3, vocab_size=64, hidden=8, out_dim=6)
        params.temp_logit = 1.2345
        path = str(tmp_path / "p.prmp")
        save_params(path, params)
        back = load_params(path)
        for block in ("table", "w1", "b1", "w2", "b2"):
            assert getattr(back, block).tobytes() == getattr(params, block).tobytes()
        assert back.temp_logit == params.temp_logit
        assert back.gate_gain == params.gate_gain
        assert (back.vocab_size, back.hidden, back.out_dim) == (64, 8, 6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.prmp"
        path.write_bytes(b"JUNKJUNKJUNK" + b"\x00" * 64)
        with pytest.raises(BadMagic):
            load_params(str(path))

    def test_truncated(self, tmp_path):
        params = init_params(seed=3, vocab_size=64, hidden=8, out_dim=6)
        path = str(tmp_path / "p.prmp")
        save_params(path, params)
        blob = (tmp_path / "p.prmp").read_bytes()
        (tmp_path / "p.prmp").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(TruncatedFile):
            load_params(str(path))


class TestEncoder:
    def test_init_deterministic(self):
        a = init_params(seed=5, vocab_size=32, hidden=4, out_dim=4)
        b = init_params(seed=5, vocab_size=32, hidden=4, out_dim=4)
        assert a.table.tobytes() == b.table.tobytes()
        assert a.w1.tobytes() == b.w1.tobytes()
        assert np.all(a.b1 == 0) and np.all(a.b2 == 0)
        assert a.temp_logit == pytest.approx(math.log(1 / 0.07))
        assert np.abs(a.table).max() <= 0.05

    def test_empty_sequence_uses_zero_pool(self):
        p = init_params(seed=5, vocab_size=32, hidden=4, out_dim=4)
        p.b1 = np.array([0.3, -0.2, 0.1, 0.0])
        p.b2 = np.array([1.0, 2.0, 3.0, 4.0])
        expected = p.w2 @ np.tanh(p.b1) + p.b2
        assert np.allclose(encode_text(p, []), expected, atol=1e-15)

    def test_gate_gain_zero_is_permutation_invariant(self):
        p = init_params(seed=6, vocab_size=64, hidden=8, out_dim=8, gate_gain=0.0)
        toks = ["alpha", "beta", "gamma", "delta"]
        a = encode_text(p, toks)
        b = encode_text(p, toks[::-1])
        assert np.allclose(a, b, atol=1e-15)

    def test_gate_gain_half_is_order_sensitive(self):
        p = init_params(seed=6, vocab_size=64, hidden=8, out_dim=8, gate_gain=0.5)
        a = encode_text(p, ["alpha", "beta"])
        b = encode_text(p, ["beta", "alpha"])
        assert not np.allclose(a, b, atol=1e-12)

    def test_deterministic(self):
        p = init_params(seed=7, vocab_size=64, hidden=8, out_dim=8)
        toks = ["x", "y", "z"]
        assert encode_text(p, toks).tobytes() == encode_text(p, toks).tobytes()

    def test_clamp_temp(self):
        p = init_params(seed=7, vocab_size=8, hidden=4, out_dim=4)
        p.temp_logit = 10.0
        p.clamp_temp()
        assert p.temp_logit == pytest.approx(math.log(100.0))
