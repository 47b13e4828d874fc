import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nipslab import dataset as D
from nipslab.darcy import solve_darcy
from nipslab.randfield import split_rng


@pytest.fixture(scope="module")
def small_corpus():
    return D.build_darcy_corpus(4, 6, 7, seed=3)


def _grad_energy(b):
    return np.mean(np.diff(b, axis=0) ** 2) + np.mean(np.diff(b, axis=1) ** 2)


def test_full_recipe_pair_count_and_split():
    recs = D.build_darcy_corpus(100, 100, 5, seed=0)
    assert sum(r.d_pool for r in recs) == 10_000
    train, test = D.split_by_system(recs, 10)
    samples = D.training_samples(train, 50, 100, seed=0)
    held = D.training_samples(test, 50, 100, seed=0)
    assert (len(samples), len(held)) == (9_000, 1_000)


def test_unit_corpus_solves_its_pair():
    (rec,) = D.build_darcy_corpus(1, 1, 9, seed=1)
    assert rec.g.shape == (1, 9, 9)
    np.testing.assert_array_equal(rec.p[0], solve_darcy(rec.b, rec.g[0]))
    assert set(np.unique(rec.b)) <= {3.0, 12.0}


def test_every_pair_solves_its_system(small_corpus):
    for rec in small_corpus:
        for g, p in zip(rec.g, rec.p):
            assert np.abs(solve_darcy(rec.b, g) - p).max() < 1e-12


def test_corpus_is_deterministic_and_order_free():
    a = D.build_darcy_corpus(3, 2, 7, seed=5)
    b = D.build_darcy_corpus(1, 2, 7, seed=5, first_id=2)
    assert a[2].b.tobytes() == b[0].b.tobytes()
    assert a[2].g.tobytes() == b[0].g.tobytes()


def test_shifted_microstructure_is_rougher():
    ood = D.build_darcy_corpus(12, 1, 21, micro_spec=D.OOD2_MICRO, seed=0)
    iid = D.build_darcy_corpus(12, 1, 21, seed=0)
    assert np.mean([_grad_energy(r.b) for r in ood]) > np.mean([_grad_energy(r.b) for r in iid])


def test_permute_identity_keeps_pool_order(small_corpus):
    rec = small_corpus[0]
    (s,) = D.permute_augment(rec, rec.d_pool, 1, None)
    G, U = rec.columns()
    np.testing.assert_array_equal(s.G, G)
    np.testing.assert_array_equal(s.U, U)


def test_permute_rejects_oversized_d(small_corpus):
    with pytest.raises(ValueError):
        D.permute_augment(small_corpus[0], 7, 1, split_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_columns_stay_paired_and_distinct(d, n_rand, seed):
    rec = D.build_darcy_corpus(1, 6, 5, seed=0)[0]
    samples = D.permute_augment(rec, d, n_rand, split_rng(seed))
    assert len(samples) == n_rand
    pool_g = rec.g.reshape(6, -1)
    pool_p = rec.p.reshape(6, -1)
    for s in samples:
        assert len(set(s.indices.tolist())) == d
        for j, i in enumerate(s.indices):
            np.testing.assert_array_equal(s.G[:, j], pool_g[i])
            np.testing.assert_array_equal(s.U[:, j], pool_p[i])


def test_augmentation_never_mixes_systems(small_corpus):
    samples = D.training_samples(small_corpus, 3, 4, seed=0)
    by_id = {r.system_id: r for r in small_corpus}
    for s in samples:
        rec = by_id[s.system_id]
        G, U = rec.columns(s.indices)
        np.testing.assert_array_equal(s.G, G)
        np.testing.assert_array_equal(s.U, U)


def test_noise_identity_and_level():
    g = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(D.add_noise(g, 0.0, split_rng(0)), g)
    big = np.zeros(1_000_000)
    out = D.add_noise(big, 0.01, split_rng(1))
    assert abs(out.std() / 0.01 - 1) < 0.01
    with pytest.raises(ValueError):
        D.add_noise(g, -1.0, split_rng(0))


def test_noise_touches_loadings_only(small_corpus):
    clean = D.training_samples(small_corpus, 3, 2, seed=0)
    noisy = D.training_samples(small_corpus, 3, 2, seed=0, noise=0.1)
    for a, b in zip(clean, noisy):
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.U, b.U)
        assert not np.array_equal(a.G, b.G)


def test_split_is_by_system(small_corpus):
    train, test = D.split_by_system(small_corpus, 1)
    assert not {r.system_id for r in train} & {r.system_id for r in test}
    assert test[0].system_id == small_corpus[-1].system_id
    with pytest.raises(ValueError):
        D.split_by_system(small_corpus, 4)


def test_save_load_round_trip_is_byte_identical(tmp_path, small_corpus):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    D.save(p1, small_corpus, {"seed": 3})
    corpus = D.load(p1)
    assert corpus.header["seed"] == 3
    for a, b in zip(small_corpus, corpus):
        assert a.system_id == b.system_id
        for x, y in ((a.b, b.b), (a.g, b.g), (a.p, b.p)):
            assert x.tobytes() == y.tobytes()
    D.save(p2, corpus.records, {"seed": 3})
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.stat().st_size == D.expected_size(corpus.header)


def test_expected_size_arithmetic():
    header = {"format_version": 1, "n": 21, "n_systems": 100, "d_pool": 100,
              "system_ids": list(range(100))}
    hb = len(json.dumps(header, sort_keys=True).encode())
    # 100 systems x (1 + 2*100) fields x 441 nodes x 8 bytes
    assert D.expected_size(header) == 8 + 4 + hb + 70_912_800


def test_bad_magic(tmp_path, small_corpus):
    p = tmp_path / "x.bin"
    D.save(p, small_corpus)
    blob = bytearray(p.read_bytes())
    blob[0:1] = b"X"
    p.write_bytes(bytes(blob))
    with pytest.raises(D.DatasetFormatError, match="offset 0"):
        D.load(p)


def test_truncation_and_trailing_bytes(tmp_path, small_corpus):
    p = tmp_path / "x.bin"
    D.save(p, small_corpus)
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(D.DatasetFormatError, match="truncated"):
        D.load(p)
    p.write_bytes(blob + b"\0" * 8)
    with pytest.raises(D.DatasetFormatError, match="unexpected bytes"):
        D.load(p)
    p.write_bytes(blob[:10])
    with pytest.raises(D.DatasetFormatError):
        D.load(p)


def test_header_count_mismatch(tmp_path, small_corpus):
    p = tmp_path / "x.bin"
    D.save(p, small_corpus)
    blob = p.read_bytes()
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    header["n_systems"] = 3
    header["system_ids"] = header["system_ids"][:3]
    hb = json.dumps(header, sort_keys=True).encode()
    p.write_bytes(D.MAGIC + struct.pack("<I", len(hb)) + hb + blob[12 + hlen:])
    with pytest.raises(D.DatasetFormatError, match="n_systems"):
        D.load(p)


def test_manifest(tmp_path, small_corpus):
    p = tmp_path / "x.bin"
    D.save(p, small_corpus)
    m = json.loads(D.write_manifest(p, {"note": 1}).read_text())
    assert m["sha256"] == D.file_sha256(p)
    assert m["bytes"] == p.stat().st_size
    assert m["header"]["n_systems"] == 4 and m["note"] == 1
