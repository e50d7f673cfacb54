import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpg import _kernels_py, kernels
from vpg.ann import AnnIndex, ExactIndex, HnswParams, build_ann, collapse_duplicates, draw_levels, query_ann
from vpg.errors import DimensionError


def recall(index, exact, queries, k, ef):
    got = index.search_batch(queries, k, ef)
    truth = exact.search_batch(queries, k)
    return np.mean([len({a for a, _ in g} & {b for b, _ in t}) / k for g, t in zip(got, truth)])


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(42)
    x = rng.standard_normal((3000, 32)).astype(np.float32)
    q = rng.standard_normal((100, 32)).astype(np.float32)
    return x, q


@pytest.fixture(scope="module")
def built(corpus):
    x, _ = corpus
    return build_ann(enumerate(x), HnswParams(M=12, ef_construction=100)), ExactIndex(list(range(len(x))), x)


def test_params_validation():
    with pytest.raises(ValueError):
        HnswParams(M=1)
    with pytest.raises(ValueError):
        HnswParams(ef_search=0)


def test_single_entry_always_returned():
    idx = build_ann([("only", np.array([1.0, 2.0]))])
    assert idx.search(np.array([100.0, -3.0]), 5) == [("only", pytest.approx(np.hypot(99, 5), rel=1e-6))]


def test_empty_index():
    idx = build_ann([])
    assert len(idx) == 0 and idx.search(np.zeros(3), 3) == []


def test_dimension_errors(built):
    with pytest.raises(DimensionError):
        build_ann([("a", np.zeros(3)), ("b", np.zeros(4))])
    with pytest.raises(DimensionError):
        built[0].search(np.zeros(5), 3)
    with pytest.raises(ValueError):
        build_ann([("a", np.zeros(3)), ("a", np.ones(3))])


def test_self_retrieval(corpus, built):
    x, _ = corpus
    idx = built[0]
    for i in range(0, 3000, 97):
        key, d = idx.search(x[i], 1)[0]
        assert key == i and d == 0.0


def test_k_larger_than_corpus():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 4))
    idx = build_ann(enumerate(x))
    res = query_ann(idx, np.zeros(4), 100)
    assert sorted(k for k, _ in res) == list(range(20))
    assert [d for _, d in res] == sorted(d for _, d in res)


def test_recall_and_monotone_in_ef(corpus, built):
    _, q = corpus
    idx, exact = built
    rs = [recall(idx, exact, q, 10, ef) for ef in (16, 64, 128, 256)]
    assert rs == sorted(rs)
    assert rs[2] >= 0.95


def test_deterministic_repeat_and_rebuild(corpus, built):
    x, q = corpus
    idx = built[0]
    assert idx.search_batch(q, 10) == idx.search_batch(q, 10)
    again = build_ann(enumerate(x), HnswParams(M=12, ef_construction=100))
    assert np.array_equal(again.links, idx.links)


def test_search_batch_matches_single(corpus, built):
    _, q = corpus
    idx = built[0]
    assert idx.search_batch(q[:5], 7) == [idx.search(row, 7) for row in q[:5]]


def test_save_load_round_trip(tmp_path, corpus, built):
    _, q = corpus
    idx = built[0]
    idx.save(tmp_path / "i.vpga")
    assert (tmp_path / "i.vpga").read_bytes()[:5] == b"VPGA1"
    back = AnnIndex.load(tmp_path / "i.vpga")
    assert back.search_batch(q, 10) == idx.search_batch(q, 10)
    assert back.params == idx.params
    (tmp_path / "bad").write_bytes(b"NOPE!")
    with pytest.raises(ValueError):
        AnnIndex.load(tmp_path / "bad")


def test_duplicate_vectors_share_nodes(tmp_path):
    rng = np.random.default_rng(3)
    base = rng.standard_normal((50, 8)).astype(np.float32)
    rows = [(f"k{i}", base[i % 50]) for i in range(400)]
    idx = build_ann(rows)
    assert idx.n_nodes == 50 and len(idx) == 400
    exact = ExactIndex.from_entries(rows)
    for j in range(50):
        got = idx.search(base[j], 8)
        assert got == exact.search(base[j], 8)
        assert all(d == 0.0 for _, d in got)
    idx.save(tmp_path / "d.vpga")
    back = AnnIndex.load(tmp_path / "d.vpga")
    assert back.n_nodes == 50 and back.search(base[7], 20) == idx.search(base[7], 20)


@given(st.lists(st.integers(0, 5), max_size=30))
def test_collapse_duplicates_groups(values):
    x = np.asarray(values, dtype=np.float32).reshape(-1, 1)
    g = collapse_duplicates(x)
    for i in range(len(values)):
        for j in range(len(values)):
            assert (g[i] == g[j]) == (values[i] == values[j])
    if values:
        assert sorted(set(g.tolist())) == list(range(len(set(values))))


def test_levels_seeded():
    assert np.array_equal(draw_levels(1000, 16, 5), draw_levels(1000, 16, 5))
    assert draw_levels(10000, 16, 5).mean() < 0.2


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(1, 10), st.integers(0, 10_000))
def test_small_indexes_agree_with_exact(n, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 6)).astype(np.float32)
    idx = build_ann(enumerate(x), M=4, ef_construction=64)
    exact = ExactIndex(list(range(n)), x)
    q = rng.standard_normal(6).astype(np.float32)
    got = idx.search(q, k, ef_search=64)
    assert len(got) == min(k, n)
    assert [d for _, d in got] == sorted(d for _, d in got)
    assert [i for i, _ in got] == [i for i, _ in exact.search(q, k)]


# -- backend parity ---------------------------------------------------------


@pytest.mark.skipif("cython" not in kernels.backends(), reason="extension not built")
def test_cython_and_python_kernels_agree():
    cy = kernels.backends()["cython"]
    rng = np.random.default_rng(9)
    x = rng.standard_normal((400, 16)).astype(np.float32)
    lv = draw_levels(400, 8, 1)
    a = cy.hnsw_build(x, lv, 8, 40)
    b = _kernels_py.hnsw_build(x, lv, 8, 40)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2:] == b[2:]
    q = rng.standard_normal((30, 16)).astype(np.float32)
    ia, da = cy.hnsw_search(x, *a, q, 10, 32)
    ib, db = _kernels_py.hnsw_search(x, *b, q, 10, 32)
    assert np.array_equal(ia, ib)
    np.testing.assert_allclose(da, db, rtol=1e-5, atol=1e-6)
    codes = rng.integers(0, 2**63, size=(20, 16), dtype=np.uint64)
    assert np.array_equal(cy.hamming_many(codes[0], codes), _kernels_py.hamming_many(codes[0], codes))


def test_backend_flag_reported():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in kernels.backends()


def test_pure_python_env_switch():
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c", "import vpg; print(vpg.BACKEND)"],
        env={"VPG_PURE_PYTHON": "1", "PATH": ""},
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "python"
