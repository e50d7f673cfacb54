import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import make_entry, sig
from vpg.errors import ExtractionError, StoreError
from vpg.feature_store import FeatureStore, decode_entry, encode_entry, read_scenes_jsonl, scene_from_json, scene_to_json


def test_backfill_empty(store):
    assert store.backfill([]) == 0
    assert list(store.scan()) == []


def test_backfill_10k_read_back(tmp_path):
    entries = [make_entry(i, n_objects=i % 3) for i in range(10_000)]
    with FeatureStore(tmp_path / "s") as st_:
        assert st_.backfill(entries) == 10_000
        for e in entries:
            assert st_.get(e.signature).signature == e.signature
    with FeatureStore(tmp_path / "s") as st_:
        assert len(st_) == 10_000
        got = st_.get(entries[1234].signature)
        assert len(got.objects) == entries[1234].objects.__len__()
        assert np.array_equal(got.full_embedding, entries[1234].quantized().full_embedding)


def test_backfill_last_write_wins(store):
    store.backfill([make_entry(1, n_objects=1)])
    store.backfill([make_entry(1, n_objects=3)])
    assert len(store.get(sig(1)).objects) == 3
    assert len(store) == 1


def test_backfill_keeps_supplied_ingested_at(store):
    store.backfill([make_entry(1, ingested_at=5)])
    assert store.get(sig(1)).ingested_at == 5
    store.backfill([make_entry(1, ingested_at=9)])
    assert store.get(sig(1)).ingested_at == 9


def test_apply_update_read_your_writes(store):
    acked = store.apply_update(make_entry(7, n_objects=2))
    got = store.get(sig(7))
    assert got == acked
    assert got.source == "stream"
    assert got.ingested_at > 0


def test_concurrent_readers_never_see_torn_entries(store):
    old = make_entry(1, n_objects=1, seed=1)
    new = make_entry(1, n_objects=4, seed=2)
    store.apply_update(old)
    old_q, new_q = old.quantized(), new.quantized()
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            e = store.get(sig(1))
            if not (np.array_equal(e.full_embedding, old_q.full_embedding) and len(e.objects) == 1) and not (
                np.array_equal(e.full_embedding, new_q.full_embedding) and len(e.objects) == 4
            ):
                bad.append(e)

    threads = [threading.Thread(target=reader) for _ in range(8)]
    for t in threads:
        t.start()
    for i in range(300):
        store.apply_update(new if i % 2 else old)
    stop.set()
    for t in threads:
        t.join()
    assert not bad


def test_get_or_extract_write_back(store):
    calls = []

    def extractor(s):
        calls.append(s)
        return make_entry(99)

    store.backfill([make_entry(1)])
    assert store.get_or_extract(sig(1), extractor)[1] is True
    entry, hit = store.get_or_extract(sig(2), extractor)
    assert not hit and entry.source == "online_fallback" and entry.signature == sig(2)
    assert store.get_or_extract(sig(2), extractor)[1] is True
    assert calls == [sig(2)]
    m = store.metrics
    assert (m.lookups, m.hits, m.fallback_extractions) == (3, 2, 1)


def test_hit_rate_992_of_1000(store):
    store.backfill(make_entry(i) for i in range(992))
    for i in range(1000):
        store.get_or_extract(sig(i), lambda s: make_entry(0))
    assert store.metrics.hit_rate == pytest.approx(0.992, abs=0)
    assert store.metrics.hits == 992


def test_extractor_failure_counts_miss(store):
    def boom(s):
        raise RuntimeError("model down")

    with pytest.raises(ExtractionError):
        store.get_or_extract(sig(5), boom)
    assert store.metrics.lookups == 1 and store.metrics.misses == 1
    assert store.get(sig(5)) is None


def test_concurrent_fallback_extracts_once(store):
    calls = []
    gate = threading.Event()

    def slow(s):
        calls.append(s)
        gate.wait(2)
        return make_entry(3)

    results = []
    threads = [threading.Thread(target=lambda: results.append(store.get_or_extract(sig(3), slow))) for _ in range(16)]
    for t in threads:
        t.start()
    gate.set()
    for t in threads:
        t.join()
    assert len(calls) == 1
    assert len({r[0].signature for r in results}) == 1


def test_scan_predicate_and_order(store):
    entries = [make_entry(i, n_objects=i % 5) for i in range(100)]
    store.backfill(entries)
    got = list(store.scan(lambda e: len(e.objects) in (1, 3)))
    expected = sorted(e.signature for e in entries if len(e.objects) in (1, 3))
    assert [e.signature for e in got] == expected and len(got) == 40
    assert [e.signature for e in store.scan()] == sorted(e.signature for e in entries)


@settings(max_examples=25, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.integers(0, 50), max_size=40))
def test_scan_backfill_bijection(tmp_path_factory, ids):
    with FeatureStore(tmp_path_factory.mktemp("bij")) as s:
        s.backfill(make_entry(i) for i in ids)
        assert [e.signature for e in s.scan()] == sorted({sig(i) for i in ids})


def test_durability_reopen(tmp_path):
    with FeatureStore(tmp_path / "d") as s:
        s.backfill([make_entry(i) for i in range(50)])
        s.apply_update(make_entry(1000, n_objects=2))
        s.get_or_extract(sig(2000), lambda x: make_entry(2000))
    with FeatureStore(tmp_path / "d") as s:
        assert len(s) == 52
        assert s.get(sig(2000)).source == "online_fallback"
        assert len(s.get(sig(1000)).objects) == 2


def test_torn_tail_is_truncated(tmp_path):
    with FeatureStore(tmp_path / "t") as s:
        s.backfill([make_entry(i) for i in range(5)])
    seg = sorted((tmp_path / "t" / "segments").glob("*.log"))[-1]
    with open(seg, "ab") as fh:
        fh.write(b"\x40\x00\x00\x00garbage")
    with FeatureStore(tmp_path / "t") as s:
        assert len(s) == 5
        s.apply_update(make_entry(9))
    with FeatureStore(tmp_path / "t") as s:
        assert len(s) == 6


def test_compaction_preserves_live_entries(tmp_path):
    with FeatureStore(tmp_path / "c", compact_min_bytes=0, compact_dead_ratio=0.9) as s:
        for round_ in range(3):
            s.backfill([make_entry(i, seed=round_) for i in range(20)])
        s.compact()
        assert s.stats()["dead_bytes"] == 0
        kept = {e.signature: e for e in s.scan()}
    with FeatureStore(tmp_path / "c") as s:
        assert {e.signature for e in s.scan()} == set(kept)
        assert np.array_equal(s.get(sig(3)).full_embedding, make_entry(3, seed=2).quantized().full_embedding)


def test_closed_store_rejects_writes(tmp_path):
    s = FeatureStore(tmp_path / "x")
    s.close()
    with pytest.raises(StoreError):
        s.apply_update(make_entry(1))


def test_unknown_schema_tag():
    raw = bytearray(encode_entry(make_entry(1)))
    raw[0] = 99
    with pytest.raises(StoreError):
        decode_entry(bytes(raw))


def test_jsonl_round_trip_and_errors(tmp_path):
    import json

    e = make_entry(4, n_objects=2)
    back, q = scene_from_json(scene_to_json(e)), e.quantized()
    assert back.signature == e.signature
    assert np.array_equal(back.full_embedding, q.full_embedding)
    assert [o.box for o in back.objects] == [o.box for o in e.objects]
    assert all(np.array_equal(a.embedding, b.embedding) for a, b in zip(back.objects, q.objects))
    p = tmp_path / "in.jsonl"
    p.write_text(json.dumps(scene_to_json(e)) + "\n{not json\n")
    it = read_scenes_jsonl(p)
    next(it)
    with pytest.raises(ValueError, match=":2:"):
        next(it)
