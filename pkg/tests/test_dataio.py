import numpy as np
import pytest
from hypothesis import given, strategies as st

from targetapps import dataio
from targetapps.dataio import QueryRecord, UsageEvent

T0 = 1_520_000_000


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -- parsing ----------------------------------------------------------------------

def test_parse_query_line(tmp_path):
    p = _write(tmp_path / "q.tsv", ["user_id\ttimestamp\tquery\ttarget_app",
                                    "u1\t1520000000\tjoe bonamassa\tyoutube"])
    records, errors = dataio.parse_query_log(p)
    assert records == [QueryRecord("u1", 1520000000, "joe bonamassa", "youtube")]
    assert errors == []


def test_parse_query_empty_query_reported(tmp_path):
    p = _write(tmp_path / "q.tsv", ["user_id\ttimestamp\tquery\ttarget_app", "u1\t1520000000\t  \tyoutube"])
    records, errors = dataio.parse_query_log(p)
    assert records == []
    assert len(errors) == 1 and errors[0].line == 2


def test_parse_query_counts_conserved(tmp_path):
    p = _write(tmp_path / "q.tsv", ["user_id\ttimestamp\tquery\ttarget_app",
                                    "u1\t10\ta\tx", "u1\t11\tb\tx", "u2\tnot-a-time\tc\ty", "u2\t12\tc\ty"])
    records, errors = dataio.parse_query_log(p)
    assert len(records) == 3 and len(errors) == 1
    assert errors[0].line == 4 and "timestamp" in errors[0].message


def test_parse_wrong_field_count(tmp_path):
    p = _write(tmp_path / "q.tsv", ["user_id\ttimestamp\tquery\ttarget_app", "u1\t10\tq"])
    _, errors = dataio.parse_query_log(p)
    assert "fields" in errors[0].message


def test_parse_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        dataio.parse_query_log(tmp_path / "nope.tsv")


def test_parse_bad_header(tmp_path):
    p = _write(tmp_path / "q.tsv", ["user\ttime\tquery\tapp", "u1\t10\ta\tx"])
    with pytest.raises(dataio.SchemaError):
        dataio.parse_query_log(p)


def test_parse_usage_and_kinds(tmp_path):
    p = _write(tmp_path / "u.tsv", ["user_id\ttimestamp\tapp_id\tkind",
                                    "u1\t10\tmaps\tlaunch", "u1\t20\tmaps\tclose", "u1\t30\tmaps\tswipe",
                                    "u1\t-5\tmaps\tlaunch"])
    events, errors = dataio.parse_usage_log(p)
    assert [e.kind for e in events] == ["launch", "close"]
    assert [e.line for e in errors] == [4, 5]


def test_parse_stats(tmp_path):
    p = _write(tmp_path / "s.tsv", ["user_id\tsnapshot_timestamp\tapp_id\tseconds_in_past_24h",
                                    "u1\t100\tmaps\t12.5", "u1\t100\tmail\tinf", "u1\t100\tweb\tlots"])
    stats, errors = dataio.parse_stats_log(p)
    assert stats == [dataio.StatsRecord("u1", 100, "maps", 12.5)]
    assert len(errors) == 2


def test_writers_round_trip(tmp_path):
    qs = [QueryRecord("u1", 5, "katy perry", "youtube"), QueryRecord("u2", 7, "rain", "weather")]
    ev = [UsageEvent("u1", 5, "maps"), UsageEvent("u1", 9, "maps", "close")]
    st_ = [dataio.StatsRecord("u1", 5, "maps", 30.0), dataio.StatsRecord("u1", 5, "web", 0.25)]
    dataio.write_query_log(tmp_path / "q.tsv", qs)
    dataio.write_usage_log(tmp_path / "u.tsv", ev)
    dataio.write_stats_log(tmp_path / "s.tsv", st_)
    assert dataio.parse_query_log(tmp_path / "q.tsv") == (qs, [])
    assert dataio.parse_usage_log(tmp_path / "u.tsv") == (ev, [])
    assert dataio.parse_stats_log(tmp_path / "s.tsv") == (st_, [])


def test_category_map(tmp_path):
    p = _write(tmp_path / "c.tsv", ["app_id\tcategory", "maps\tTravel", "mail\tCommunication"])
    assert dataio.parse_category_map(p) == {"maps": "Travel", "mail": "Communication"}


@pytest.mark.parametrize("kwargs", [dict(kind="open"), dict(timestamp=0), dict(app_id="")])
def test_usage_event_invariants(kwargs):
    base = dict(user_id="u", timestamp=1, app_id="a", kind="launch")
    with pytest.raises(ValueError):
        UsageEvent(**{**base, **kwargs})


# -- dedup ------------------------------------------------------------------------

def _ev(*pairs, user="u"):
    return [UsageEvent(user, T0 + t, a) for t, a in pairs]


def test_dedup_within_minute():
    out = dataio.dedup_usage(_ev((0, "a"), (30, "a")))
    assert [(e.timestamp - T0, e.app_id) for e in out] == [(0, "a")]


def test_dedup_strict_boundary():
    assert len(dataio.dedup_usage(_ev((0, "a"), (60, "a")))) == 2


def test_dedup_different_apps():
    assert len(dataio.dedup_usage(_ev((0, "a"), (10, "b")))) == 2


def test_dedup_chain_compares_consecutive_raw_events():
    # 0, 40, 80: each gap < 60 so the whole run collapses to t=0
    out = dataio.dedup_usage(_ev((0, "a"), (40, "a"), (80, "a")))
    assert [e.timestamp - T0 for e in out] == [0]


def test_dedup_per_user():
    events = _ev((0, "a"), user="u1") + _ev((10, "a"), user="u2")
    assert len(dataio.dedup_usage(events)) == 2


def test_dedup_rejects_unsorted():
    with pytest.raises(ValueError):
        dataio.dedup_usage(_ev((30, "a"), (0, "a")))
    with pytest.raises(ValueError):
        dataio.dedup_usage(_ev((0, "a"), user="u2") + _ev((0, "a"), user="u1"))


event_lists = st.lists(st.tuples(st.sampled_from(["u1", "u2"]), st.integers(1, 2000), st.sampled_from("abc")),
                       max_size=40)


@given(event_lists)
def test_dedup_idempotent(raw):
    events = dataio.sort_events(UsageEvent(u, t, a) for u, t, a in raw)
    once = dataio.dedup_usage(events)
    assert dataio.dedup_usage(once) == once
    assert set(once) <= set(events)


# -- sessions ---------------------------------------------------------------------

def _times(ts, user="u"):
    return [UsageEvent(user, T0 + t, "a") for t in ts]


def test_sessions_split_on_large_gap():
    s = dataio.segment_sessions(_times([0, 240, 600]))
    assert [[e.timestamp - T0 for e in x.items] for x in s] == [[0, 240], [600]]


def test_sessions_gap_exactly_300_stays():
    assert len(dataio.segment_sessions(_times([0, 300]))) == 1


def test_single_item_session():
    s = dataio.segment_sessions(_times([5]))
    assert len(s) == 1 and s[0].start == s[0].end == T0 + 5


def test_sessions_reject_unsorted():
    with pytest.raises(ValueError):
        dataio.segment_sessions(_times([10, 5]))


@given(st.lists(st.tuples(st.sampled_from(["u1", "u2", "u3"]), st.integers(1, 5000)), max_size=50))
def test_session_partition_property(raw):
    items = dataio.sort_events(UsageEvent(u, t, "a") for u, t in raw)
    sessions = dataio.segment_sessions(items)
    flat = [e for s in sessions for e in s.items]
    assert flat == items
    ids = [s.session_id for s in sessions]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    for s in sessions:
        assert s.end >= s.start
        assert all(b.timestamp - a.timestamp <= 300 for a, b in zip(s.items, s.items[1:]))
        assert all(e.user_id == s.user_id for e in s.items)


# -- splits -----------------------------------------------------------------------

def _queries(n, user="u"):
    return [QueryRecord(user, T0 + i, f"q{i}", "app") for i in range(n)]


def test_istas_r_counts():
    split = dataio.split_istas_r(_queries(100), seed=3)
    assert split.sizes() == {"train": 70, "validation": 10, "test": 20}


def test_istas_r_deterministic_and_seed_sensitive():
    recs = _queries(100)
    assert dataio.split_istas_r(recs, seed=5) == dataio.split_istas_r(recs, seed=5)
    assert dataio.split_istas_r(recs, seed=5).train != dataio.split_istas_r(recs, seed=6).train


def test_istas_r_empty():
    with pytest.raises(ValueError):
        dataio.split_istas_r([], seed=0)


def test_bad_ratios():
    with pytest.raises(ValueError):
        dataio.split_istas_r(_queries(10), ratios=(0.5, 0.1, 0.1))


def test_istas_t_ten_queries():
    split = dataio.split_istas_t(_queries(10))
    assert split.train == list(range(7)) and split.validation == [7] and split.test == [8, 9]


def test_istas_t_single_query_goes_to_train():
    split = dataio.split_istas_t(_queries(1))
    assert split.sizes() == {"train": 1, "validation": 0, "test": 0}


def test_istas_t_users_independent():
    recs = _queries(10, "a") + _queries(3, "b")
    split = dataio.split_istas_t(recs)
    assert split.sizes() == {"train": 7 + 2, "validation": 1 + 0, "test": 2 + 1}


def test_lsapp_twenty_records():
    events = [UsageEvent("u", T0 + i, "a") for i in range(20)]
    assert dataio.split_lsapp(events).sizes() == {"train": 14, "validation": 2, "test": 4}


def test_lsapp_three_records_empty_validation():
    events = [UsageEvent("u", T0 + i, "a") for i in range(3)]
    assert dataio.split_lsapp(events).sizes() == {"train": 2, "validation": 0, "test": 1}


@pytest.mark.parametrize("n,expected", [(0, (0, 0, 0)), (1, (1, 0, 0)), (2, (1, 0, 1)), (7, (4, 1, 2)),
                                        (10, (7, 1, 2)), (99, (69, 10, 20))])
def test_chronological_counts(n, expected):
    assert dataio.chronological_counts(n) == expected


@given(st.lists(st.tuples(st.sampled_from(["u1", "u2", "u3"]), st.integers(1, 10_000)), min_size=1, max_size=60),
       st.integers(0, 2 ** 31))
def test_split_partition_and_chronology(raw, seed):
    recs = [QueryRecord(u, t, "q", "a") for u, t in raw]
    for split in (dataio.split_istas_r(recs, seed=seed), dataio.split_istas_t(recs), dataio.split_lsapp(recs)):
        parts = split.train + split.validation + split.test
        assert sorted(parts) == list(range(len(recs)))
    split = dataio.split_istas_t(recs)
    for user in {u for u, _ in raw}:
        tr = [recs[i].timestamp for i in split.train if recs[i].user_id == user]
        te = [recs[i].timestamp for i in split.test if recs[i].user_id == user]
        if tr and te:
            assert max(tr) <= min(te)


def test_split_save_load(tmp_path):
    split = dataio.split_istas_r(_queries(30), seed=7)
    split.save(tmp_path / "s.tsv")
    assert dataio.DatasetSplit.load(tmp_path / "s.tsv") == split
    header = (tmp_path / "s.tsv").read_text().splitlines()[0]
    assert '"seed": 7' in header and '"name": "istas_r"' in header


def test_user_segments_chronological():
    events = [UsageEvent("u", T0 + t, "a") for t in (5, 1, 3)] + [UsageEvent("v", T0, "b")]
    split = dataio.DatasetSplit("lsapp", [0, 1, 2, 3], [], [])
    seg = dataio.user_segments(events, split, "train")
    assert [e.timestamp - T0 for e in seg["u"]] == [1, 3, 5]
    assert list(seg) == ["u", "v"]


# -- tokens and vocabulary ----------------------------------------------------------

@pytest.mark.parametrize("text,tokens", [
    ("Katy Perry hits", ["katy", "perry", "hits"]),
    ("  hello ", ["hello"]),
    ("A.B c", ["a.b", "c"]),
    ("¿Dónde está? «hola»", ["dónde", "está", "hola"]),
    ("... !!", []),
])
def test_tokenize(text, tokens):
    assert dataio.tokenize(text) == tokens


def test_vocabulary_bijection_and_df():
    vocab = dataio.Vocabulary.build([["b", "a", "a"], ["c", "a"]], reserved=("<unk>",), unk="<unk>")
    assert vocab.tokens == ["<unk>", "a", "b", "c"]
    assert [vocab.id(t) for t in vocab.tokens] == list(range(len(vocab)))
    assert vocab.doc_freq == {"a": 2, "b": 1, "c": 1}
    assert vocab.id("zzz") == 0
    assert dataio.Vocabulary.from_dict(vocab.to_dict()).tokens == vocab.tokens


def test_vocabulary_min_count_and_missing():
    vocab = dataio.Vocabulary.build([["a", "a", "b"]], min_count=2)
    assert vocab.tokens == ["a"]
    with pytest.raises(KeyError):
        vocab.id("b")
    with pytest.raises(ValueError):
        dataio.Vocabulary(["x", "x"])


# -- app filtering ------------------------------------------------------------------

def test_top_apps_filter():
    events = _ev((0, "a"), (1, "b"), (2, "a"), (3, "c"), (4, "b"), (5, "a"))
    assert dataio.top_apps(events, 2) == ["a", "b"]
    assert {e.app_id for e in dataio.filter_top_apps(events, 2)} == {"a", "b"}
    assert dataio.filter_top_apps(events, None) == events


def test_launches_only():
    events = [UsageEvent("u", T0, "a"), UsageEvent("u", T0 + 1, "a", "close")]
    assert dataio.launches(events) == events[:1]


def test_group_by_user_preserves_order():
    recs = _queries(2, "b") + _queries(1, "a")
    g = dataio.group_by_user(recs)
    assert list(g) == ["b", "a"] and len(g["b"]) == 2


def test_sort_events_stable():
    recs = [QueryRecord("b", 2, "x", "a"), QueryRecord("a", 5, "y", "a"), QueryRecord("a", 1, "z", "a")]
    assert [r.query for r in dataio.sort_events(recs)] == ["z", "y", "x"]
    assert np.all(np.diff([r.timestamp for r in dataio.sort_events(recs) if r.user_id == "a"]) >= 0)
