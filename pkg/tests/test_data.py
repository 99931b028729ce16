import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infodeficit.data import (
    LogFormatError,
    LogRecord,
    RetentionExample,
    Session,
    SessionStep,
    SplitSpec,
    Vocabulary,
    build_vocab,
    dump_jsonl,
    failed_rule,
    filter_pairs,
    filter_queries,
    load_jsonl,
    make_examples,
    pair_tallies,
    parse_log_line,
    read_log,
    segment_sessions,
    sessions_to_records,
    split_sessions,
    tokenize,
    write_log,
)
from infodeficit.synthetic import (
    SyntheticConfig,
    bayes_predict,
    gen_synthetic,
    retention_probability,
)


def rec(user, query, ts, url=None):
    return LogRecord(user, query, ts, url)


def sess(*queries, clicks=None):
    clicks = clicks or {}
    return Session("u", [SessionStep(q, tokenize(q), list(clicks.get(i, [])))
                         for i, q in enumerate(queries)], 0)


# ---------------------------------------------------------------- tokenize / parse


def test_tokenize_examples():
    assert tokenize("Check Engine LIGHT") == ["check", "engine", "light"]
    assert tokenize("honda  accord") == ["honda", "accord"]
    assert tokenize("t-shirt v2.0") == ["t-shirt", "v2.0"]
    assert tokenize("what's up, doc?") == ["what", "s", "up", "doc"]
    assert tokenize("  ") == []


def test_parse_log_line_and_errors():
    r = parse_log_line("u1\tcheap flights\t100\t-\n", 1)
    assert r == LogRecord("u1", "cheap flights", 100, None)
    assert parse_log_line("u1\tq\t5\thttp://a.b\n", 1).clicked_url == "http://a.b"
    with pytest.raises(LogFormatError, match="line 7"):
        parse_log_line("u1\tq\t5\n", 7)
    with pytest.raises(LogFormatError, match="line 3"):
        parse_log_line("u1\tq\tnoon\t-", 3)
    with pytest.raises(LogFormatError):
        parse_log_line("u1\t  \t5\t-", 1)
    with pytest.raises(LogFormatError):
        parse_log_line("u1\tq\t-5\t-", 1)


def test_read_log_reports_line_number(tmp_path):
    path = tmp_path / "log.tsv"
    path.write_text("u\ta b\t1\t-\nu\ta c\t2\t-\nbroken row\n", encoding="utf-8")
    with pytest.raises(LogFormatError, match="line 3"):
        list(read_log(path))


def test_log_round_trip(tmp_path):
    rows = [rec("u", "a b", 1, "x.com"), rec("u", "a b", 1, "y.com"), rec("v", "c d", 9)]
    write_log(rows, tmp_path / "l.tsv")
    assert list(read_log(tmp_path / "l.tsv")) == rows


# ---------------------------------------------------------------- sessions


def test_segmentation_examples():
    s = segment_sessions([rec("u", "a b", 0), rec("u", "a c", 600)])
    assert len(s) == 1 and len(s[0].steps) == 2
    s = segment_sessions([rec("u", "a b", 0), rec("u", "a c", 31 * 60)])
    assert len(s) == 2
    s = segment_sessions([rec("u", "a b", 0, "x.com"), rec("u", "a b", 0, "y.com")])
    assert len(s) == 1 and s[0].steps[0].clicks == ["x.com", "y.com"]


def test_segmentation_gap_is_inclusive_and_user_change_splits():
    s = segment_sessions([rec("u", "a b", 0), rec("u", "a c", 1800), rec("v", "a d", 1801)])
    assert [len(x.steps) for x in s] == [2, 1]


def test_segmentation_rejects_unsorted():
    with pytest.raises(LogFormatError):
        segment_sessions([rec("u", "a", 10), rec("u", "b", 5)])
    with pytest.raises(LogFormatError):
        segment_sessions([rec("u", "a", 1), rec("v", "b", 2), rec("u", "c", 3)])


def test_sessions_to_records_round_trip():
    sessions = [sess("a b", "a c", clicks={0: ["x.com", "y.com"]})]
    back = segment_sessions(sessions_to_records(sessions))
    assert [(st.query, st.clicks) for st in back[0].steps] == \
        [(st.query, st.clicks) for st in sessions[0].steps]


# ---------------------------------------------------------------- filters


def test_filter_examples():
    pair = (tokenize("honda accord check engine light"), tokenize("check engine light meaning"))
    assert failed_rule(*pair) is None
    assert failed_rule(tokenize("www.amazon.com deals"), tokenize("amazon deals")) == \
        "navigational"
    assert failed_rule(["cars"], ["used", "cars"]) == "single_word"
    assert failed_rule(["a", "b"], ["a", "b"]) == "identical"
    assert failed_rule(["a", "b"], ["c", "d"]) == "no_overlap"
    # only the current query is checked for navigational markers
    assert failed_rule(["amazon", "deals"], ["amazon", "com"]) is None


def test_filter_queries_and_tallies():
    s = sess("honda accord check engine light", "check engine light meaning",
             "check engine light meaning", "cars", "used cars")
    assert filter_queries(s) == [0]
    t = pair_tallies([s])
    assert t == {"kept": 1, "identical": 1, "single_word": 1, "navigational": 0,
                 "no_overlap": 1}


pairs = st.lists(st.tuples(st.lists(st.sampled_from(["a", "b", "www", "c"]), max_size=3),
                           st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=3)),
                 max_size=8)


@settings(max_examples=100, deadline=None)
@given(pairs)
def test_filters_are_idempotent(ps):
    once = filter_pairs(ps)
    assert filter_pairs(once) == once


# ---------------------------------------------------------------- vocabulary


def test_build_vocab_examples():
    s = [sess("a a a", "b b c")]
    v = build_vocab(s, 4)
    assert v.word_to_id == {"<pad>": 0, "<oov>": 1, "a": 2, "b": 3}
    assert v.lookup("c") == 1 and v.lookup("zzz") == 1
    tie = build_vocab([sess("c b")], 3)
    assert tie.id_to_word[2] == "b"
    with pytest.raises(ValueError):
        build_vocab(s, 2)


def test_vocab_round_trip():
    v = build_vocab([sess("x y y z")], 10)
    text = v.dumps()
    assert text.splitlines()[:3] == ["<pad>\t0", "<oov>\t1", "y\t2"]
    assert Vocabulary.loads(text).id_to_word == v.id_to_word
    # the pad token is never produced by lookup
    assert v.lookup("<pad>") == 1


# ---------------------------------------------------------------- examples


def test_make_examples_window():
    vocab = build_vocab([sess("a b", "a c", "a d")], 10)
    exs = make_examples([sess("a b", "a c", "a d")], vocab, context=3)
    assert len(exs) == 1
    assert exs[0].words == ["a", "c"] and len(exs[0].past) == 1
    assert exs[0].labels == [1, 0]


def test_make_examples_context_most_recent_first():
    s = sess("q a", "q b", "q c", "q d", "q e", "q f", clicks={3: ["u.com"]})
    vocab = build_vocab([s], 20)
    exs = make_examples([s], vocab, context=2)
    last = exs[-1]
    assert last.words == ["q", "e"]
    assert [vocab.id_to_word[i[1]] for i in (p.query_ids for p in last.past)] == ["d", "c"]
    assert last.past[0].url_chars and not last.past[1].url_chars


def test_engine_light_pair_labels_through_examples():
    s = sess("car trouble light", "honda accord check engine light",
             "check engine light meaning")
    ex = make_examples([s], build_vocab([s], 50))[0]
    assert ex.labels == [0, 0, 1, 1, 1]


def test_example_invariants_on_synthetic():
    sessions, _ = gen_synthetic(SyntheticConfig(n_sessions=200, seed=3))
    vocab = build_vocab(sessions, 1000)
    for e in make_examples(sessions, vocab):
        assert len(e.labels) == len(e.current_ids) >= 2
        assert 1 in e.labels
        assert 1 <= len(e.past) <= 3


def test_example_record_round_trip():
    s = sess("a b", "a c", "a d", clicks={0: ["x.org"]})
    for e in make_examples([s], build_vocab([s], 9)):
        line = dump_jsonl([e.to_record()])
        assert RetentionExample.from_record(load_jsonl(line)[0]) == e


# ---------------------------------------------------------------- splits


def test_split_examples():
    sessions = [Session(f"u{i}", [], i) for i in range(10)]
    a = split_sessions(sessions, SplitSpec(seed=4))
    assert [len(x) for x in a] == [8, 1, 1]
    assert a == split_sessions(sessions, SplitSpec(seed=4))
    keys = [s.key() for part in a for s in part]
    assert sorted(keys) == sorted(s.key() for s in sessions)
    with pytest.raises(ValueError):
        split_sessions(sessions[:2])
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)


# ---------------------------------------------------------------- synthetic


def test_synthetic_is_deterministic(tmp_path):
    cfg = SyntheticConfig(n_sessions=50, seed=9)
    for name in ("a", "b"):
        write_log(sessions_to_records(gen_synthetic(cfg)[0]), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def _uncovered_gap(strength, n=1500):
    """Retention rate of not-yet-served facet words minus that of modifiers."""
    cfg = SyntheticConfig(n_sessions=n, seed=11, deficit_strength=strength)
    sessions, lex = gen_synthetic(cfg)
    vocab = build_vocab(sessions, 1000)
    kept = {"need": [], "noise": []}
    for e in make_examples(sessions, vocab):
        served = set()
        for p in e.past[: cfg.window]:
            text = "".join(chr(c - 3) for c in p.url_chars if c >= 3)
            served.update(w for w in lex.facets if f"-{w}" in text)
        for w, y in zip(e.words, e.labels):
            kind = lex.kind(w)
            if kind == "facet" and w not in served:
                kept["need"].append(y)
            elif kind == "modifier":
                kept["noise"].append(y)
    return np.mean(kept["need"]) - np.mean(kept["noise"])


def test_synthetic_need_words_retained_more_as_strength_grows():
    gaps = [_uncovered_gap(s) for s in (0.0, 0.5, 1.0)]
    assert gaps[0] > 0
    assert gaps[0] < gaps[1] < gaps[2]


def test_zero_strength_makes_clicks_irrelevant():
    cfg = SyntheticConfig(deficit_strength=0.0)
    assert retention_probability("facet", True, cfg) == retention_probability("facet", False,
                                                                             cfg)


def test_bayes_oracle_beats_majority():
    cfg = SyntheticConfig(n_sessions=800, seed=2)
    sessions, lex = gen_synthetic(cfg)
    exs = make_examples(sessions, build_vocab(sessions, 1000))
    bayes = np.mean([np.mean([p == y for p, y in zip(bayes_predict(e, lex, cfg), e.labels)])
                     for e in exs])
    majority = np.mean([np.mean(e.labels) for e in exs])
    assert bayes > majority + 0.15
