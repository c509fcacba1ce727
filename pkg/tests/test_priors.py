import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdcl.core import Modality, seeded_rng
from bdcl.priors import (
    InvalidContent, PriorRecord, Prosody, ProviderUnavailable, SampleMeta, SchemaError,
    StubTraceProvider, UnknownClass, au_support, decide, featurize, get_provider, ingest,
    load_au_table, load_lexicons, score_modality, token_bucket, validate, write_records,
)

TABLE = load_au_table()
LEX = load_lexicons()
NAMES = TABLE.names


def cls(name):
    return NAMES.index(name)


def oracle_scores(record):
    """Per-modality scores by plain set and list arithmetic."""
    vis = [len(set(record.au_ids) & set(s)) / max(1, len(s)) for s in TABLE.support]
    lv = record.prosody.levels()
    aud = [sum(1 for a, b in zip(lv, p) if a == b) / 3 for p in LEX.prosody]
    toks = [t.lower() for t in record.tokens]
    txt = [sum(1 for t in toks if t in kw) / max(1, len(toks)) for kw in LEX.keywords]
    return vis, aud, txt


def oracle_decide(record):
    scores = oracle_scores(record)
    best, best_val = None, None
    for c in range(TABLE.num_classes):
        val = sum(record.weights[m] * scores[m][c] for m in range(3))
        if best is None or val > best_val:
            best, best_val = c, val
    return best


def random_record(rng, sid="r"):
    words = sorted(set().union(*LEX.keywords)) + list(LEX.filler)
    w = rng.dirichlet(np.ones(3))
    return PriorRecord(
        sample_id=sid,
        au_ids=frozenset(int(a) for a in rng.choice(np.arange(1, 45), size=rng.integers(0, 8),
                                                    replace=False)),
        prosody=Prosody(*(int(v) for v in rng.integers(0, 3, size=3))),
        tokens=tuple(str(t) for t in rng.choice(words, size=rng.integers(0, 6))),
        weights=tuple(float(x) for x in w / w.sum()),
    )


# ---------------------------------------------------------------- tables and scoring

def test_au_support_examples():
    assert au_support(cls("happy"), TABLE) == {6, 12}
    assert au_support(cls("neutral"), TABLE) == frozenset()
    with pytest.raises(UnknownClass):
        au_support(TABLE.num_classes, TABLE)


def test_visual_scores():
    rec = PriorRecord("x", au_ids=TABLE.support[cls("happy")])
    s = score_modality(Modality.VISUAL, rec, TABLE, LEX)
    assert s[cls("happy")] == 1.0
    disjoint = [c for c, sup in enumerate(TABLE.support) if sup and not sup & {6, 12}]
    assert all(s[c] < 1.0 for c in disjoint)
    assert not score_modality(Modality.VISUAL, PriorRecord("x"), TABLE, LEX).any()
    mixed = PriorRecord("x", au_ids=frozenset({6, 12, 4}))
    np.testing.assert_array_equal(score_modality(Modality.VISUAL, mixed, TABLE, LEX),
                                  oracle_scores(mixed)[0])


def test_score_rejects_bad_content():
    with pytest.raises(InvalidContent):
        score_modality(Modality.VISUAL, PriorRecord("x", au_ids=frozenset({45})), TABLE, LEX)
    with pytest.raises(InvalidContent):
        score_modality(Modality.AUDIO, PriorRecord("x", prosody=Prosody(3, 0, 0)), TABLE, LEX)


def test_audio_and_text_scores_match_oracle():
    rec = PriorRecord("x", prosody=Prosody(2, 2, 1), tokens=("Happy", "the", "hate"))
    _, aud, txt = oracle_scores(rec)
    np.testing.assert_array_equal(score_modality(Modality.AUDIO, rec, TABLE, LEX), aud)
    np.testing.assert_array_equal(score_modality(Modality.TEXT, rec, TABLE, LEX), txt)


# ---------------------------------------------------------------- decide

def test_decide_unanimous_sad():
    sad = cls("sad")
    rec = PriorRecord("x", au_ids=TABLE.support[sad], prosody=Prosody(*LEX.prosody[sad]),
                      tokens=("sad", "lonely"))
    assert decide(rec, TABLE, LEX) == sad


def test_decide_degenerate_weights():
    rng = seeded_rng(1)
    for i in range(20):
        r = random_record(rng)
        rec = PriorRecord("x", au_ids=frozenset({6, 12}), prosody=r.prosody, tokens=r.tokens,
                          weights=(1.0, 0.0, 0.0))
        assert decide(rec, TABLE, LEX) == cls("happy")


def test_decide_ties_go_to_lowest_id():
    # all weight on an empty transcript: every class scores zero
    rec = PriorRecord("x", au_ids=frozenset({6, 12}), prosody=Prosody(0, 0, 0),
                      weights=(0.0, 0.0, 1.0))
    assert decide(rec, TABLE, LEX) == 0
    # equal evidence for happy and sad: the lower id wins
    tie = PriorRecord("x", tokens=("sad", "happy"), weights=(0.0, 0.0, 1.0))
    assert decide(tie, TABLE, LEX) == min(cls("happy"), cls("sad"))


def test_decide_matches_exhaustive_argmax():
    rng = seeded_rng(7)
    for i in range(300):
        rec = random_record(rng, f"r{i}")
        assert decide(rec, TABLE, LEX) == oracle_decide(rec)


def test_decide_rejects_invalid():
    with pytest.raises(InvalidContent):
        decide(PriorRecord("x", weights=(0.5, 0.6, 0.2)), TABLE, LEX)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_decide_one_hot_depends_only_on_that_modality(seed, m):
    rng = seeded_rng(seed)
    a, b = random_record(rng), random_record(rng)
    w = tuple(1.0 if k == m else 0.0 for k in range(3))
    keep = {0: ("au_ids",), 1: ("prosody",), 2: ("tokens",)}[m]
    mixed = PriorRecord("x", **{f: getattr(a, f) for f in keep},
                        **{f: getattr(b, f) for f in ("au_ids", "prosody", "tokens") if f not in keep},
                        weights=w)
    only_a = PriorRecord("x", au_ids=a.au_ids, prosody=a.prosody, tokens=a.tokens, weights=w)
    assert decide(mixed, TABLE, LEX) == decide(only_a, TABLE, LEX)


def test_decide_max_aggregation():
    rec = PriorRecord("x", au_ids=frozenset({6, 12}), prosody=Prosody(0, 0, 0),
                      tokens=("sad", "sad", "lonely"), weights=(0.4, 0.3, 0.3))
    vis, aud, txt = oracle_scores(rec)
    agg = [max(0.4 * vis[c], 0.3 * aud[c], 0.3 * txt[c]) for c in range(len(vis))]
    assert decide(rec, TABLE, LEX, "max") == int(np.argmax(agg))


# ---------------------------------------------------------------- featurize

def test_featurize_examples():
    f_v, f_a, f_t = featurize(PriorRecord("x"))
    assert not f_v.any() and not f_a.any() and not f_t.any()
    f_v, _, _ = featurize(PriorRecord("x", au_ids=frozenset({1, 44})))
    assert np.flatnonzero(f_v).tolist() == [0, 43]
    a = featurize(PriorRecord("x", tokens=("a", "b", "c", "a")))
    b = featurize(PriorRecord("x", tokens=("c", "a", "a", "b")))
    assert a[2].tobytes() == b[2].tobytes()
    assert a[2].sum() == 4


def test_token_bucket_is_documented_crc():
    import zlib
    assert token_bucket("Happy") == zlib.crc32(b"happy") % 64


def test_featurize_rejects_invalid():
    with pytest.raises(InvalidContent):
        featurize(PriorRecord("x", au_ids=frozenset({0})))


# ---------------------------------------------------------------- validate and ingest

def test_validate_examples():
    assert validate(PriorRecord("x", weights=(0.5, 0.3, 0.2))) == []
    assert "weights sum 1.3" in validate(PriorRecord("x", weights=(0.5, 0.6, 0.2)))
    assert any("AU out of range" in p for p in validate(PriorRecord("x", au_ids=frozenset({45}))))


def _write(tmp_path, records, extra_lines=()):
    path = tmp_path / "p.jsonl"
    write_records(path, records)
    with open(path, "a") as fh:
        for line in extra_lines:
            fh.write(line + "\n")
    return path


def test_ingest_round_trip(tmp_path):
    recs = [random_record(seeded_rng(i), f"s{i}") for i in range(3)]
    path = _write(tmp_path, recs)
    got, problems = ingest(path)
    assert got == recs and problems == []
    # two ingests featurize to identical bytes
    again, _ = ingest(path)
    for x, y in zip(got, again):
        assert all(a.tobytes() == b.tobytes() for a, b in zip(featurize(x), featurize(y)))


def test_ingest_bad_record(tmp_path):
    recs = [random_record(seeded_rng(i), f"s{i}") for i in range(2)]
    bad = recs[0].to_json()
    bad["weights"] = [0.5, 0.6, 0.2]
    path = _write(tmp_path, recs, [json.dumps(bad)])
    got, problems = ingest(path)
    assert len(got) == 2 and [p.line for p in problems] == [3]
    with pytest.raises(SchemaError, match="line 3"):
        ingest(path, strict=True)


def test_ingest_unknown_version(tmp_path):
    doc = random_record(seeded_rng(0), "s").to_json()
    doc["schema_version"] = 2
    path = _write(tmp_path, [], [json.dumps(doc)])
    with pytest.raises(SchemaError):
        ingest(path)


def test_ingest_missing_and_extra_fields(tmp_path):
    doc = random_record(seeded_rng(0), "s").to_json()
    del doc["text_note"]
    extra = random_record(seeded_rng(1), "t").to_json()
    extra["mood"] = "x"
    got, problems = ingest(_write(tmp_path, [], [json.dumps(doc), json.dumps(extra), "{oops"]))
    assert got == [] and len(problems) == 3


def test_ingest_missing_file(tmp_path):
    with pytest.raises(OSError):
        ingest(tmp_path / "nope.jsonl")


# ---------------------------------------------------------------- provider

def _provider(fidelity, **kw):
    return StubTraceProvider(fidelity, TABLE, LEX, **kw)


@pytest.mark.parametrize("r_policy", ["uniform", "dirichlet", "one-hot"])
def test_stub_oracle_priors(r_policy):
    p = _provider(1.0, r_policy=r_policy, seed=3)
    for i in range(200):
        y = i % TABLE.num_classes
        rec = p.request(SampleMeta(f"s{i}", y))
        assert rec.label == y == decide(rec, TABLE, LEX)
        assert validate(rec, TABLE.num_classes) == []


def test_stub_fidelity_zero_is_always_wrong():
    p = _provider(0.0, r_policy="dirichlet", seed=5)
    n, c = 10_000, TABLE.num_classes
    wrong = 0
    seen = np.zeros((c, c), dtype=int)
    for i in range(n):
        y = i % c
        rec = p.request(SampleMeta(f"s{i}", y))
        wrong += rec.label != y
        seen[y, rec.label] += 1
    assert wrong == n
    # the wrong class is uniform over the other c-1 classes: chi-square at 3 sigma
    per_row = n / c
    expected = per_row / (c - 1)
    off = seen[~np.eye(c, dtype=bool)]
    chi2 = ((off - expected) ** 2 / expected).sum()
    dof = c * (c - 2)
    assert chi2 < dof + 3 * np.sqrt(2 * dof)


def test_stub_determinism_and_errors():
    a = _provider(0.5, r_policy="dirichlet", seed=9)
    b = _provider(0.5, r_policy="dirichlet", seed=9)
    assert [a.request(SampleMeta(f"s{i}", 1)) for i in range(20)] == \
           [b.request(SampleMeta(f"s{i}", 1)) for i in range(20)]
    with pytest.raises(ProviderUnavailable):
        a.request(SampleMeta("s"))
    with pytest.raises(UnknownClass):
        a.request(SampleMeta("s", TABLE.num_classes))
    with pytest.raises(ProviderUnavailable):
        get_provider("gemini")
    assert isinstance(get_provider("stub", fidelity=1.0, table=TABLE, lexicons=LEX),
                      StubTraceProvider)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**32 - 1), st.sampled_from(["uniform", "dirichlet", "one-hot"]))
def test_stub_records_always_validate(fidelity, seed, r_policy):
    p = _provider(fidelity, r_policy=r_policy, seed=seed)
    for i in range(10):
        assert validate(p.request(SampleMeta(f"s{i}", i % 7)), TABLE.num_classes) == []
