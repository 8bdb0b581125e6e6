import json
import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmri2text.evaluation import (COLUMNS, DecodeRecord, MetricReport, TableEmbedder, bleu_details, bleu_n,
                                  build_report, embedding_score, embedding_score_details, lcs_length, rouge_l,
                                  rouge_l_record, score_records)
from fmri2text.numerics import ValidationError
from oracles import bleu_oracle, lcs_brute, rouge_l_oracle, tokens


def rec(hyp, ref, subject="s1"):
    return DecodeRecord(subject, "What is in the video?", ref, hyp)


def load_fixture():
    return json.loads(resources.files("fmri2text").joinpath("fixtures/metric_corpus.json").read_text())


def test_hand_computed_bleu1():
    # hyp "the cat sat" vs ref "the cat sat down": p1 = 3/3, BP = exp(1 - 4/3)
    assert bleu_n([rec("the cat sat", "the cat sat down")], 1) == pytest.approx(100 * math.exp(-1 / 3), abs=1e-9)


def test_hand_computed_bleu2():
    # p1 = 3/3, p2 = 2/2, BP = exp(1 - 4/3) -> same as BLEU-1
    assert bleu_n([rec("the cat sat", "the cat sat down")], 2) == pytest.approx(100 * math.exp(-1 / 3), abs=1e-9)
    # "a b a" vs "a a b": p1 = 3/3, bigrams ab, ba vs aa, ab -> p2 = 1/2, BP = 1
    assert bleu_n([rec("a b a", "a a b")], 2) == pytest.approx(100 * math.sqrt(0.5), abs=1e-9)


def test_hand_computed_rouge_l():
    # LCS("a c d", "a b c d") = 3 -> P = 1, R = 3/4, F = 6/7
    f, p, r = rouge_l([rec("a c d", "a b c d")])
    assert (f, p, r) == pytest.approx((600 / 7, 100.0, 75.0), abs=1e-9)


def test_bleu_clipping_and_smoothing():
    # "the the the" vs "the cat": unigram matches clipped to 1 of 3
    d = bleu_details([rec("the the the", "the cat")], 1)
    assert d.precisions[0] == pytest.approx(1 / 3) and not d.smoothed
    d2 = bleu_details([rec("x y", "a b")], 2)
    assert d2.smoothed and d2.precisions == [pytest.approx(1 / 3), pytest.approx(1 / 2)]


def test_fixture_corpus_matches_expected_to_four_decimals():
    fx = load_fixture()
    assert len(fx["pairs"]) == 20
    records = [rec(p["hypothesis"], p["reference"]) for p in fx["pairs"]]
    exp = fx["expected"]
    f, p, r = rouge_l(records)
    got = {"bleu1": bleu_n(records, 1), "bleu2": bleu_n(records, 2), "rouge_l_f": f, "rouge_l_p": p, "rouge_l_r": r}
    for k, v in exp.items():
        assert round(got[k], 4) == pytest.approx(v, abs=1e-9), k


def test_fixture_values_agree_with_brute_force_oracle():
    fx = load_fixture()
    pairs = [(p["hypothesis"], p["reference"]) for p in fx["pairs"]]
    assert round(bleu_oracle(pairs, 1), 4) == fx["expected"]["bleu1"]
    assert round(bleu_oracle(pairs, 2), 4) == fx["expected"]["bleu2"]
    assert round(rouge_l_oracle(pairs)[0], 4) == fx["expected"]["rouge_l_f"]
    for p in fx["pairs"]:
        assert lcs_length(tokens(p["hypothesis"]), tokens(p["reference"])) == p["lcs"]


def test_identity_scores_hundred():
    fx = load_fixture()
    records = [rec(p["reference"], p["reference"]) for p in fx["pairs"]]
    assert bleu_n(records, 1) == pytest.approx(100.0)
    assert bleu_n(records, 2) == pytest.approx(100.0)
    assert rouge_l(records) == pytest.approx((100.0, 100.0, 100.0))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=7), st.lists(st.sampled_from("abcde"), max_size=7))
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == lcs_brute(a, b)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=6), st.lists(st.sampled_from("abcd"), min_size=1, max_size=6))
def test_metric_ranges(a, b):
    r = [rec(" ".join(a), " ".join(b))]
    assert 0.0 <= bleu_n(r, 1) <= 100.0 + 1e-9
    assert 0.0 <= bleu_n(r, 2) <= 100.0 + 1e-9
    f, p, rr = rouge_l(r)
    assert min(p, rr) - 1e-9 <= f <= max(p, rr) + 1e-9


def test_empty_inputs():
    with pytest.raises(ValidationError):
        bleu_n([], 1)
    assert bleu_n([rec("", "a b")], 1) == 0.0
    assert rouge_l_record([], ["a"]) == (0.0, 0.0, 0.0)
    assert rouge_l([rec("a", "")]) == (0.0, 0.0, 0.0)


def _embedder():
    vocab = ["<unk>", "a", "b", "c"]
    table = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    return TableEmbedder({w: i for i, w in enumerate(vocab)}, table, 0)


def test_embedding_score_identity_and_unknowns():
    emb = _embedder()
    assert embedding_score([rec("a b", "a b")], emb) == pytest.approx(100.0)
    d = embedding_score_details([rec("zzz", "qqq")], emb)
    assert d.fully_unknown_records == 1 and d.unknown_tokens == 2
    # greedy matching: hyp "a" vs ref "c": cos = 1/sqrt2 both ways
    assert embedding_score([rec("a", "c")], emb) == pytest.approx(100 / math.sqrt(2))


def test_report_columns_and_total_row(tmp_path):
    records = [rec("a b c", "a b c", "s1"), rec("a", "a b", "s2"), rec("c", "a", "s2")]
    report = build_report(records, _embedder())
    assert [r.subject_id for r in report.rows] == ["s1", "s2"]
    report.write(tmp_path)
    lines = (tmp_path / "report.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(COLUMNS)
    assert lines[-1].startswith("Total\t")
    assert len(lines) == 4
    assert (tmp_path / "report.txt").read_text().count("bertscore_proxy") >= 1
    total = score_records("Total", records, _embedder())
    assert f"{total.rouge_l_f:.4f}" == lines[-1].split("\t")[4]


def test_disjoint_vocabulary_is_smoothed_below_one():
    d = bleu_details([rec("x y z", "a b c")], 2)
    assert d.smoothed and d.score < 1.0 * 100 and d.score > 0
    assert bleu_details([rec("x y z", "a b c")], 1).score < 100 * 0.26


def test_scrambled_order_keeps_embedding_score():
    emb = _embedder()
    assert embedding_score([rec("a b c", "a c")], emb) == pytest.approx(embedding_score([rec("c a b", "a c")], emb))


def test_single_subject_row_equals_total():
    report = build_report([rec("a b", "a b c", "s1"), rec("c", "a c", "s1")], _embedder())
    assert report.rows[0].values() == report.total.values()


def test_total_pools_records():
    r1, r2 = rec("a b", "a b c", "s1"), rec("b", "a b", "s2")
    report = build_report([r1, r2], _embedder())
    f_pool = rouge_l([r1, r2])[0]
    assert report.total.rouge_l_f == pytest.approx(f_pool)
    assert report.total.rouge_l_f == pytest.approx((report.rows[0].rouge_l_f + report.rows[1].rouge_l_f) / 2)


def test_empty_subject_rejected():
    with pytest.raises(ValidationError):
        build_report({"s1": [rec("a", "a")], "s2": []}, _embedder())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcd"), min_size=2, max_size=7), st.lists(st.sampled_from("abcd"), min_size=1, max_size=7),
       st.integers(0, 6))
def test_deleting_hypothesis_word_never_raises_recall(h, r, k):
    k = k % len(h)
    before = rouge_l_record(h, r)[2]
    after = rouge_l_record(h[:k] + h[k + 1:], r)[2]
    assert after <= before + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "the", "dog", ",", "."]), min_size=1, max_size=10))
def test_identity_is_maximal_for_any_text(words):
    r = [rec(" ".join(words), " ".join(words))]
    assert bleu_n(r, 1) == pytest.approx(100.0) and rouge_l(r)[0] == pytest.approx(100.0)
