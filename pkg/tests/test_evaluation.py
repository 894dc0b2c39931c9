import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechqformer import evaluation as E
from speechqformer import llm
from speechqformer.data import languages_for, read_manifest, translate_oracle
from speechqformer.errors import ContractError, FormatError
from speechqformer.prompts import builtin_template
from speechqformer.textproc import detokenize, tokenize

from conftest import TINY

VOCAB = languages_for(TINY).vocab
LMC = llm.LMConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32, vocab_size=len(VOCAB), max_len=40)


@pytest.fixture(scope="module")
def lm():
    m = llm.FrozenLM.init(LMC, 0)
    m.freeze()
    return m


def test_hand_built_matrix():
    s = E.greedy_match(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    assert s.precision == 2 / 3
    assert s.recall == 1.0
    assert s.f1 == pytest.approx(0.8, abs=1e-15)


def test_hand_built_case_through_bertscore(monkeypatch):
    # candidate rows e0, e1, e2 ; reference rows e0, e1 ; cosine matrix [[1,0],[0,1],[0,0]]
    table = {10: [1.0, 0.0, 0.0], 11: [0.0, 1.0, 0.0], 12: [0.0, 0.0, 1.0]}
    monkeypatch.setattr(E, "embed_tokens", lambda lm, toks: np.array([table[t] for t in toks]))
    s = E.bertscore([10, 11, 12], [10, 11], lm=None)
    assert (s.precision, s.recall) == (2 / 3, 1.0)
    assert abs(s.f1 - 0.8) < 1e-15


def test_orthogonal_single_tokens_score_zero(monkeypatch):
    monkeypatch.setattr(E, "embed_tokens", lambda lm, toks: np.eye(3)[[t - 10 for t in toks]])
    assert E.bertscore([10], [11], lm=None).f1 == 0.0


def test_identical_sentence(lm):
    toks = tokenize("w01 w07 w07 w12 w30", VOCAB)
    s = E.bertscore(toks, toks, lm)
    assert abs(s.f1 - 1.0) < 1e-6


def test_empty_candidate_convention(lm):
    assert E.bertscore([], tokenize("w01", VOCAB), lm) == E.ZERO
    assert E.greedy_match(np.zeros((0, 3))) == E.ZERO


def test_embed_tokens_contract(lm):
    toks = tokenize("w01 w02 w03 w04", VOCAB)
    a = E.embed_tokens(lm, toks)
    assert a.shape == (4, LMC.d_model)
    np.testing.assert_array_equal(a, E.embed_tokens(lm, toks))
    changed = list(toks)
    changed[2] = VOCAB.id("w20")
    b = E.embed_tokens(lm, changed)
    np.testing.assert_array_equal(a[:2], b[:2])
    assert not np.array_equal(a[2:], b[2:])
    with pytest.raises(ContractError):
        E.embed_tokens(lm, [])
    with pytest.raises(ContractError):
        E.embed_tokens(llm.FrozenLM.init(LMC, 0), toks)


@given(st.lists(st.integers(10, 60), min_size=1, max_size=6), st.lists(st.integers(10, 60), min_size=1, max_size=6))
def test_precision_recall_swap(cand, ref):
    m = llm.FrozenLM.init(LMC, 0)
    m.freeze()
    a, b = E.bertscore(cand, ref, m), E.bertscore(ref, cand, m)
    assert a.precision == b.recall and a.recall == b.precision


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_f1_is_harmonic_mean(p, r):
    s = E.ScoreTriple.from_pr(p, r)
    assert s.f1 == (2 * p * r / (p + r) if p + r > 0 else 0.0)


def test_idf_weights():
    idf = E.compute_idf([[1, 2], [1, 3], [1]])
    assert idf[1] == pytest.approx(math.log(4 / 4))
    assert idf[2] == pytest.approx(math.log(4 / 2))
    assert idf[-1] == pytest.approx(math.log(4))
    sim = np.array([[1.0, 0.0], [0.0, 0.5]])
    s = E.greedy_match(sim, np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    assert s.precision == 0.5 and s.recall == 0.75


def _oracle(row):
    toks = tokenize(row.transcript, VOCAB)
    if row.task == "translate":
        toks = translate_oracle(toks, row.language, TINY)
    return detokenize(toks, VOCAB)


def test_oracle_corpus_eval_is_perfect(tiny_corpus, lm, tmp_path):
    rows = read_manifest(tiny_corpus.test)
    rep = E.corpus_eval(rows, None, lm, 1, VOCAB, tiny_corpus.root, generate_fn=_oracle)
    assert rep.failed == 0
    assert rep.mean("exact_match") == 1.0
    assert all(abs(s.f1 - 1.0) < 1e-6 for s in rep.samples)
    # corpus mean matches an independent summation
    total = 0.0
    for s in rep.samples:
        total += s.f1
    assert abs(rep.summary()["f1"] - total / len(rep.samples)) < 1e-9
    path = tmp_path / "r.jsonl"
    rep.write(path)
    samples, summary = E.read_report(path)
    assert len(samples) == len(rows) and summary["count"] == len(rows)
    assert "frozen causal LM" in summary["embedder"]


def test_chat_artifacts_are_cleaned_before_scoring(tiny_corpus, lm):
    rows = read_manifest(tiny_corpus.test)[:4]
    wrap = lambda row: "Sure! Here is the transcribed text: " + _oracle(row).upper() + "."
    rep = E.corpus_eval(rows, None, lm, 1, VOCAB, generate_fn=wrap)
    assert rep.mean("exact_match") == 1.0


def test_failures_are_recorded_and_scored_zero(tiny_corpus, lm):
    rows = read_manifest(tiny_corpus.test)[:4]

    def flaky(row):
        if row is rows[1]:
            raise RuntimeError("boom")
        return _oracle(row)
    rep = E.corpus_eval(rows, None, lm, 1, VOCAB, generate_fn=flaky)
    assert rep.failed == 1
    bad = rep.samples[1]
    assert bad.error.startswith("RuntimeError") and bad.f1 == 0.0 and not bad.exact_match
    assert rep.mean("exact_match") == 0.75


def test_missing_feature_file_is_a_failed_sample(tiny_corpus, lm):
    from speechqformer.qformer import AdapterParams, QFormerConfig
    rows = read_manifest(tiny_corpus.test)[:3]
    rows[0].features = "features/missing.spqf"
    p = AdapterParams.init(QFormerConfig(vocab_size=len(VOCAB), d_lm=LMC.d_model), 0)
    rep = E.corpus_eval(rows, p, lm, 1, VOCAB, tiny_corpus.root, max_len=3)
    assert rep.failed == 1 and rep.samples[0].error is not None
    assert rep.count == 3


def test_corpus_eval_contracts(tiny_corpus, lm):
    with pytest.raises(ContractError):
        E.corpus_eval([], None, lm, 1, VOCAB, generate_fn=_oracle)
    with pytest.raises(ContractError):
        E.corpus_eval(read_manifest(tiny_corpus.test), None, lm, 1, VOCAB)


def test_read_report_needs_summary(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"index": 0}\n')
    with pytest.raises(FormatError):
        E.read_report(p)


def test_prompt_selection_tie_goes_to_lowest_id(tiny_corpus, lm, tmp_path):
    rows = read_manifest(tiny_corpus.dev)
    templates = [builtin_template(i) for i in (1, 2, 3, 4)]
    # templates 2 and 4 are perfect, 1 and 3 always answer with the wrong word
    good = {2, 4}
    gen = lambda tpl: (_oracle if tpl.template_id in good else (lambda row: "w00"))
    sel = E.select_prompt(rows, None, lm, templates, VOCAB, generate_for=gen)
    assert sel.chosen == 2 and sel.tie and sel.tied == [2, 4]
    sel.write(tmp_path / "sel.json")
    assert E.PromptSelection.read(tmp_path / "sel.json") == sel
    all_same = E.select_prompt(rows, None, lm, templates, VOCAB, generate_for=lambda tpl: _oracle)
    assert all_same.chosen == 1 and all_same.tied == [1, 2, 3, 4]


def test_choose_template_without_tie():
    sel = E.choose_template([{"template_id": 1, "f1": 0.5}, {"template_id": 3, "f1": 0.7}])
    assert sel.chosen == 3 and not sel.tie
    with pytest.raises(ContractError):
        E.choose_template([])


def test_prompt_selection_read_rejects_garbage(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    with pytest.raises(FormatError):
        E.PromptSelection.read(p)
