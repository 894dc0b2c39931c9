"""Greedy-matching similarity scores over frozen-LM states, exact match, corpus reports.

The contextual embedder is the artifact's own causal LM rather than an
external bidirectional encoder, so scores are not comparable with published
BERTScore numbers.  Every report carries that note in its summary line.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import llm
from . import tensor as T
from .data import SampleRecord
from .errors import ContractError, FormatError
from .frontend import FeatureSequence, load_features, pad_features
from .prompts import PromptTemplate, builtin_template, language_name
from .qformer import AdapterParams
from .tensor import Tensor
from .textproc import BOS, DEFAULT_CONNECTIVES, Vocab, detokenize, normalize, strip_chat_artifacts, tokenize

EMBEDDER_NOTE = "greedy cosine matching over last-layer states of the frozen causal LM (not an external BERT encoder)"


@dataclass(frozen=True)
class ScoreTriple:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, p: float, r: float) -> "ScoreTriple":
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)


ZERO = ScoreTriple(0.0, 0.0, 0.0)


def embed_tokens(lm: llm.FrozenLM, tokens: Sequence[int]) -> np.ndarray:
    """One float64 context vector per token: final states of the LM run over ``BOS + tokens``."""
    if not lm.frozen:
        raise ContractError("embedder LM must be frozen")
    if len(tokens) == 0:
        raise ContractError("cannot embed an empty token sequence")
    ids = np.asarray([[BOS] + [int(t) for t in tokens]], dtype=np.int64)
    with T.no_grad():
        h = lm.hidden(lm.embed_ids(ids))
    return h.data[0, 1:].astype(np.float64)


def cosine_matrix(cand: np.ndarray, ref: np.ndarray) -> np.ndarray:
    a = cand / np.maximum(np.linalg.norm(cand, axis=1, keepdims=True), 1e-12)
    b = ref / np.maximum(np.linalg.norm(ref, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def greedy_match(sim: np.ndarray, cand_weights: np.ndarray | None = None,
                 ref_weights: np.ndarray | None = None) -> ScoreTriple:
    """Precision from each candidate row's best match, recall from each reference column's."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or 0 in sim.shape:
        return ZERO
    wc = np.ones(sim.shape[0]) if cand_weights is None else np.asarray(cand_weights, dtype=np.float64)
    wr = np.ones(sim.shape[1]) if ref_weights is None else np.asarray(ref_weights, dtype=np.float64)
    p = float((sim.max(axis=1) * wc).sum() / wc.sum()) if wc.sum() > 0 else 0.0
    r = float((sim.max(axis=0) * wr).sum() / wr.sum()) if wr.sum() > 0 else 0.0
    return ScoreTriple.from_pr(p, r)


def compute_idf(references: Iterable[Sequence[int]]) -> dict[int, float]:
    """log((M+1)/(df+1)) over M reference sentences; unseen tokens get log(M+1)."""
    refs = [set(int(t) for t in r) for r in references]
    df = Counter(t for r in refs for t in r)
    m = len(refs)
    idf = {t: math.log((m + 1) / (c + 1)) for t, c in df.items()}
    idf[-1] = math.log(m + 1)
    return idf


def _weights(tokens: Sequence[int], idf: Mapping[int, float] | None):
    if idf is None:
        return None
    default = idf.get(-1, 0.0)
    return np.array([idf.get(int(t), default) for t in tokens])


def bertscore(candidate: Sequence[int], reference: Sequence[int], lm: llm.FrozenLM,
              idf: Mapping[int, float] | None = None) -> ScoreTriple:
    """Greedy-matching (P, R, F1) between two token sequences; empty side gives (0, 0, 0)."""
    if len(candidate) == 0 or len(reference) == 0:
        return ZERO
    sim = cosine_matrix(embed_tokens(lm, candidate), embed_tokens(lm, reference))
    return greedy_match(sim, _weights(candidate, idf), _weights(reference, idf))


# -- corpus evaluation ----------------------------------------------------------

@dataclass
class SampleResult:
    index: int
    sample_id: str
    language: str
    candidate: str
    reference: str
    precision: float
    recall: float
    f1: float
    exact_match: bool
    error: str | None = None


@dataclass
class EvalReport:
    samples: list[SampleResult]
    template_id: int
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def failed(self) -> int:
        return sum(s.error is not None for s in self.samples)

    def mean(self, key: str) -> float:
        return float(np.mean([float(getattr(s, key)) for s in self.samples]))

    def summary(self) -> dict:
        return {
            "summary": True,
            "count": self.count,
            "failed": self.failed,
            "template_id": self.template_id,
            "precision": self.mean("precision"),
            "recall": self.mean("recall"),
            "f1": self.mean("f1"),
            "exact_match": self.mean("exact_match"),
            "embedder": EMBEDDER_NOTE,
            "config": self.config,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(s), sort_keys=True) for s in self.samples]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def read_report(path: str | Path) -> tuple[list[dict], dict]:
    lines = [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or not lines[-1].get("summary"):
        raise FormatError(f"{path}: missing summary line")
    return lines[:-1], lines[-1]


def clean_output(text: str, template: PromptTemplate, language: str,
                 connectives: Sequence[str] = DEFAULT_CONNECTIVES) -> str:
    """Normalize a raw answer and strip echoed instructions and connective phrases."""
    prompt = template.instruction(language_name(language))
    return normalize(strip_chat_artifacts(normalize(text), prompt, connectives))


GenerateFn = Callable[[SampleRecord], str]


def corpus_eval(
    rows: Sequence[SampleRecord],
    params: AdapterParams | None,
    lm: llm.FrozenLM,
    template: PromptTemplate | int,
    vocab: Vocab,
    root: str | Path = ".",
    *,
    batch_size: int = 64,
    max_len: int = 12,
    seed: int = 0,
    idf: bool = False,
    connectives: Sequence[str] = DEFAULT_CONNECTIVES,
    generate_fn: GenerateFn | None = None,
) -> EvalReport:
    """Generate, clean and score every row; rows that cannot be processed are kept as failures.

    ``generate_fn`` replaces model generation (used for oracle checks); when
    it is given ``params`` may be None.
    """
    if len(rows) == 0:
        raise ContractError("evaluation needs at least one manifest row")
    if generate_fn is None and params is None:
        raise ContractError("either adapter params or a generate_fn is required")
    tpl = builtin_template(template) if isinstance(template, int) else template
    root = Path(root)

    raw: dict[int, str] = {}
    errors: dict[int, str] = {}
    if generate_fn is not None:
        for i, row in enumerate(rows):
            try:
                raw[i] = generate_fn(row)
            except Exception as exc:  # recorded, evaluation continues
                errors[i] = f"{type(exc).__name__}: {exc}"
    else:
        feats: dict[int, FeatureSequence] = {}
        for i, row in enumerate(rows):
            try:
                feats[i] = load_features(root / row.features, d_enc=params.config.d_enc)
            except (OSError, FormatError, ValueError) as exc:
                errors[i] = f"{type(exc).__name__}: {exc}"
        by_lang: dict[str, list[int]] = {}
        for i in sorted(feats):
            by_lang.setdefault(rows[i].language, []).append(i)
        for lang, idx in sorted(by_lang.items()):
            for s in range(0, len(idx), batch_size):
                chunk = idx[s:s + batch_size]
                x, valid = pad_features([feats[i] for i in chunk])
                outs = llm.generate_batch(params, lm, x, valid, tpl, language_name(lang), vocab, max_len)
                for i, out in zip(chunk, outs):
                    raw[i] = detokenize(out, vocab)

    refs: dict[int, str] = {}
    for i, row in enumerate(rows):
        try:
            refs[i] = normalize(row.target_text())
        except KeyError:
            errors.setdefault(i, f"missing reference for language {row.language!r}")
    idf_table = compute_idf([tokenize(refs[i], vocab) for i in sorted(refs)]) if idf else None

    samples = []
    for i, row in enumerate(rows):
        if i in errors or i not in raw:
            samples.append(SampleResult(i, row.sample_id, row.language, "", refs.get(i, ""), 0.0, 0.0, 0.0, False,
                                        errors.get(i, "no output")))
            continue
        cand = clean_output(raw[i], tpl, row.language, connectives)
        score = bertscore(tokenize(cand, vocab), tokenize(refs[i], vocab), lm, idf_table)
        samples.append(SampleResult(i, row.sample_id, row.language, cand, refs[i], score.precision, score.recall,
                                    score.f1, cand == refs[i]))
    config = {"seed": seed, "max_len": max_len, "idf": idf, "template": tpl.text}
    return EvalReport(samples, tpl.template_id, config)


# -- prompt selection -------------------------------------------------------------

@dataclass
class PromptSelection:
    """Per-template dev scores and the winner (highest F1, ties to the lowest id)."""

    chosen: int
    tie: bool
    tied: list[int]
    scores: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "PromptSelection":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(int(d["chosen"]), bool(d["tie"]), list(d["tied"]), list(d["scores"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: not a prompt selection report ({exc})") from None


def choose_template(scores: Sequence[dict]) -> PromptSelection:
    if not scores:
        raise ContractError("no templates to choose from")
    best = max(s["f1"] for s in scores)
    tied = sorted(s["template_id"] for s in scores if s["f1"] == best)
    return PromptSelection(tied[0], len(tied) > 1, tied, list(scores))


def select_prompt(
    rows: Sequence[SampleRecord],
    params: AdapterParams | None,
    lm: llm.FrozenLM,
    templates: Sequence[PromptTemplate],
    vocab: Vocab,
    root: str | Path = ".",
    generate_for: Callable[[PromptTemplate], GenerateFn] | None = None,
    **eval_kw,
) -> PromptSelection:
    """Score every template on ``rows`` by corpus F1.

    ``generate_for(template)`` may supply a generation hook per template,
    which lets tests build dev sets with known outcomes.
    """
    scores = []
    for tpl in templates:
        fn = generate_for(tpl) if generate_for is not None else None
        rep = corpus_eval(rows, params, lm, tpl, vocab, root, generate_fn=fn, **eval_kw)
        scores.append({"template_id": tpl.template_id, "text": tpl.text, "f1": rep.mean("f1"),
                       "exact_match": rep.mean("exact_match"), "count": rep.count, "failed": rep.failed})
    return choose_template(scores)
