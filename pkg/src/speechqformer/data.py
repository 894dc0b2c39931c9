"""Deterministic synthetic corpus: paired features/transcripts, permutation "languages", LM text.

A language other than English is a fixed bijection over content-word ids.
Every translation therefore has an exact oracle, and a model that
transmits the spoken words faithfully can reach 100% exact match.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import prompts
from .errors import ConfigError, FormatError
from .frontend import SynthEncoderSpec, save_features, synth_encode
from .textproc import SEP, Vocab, detokenize, tokenize


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 42
    vocab_size: int = 64
    n_train: int = 2000
    n_dev: int = 128
    n_test: int = 256
    min_len: int = 4
    max_len: int = 8
    languages: tuple[str, ...] = ("en", "fr", "de", "ru")
    finetune_language: str = "fr"
    transcribe_fraction: float = 0.7
    translate_fraction: float = 0.3
    source_slots: int = 8
    n_lm_train: int = 20000
    n_lm_dev: int = 512

    def __post_init__(self):
        if abs(self.transcribe_fraction + self.translate_fraction - 1.0) > 1e-9:
            raise ConfigError("task mix fractions must sum to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.max_len > self.source_slots:
            raise ConfigError(f"max_len {self.max_len} exceeds source_slots {self.source_slots}")
        if "en" not in self.languages or self.finetune_language not in self.languages:
            raise ConfigError("languages must include 'en' and the fine-tuning language")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError("duplicate language tag")


@dataclass
class SampleRecord:
    sample_id: str
    features: str
    transcript: str
    translations: dict[str, str] = field(default_factory=dict)
    task: str = "transcribe"
    language: str = "en"
    split: str = "train"

    def target_text(self) -> str:
        return self.transcript if self.task == "transcribe" else self.translations[self.language]

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.sample_id,
                "features": self.features,
                "transcript": self.transcript,
                "translations": self.translations,
                "task": self.task,
                "language": self.language,
                "split": self.split,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        try:
            return cls(d["id"], d["features"], d["transcript"], dict(d.get("translations", {})),
                       d["task"], d.get("language", "en"), d["split"])
        except KeyError as exc:
            raise FormatError(f"manifest row missing field {exc}") from None


def _reserved_words() -> list[str]:
    return [prompts.SPEECH_OPEN, prompts.SPEECH_CLOSE, prompts.SLOT_FILL] + prompts.prompt_words()


def _n_content(spec: CorpusSpec) -> int:
    return spec.vocab_size - 6 - len(_reserved_words())


def build_vocab(spec: CorpusSpec) -> Vocab:
    reserved = _reserved_words()
    n_content = _n_content(spec)
    if n_content < 2:
        raise ConfigError(f"vocab_size {spec.vocab_size} leaves {n_content} content words")
    needed = spec.n_train + spec.n_dev + spec.n_test + spec.n_lm_train + spec.n_lm_dev
    if float(n_content) ** spec.min_len < 4 * needed:
        raise ConfigError(f"{n_content} content words cannot supply {needed} distinct sentences of length {spec.min_len}")
    width = len(str(n_content - 1))
    return Vocab(reserved + [f"w{i:0{width}d}" for i in range(n_content)])


class SyntheticLanguages:
    """Vocabulary plus one content-id permutation per language tag."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.vocab = build_vocab(spec)
        self.content_ids = np.arange(len(self.vocab) - _n_content(spec), len(self.vocab))
        self.perms: dict[str, np.ndarray] = {}
        taken = {tuple(self.content_ids)}
        for tag in spec.languages:
            table = np.arange(len(self.vocab))
            if tag != "en":
                rng = np.random.default_rng([spec.seed, zlib.crc32(tag.encode())])
                while True:
                    shuffled = rng.permutation(self.content_ids)
                    if tuple(shuffled) not in taken:
                        break
                taken.add(tuple(shuffled))
                table[self.content_ids] = shuffled
            self.perms[tag] = table

    def translate(self, tokens: Sequence[int], tag: str) -> list[int]:
        if tag not in self.perms:
            raise KeyError(f"unknown language tag {tag!r}")
        return self.perms[tag][np.asarray(tokens, dtype=np.int64)].tolist()

    def inverse(self, tokens: Sequence[int], tag: str) -> list[int]:
        if tag not in self.perms:
            raise KeyError(f"unknown language tag {tag!r}")
        inv = np.argsort(self.perms[tag])
        return inv[np.asarray(tokens, dtype=np.int64)].tolist()


@lru_cache(maxsize=4)
def languages_for(spec: CorpusSpec) -> SyntheticLanguages:
    return SyntheticLanguages(spec)


def translate_oracle(tokens: Sequence[int], tag: str, spec: CorpusSpec) -> list[int]:
    """Ground-truth translation: elementwise permutation, specials and prompt words untouched."""
    return languages_for(spec).translate(tokens, tag)


def no_speech_chance_bound(spec: CorpusSpec) -> float:
    """Best exact-match rate any predictor can reach without looking at the speech."""
    n_content = len(languages_for(spec).content_ids)
    n_lengths = spec.max_len - spec.min_len + 1
    return max((1.0 / n_lengths) * n_content ** (-L) for L in range(spec.min_len, spec.max_len + 1))


def _sample_sentences(rng: np.random.Generator, content: np.ndarray, spec: CorpusSpec, n: int, seen: set) -> list[tuple[int, ...]]:
    out = []
    while len(out) < n:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = tuple(int(t) for t in rng.choice(content, size=length))
        if sent in seen:
            continue
        seen.add(sent)
        out.append(sent)
    return out


def lm_line(source: Sequence[int], template: prompts.PromptTemplate, tag: str, langs: SyntheticLanguages) -> str:
    """One LM training sequence: source words in the query slots, instruction, separator, answer."""
    vocab = langs.vocab
    slots = list(source) + [vocab.id(prompts.SLOT_FILL)] * (langs.spec.source_slots - len(source))
    prefix, suffix = prompts.render_prompt(template, prompts.language_name(tag), vocab)
    ids = prefix[1:] + slots + suffix[:-1]
    target = langs.translate(source, tag)
    return " ".join(vocab.word(i) for i in ids) + " " + vocab.word(SEP) + " " + detokenize(target, vocab)


def parse_lm_line(line: str, vocab: Vocab) -> tuple[list[int], list[int]]:
    """Split an LM line into (prompt ids ending in SEP, answer ids)."""
    ids = tokenize(line, vocab)
    if SEP not in ids:
        raise FormatError(f"LM line without separator: {line[:60]!r}")
    cut = ids.index(SEP) + 1
    return ids[:cut], ids[cut:]


@dataclass
class CorpusFiles:
    root: Path
    train: Path
    dev: Path
    test: Path
    lm_train: Path
    lm_dev: Path
    vocab: Path
    counts: dict[str, int]


def gen_corpus(spec: CorpusSpec, encoder: SynthEncoderSpec, out_dir: str | Path) -> CorpusFiles:
    """Write manifests, SPQF feature files, LM text and the vocabulary under ``out_dir``."""
    langs = languages_for(spec)
    vocab = langs.vocab
    if encoder.vocab_size != len(vocab):
        raise ConfigError(f"encoder vocab_size {encoder.vocab_size} != corpus vocab {len(vocab)}")
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([spec.seed, 7])
    seen: set = set()
    splits = {
        "train": _sample_sentences(rng, langs.content_ids, spec, spec.n_train, seen),
        "dev": _sample_sentences(rng, langs.content_ids, spec, spec.n_dev, seen),
        "test": _sample_sentences(rng, langs.content_ids, spec, spec.n_test, seen),
    }
    lm_sents = {
        "lm_train": _sample_sentences(rng, langs.content_ids, spec, spec.n_lm_train, seen),
        "lm_dev": _sample_sentences(rng, langs.content_ids, spec, spec.n_lm_dev, seen),
    }

    n_transcribe = int(round(spec.transcribe_fraction * spec.n_train))
    train_tasks = np.array(["transcribe"] * n_transcribe + ["translate"] * (spec.n_train - n_transcribe))
    train_tasks = train_tasks[np.random.default_rng([spec.seed, 8]).permutation(spec.n_train)]

    counts = {}
    for split, sents in splits.items():
        rows: list[SampleRecord] = []
        for i, sent in enumerate(sents):
            utt = f"{split}-{i:05d}"
            rel = f"features/{utt}.spqf"
            save_features(root / rel, synth_encode(sent, encoder, sample_id=utt))
            transcript = detokenize(sent, vocab)
            if split == "train":
                task = str(train_tasks[i])
                lang = "en" if task == "transcribe" else spec.finetune_language
                trans = {} if task == "transcribe" else {lang: detokenize(langs.translate(sent, lang), vocab)}
                rows.append(SampleRecord(utt, rel, transcript, trans, task, lang, split))
                continue
            trans = {t: detokenize(langs.translate(sent, t), vocab) for t in spec.languages if t != "en"}
            for tag in spec.languages:
                task = "transcribe" if tag == "en" else "translate"
                rows.append(SampleRecord(f"{utt}-{tag}", rel, transcript, trans, task, tag, split))
        write_manifest(root / f"{split}.jsonl", rows)
        counts[split] = len(rows)

    lm_rng = np.random.default_rng([spec.seed, 9])
    templates = [prompts.builtin_template(i) for i in range(1, len(prompts.BUILTIN_TEMPLATES) + 1)]
    for name, sents in lm_sents.items():
        lines = []
        for sent in sents:
            tag = spec.languages[int(lm_rng.integers(len(spec.languages)))]
            tpl = templates[int(lm_rng.integers(len(templates)))]
            lines.append(lm_line(sent, tpl, tag, langs))
        (root / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        counts[name] = len(lines)

    (root / "vocab.txt").write_text("\n".join(vocab.itos) + "\n", encoding="utf-8")
    return CorpusFiles(root, root / "train.jsonl", root / "dev.jsonl", root / "test.jsonl",
                       root / "lm_train.txt", root / "lm_dev.txt", root / "vocab.txt", counts)


def write_manifest(path: str | Path, rows: Iterable[SampleRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in rows), encoding="utf-8")


def read_manifest(path: str | Path) -> list[SampleRecord]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(SampleRecord.from_json(line))
        except (json.JSONDecodeError, FormatError) as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
    return rows


def spec_dict(spec: CorpusSpec) -> dict:
    return asdict(spec)
