"""Text normalization, word-level vocabulary and chat-artifact stripping."""

from __future__ import annotations

import re
import unicodedata
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, CLS, SEP = 0, 1, 2, 3, 4
UNK = 5
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<cls>", "<sep>")
UNK_TOKEN = "<unk>"

DEFAULT_CONNECTIVES = (
    "here is the transcribed text",
    "here is the translation",
    "here is",
    "sure",
)


class UnbalancedParenthesesWarning(UserWarning):
    pass


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """Lowercase, turn every punctuation character into a space, squeeze whitespace."""
    lowered = text.lower()
    spaced = "".join(" " if _is_punct(ch) else ch for ch in lowered)
    return " ".join(spaced.split())


_ACTION = re.compile(r"\([^()]*\)")


def _balanced(text: str) -> bool:
    depth = 0
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def remove_actions(text: str) -> str:
    """Drop parenthesized stage directions such as ``(applause)``.

    Must run before punctuation removal.  Text with unbalanced parentheses is
    returned untouched and an :class:`UnbalancedParenthesesWarning` is issued.
    """
    if not _balanced(text):
        warnings.warn(f"unbalanced parentheses, left unchanged: {text!r}", UnbalancedParenthesesWarning)
        return text
    if "(" not in text:
        return text
    stripped = _ACTION.sub("", text)
    return re.sub(r"[ \t]{2,}", " ", stripped).strip()


def load_connectives(path: str | Path) -> tuple[str, ...]:
    """One phrase per line; ``#`` starts a comment."""
    phrases = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            phrases.append(normalize(line))
    return tuple(phrases)


def strip_chat_artifacts(text: str, rendered_prompt: str, connectives: Iterable[str] = DEFAULT_CONNECTIVES) -> str:
    """Remove prompt recurrence and any leading connective phrases from a model answer."""
    out = text
    prompt = rendered_prompt.strip()
    if prompt:
        out = out.replace(prompt, " ")
    out = " ".join(out.split())
    # longest phrase first; keep peeling while a connective leads the answer
    pats = [re.compile(r"^\s*" + re.escape(p) + "(?:\\s*[:;,.!\\-\u2013\u2014]\\s*|\\s+|$)", re.IGNORECASE)
            for p in sorted(set(connectives), key=len, reverse=True) if p]
    stripped = True
    while stripped:
        stripped = False
        for pat in pats:
            m = pat.match(out)
            if m and m.end() > 0:
                out = out[m.end():]
                stripped = True
                break
    return out.strip()


@dataclass
class Vocab:
    """Closed word-level vocabulary: five specials, ``<unk>``, then ``words`` in order."""

    words: Sequence[str]
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.itos = list(SPECIAL_TOKENS) + [UNK_TOKEN] + list(self.words)
        self._ids = {}
        for i, w in enumerate(self.itos):
            if w in self._ids:
                raise ValueError(f"duplicate vocabulary entry {w!r}")
            self._ids[w] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def word(self, idx: int) -> str:
        return self.itos[idx]

    def is_special(self, idx: int) -> bool:
        return 0 <= idx < len(SPECIAL_TOKENS)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(w) for w in text.split()]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.word(int(i)) for i in ids if not vocab.is_special(int(i)))


def pad_tokens(seqs: Sequence[Sequence[int]], pad_id: int = PAD) -> tuple:
    """Right-pad to a (B, L_max) id array; also returns the (B, L_max) padding mask."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    pad = np.ones((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        pad[i, : len(s)] = False
    return ids, pad
