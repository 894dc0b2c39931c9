"""Instruction templates with a speech placeholder span."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError
from .textproc import BOS, SEP, Vocab, normalize, tokenize

PLACEHOLDER = "<Speech><SpeechQuery></Speech>"
QUERY_MARK = "<SpeechQuery>"
SPEECH_OPEN = "<Speech>"
SPEECH_CLOSE = "</Speech>"
SLOT_FILL = "<Fill>"
LANGUAGE_SLOT = "{language}"

BUILTIN_TEMPLATES = (
    PLACEHOLDER + " Can you translate the speech into {language}?",
    PLACEHOLDER + " Please translate the speech you heard into {language}.",
    PLACEHOLDER + " Listen to the speech and translate it into {language}.",
    PLACEHOLDER + " Give me the {language} translation of this {language}.",
)

LANGUAGE_NAMES = {"en": "English", "fr": "French", "de": "German", "ru": "Russian"}


def language_name(tag: str) -> str:
    """Display name used in prompts; unknown tags pass through unchanged (zero-shot prompting)."""
    return LANGUAGE_NAMES.get(tag, tag)


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    template_id: int = 0

    def __post_init__(self):
        count = self.text.count(PLACEHOLDER)
        if count != 1:
            raise ContractError(f"template must contain exactly one {PLACEHOLDER}, found {count}")

    def parts(self, language: str) -> tuple[str, str]:
        """Normalized text before and after the placeholder, language substituted."""
        pre, post = self.text.split(PLACEHOLDER)
        pre = pre.replace(LANGUAGE_SLOT, language)
        post = post.replace(LANGUAGE_SLOT, language)
        return normalize(pre), normalize(post)

    def render(self, language: str) -> str:
        pre, post = self.parts(language)
        return (pre + " " if pre else "") + PLACEHOLDER + (" " + post if post else "")

    def instruction(self, language: str) -> str:
        """The normalized instruction words only, as a model might echo them."""
        return " ".join(p for p in self.parts(language) if p)


def builtin_template(template_id: int) -> PromptTemplate:
    """Templates are numbered from 1 in the order they are listed."""
    if not 1 <= template_id <= len(BUILTIN_TEMPLATES):
        raise ContractError(f"template id {template_id} outside 1..{len(BUILTIN_TEMPLATES)}")
    return PromptTemplate(BUILTIN_TEMPLATES[template_id - 1], template_id)


def load_templates(path: str | Path) -> list[PromptTemplate]:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return [PromptTemplate(ln, i) for i, ln in enumerate((ln for ln in lines if ln), start=1)]


def render_prompt(template: PromptTemplate, language: str, vocab: Vocab) -> tuple[list[int], list[int]]:
    """Token ids around the query span: ``BOS pre <Speech>`` and ``</Speech> post SEP``."""
    pre, post = template.parts(language)
    prefix = [BOS] + tokenize(pre, vocab) + [vocab.id(SPEECH_OPEN)]
    suffix = [vocab.id(SPEECH_CLOSE)] + tokenize(post, vocab) + [SEP]
    return prefix, suffix


def prompt_words() -> list[str]:
    """Every normalized word the built-in templates can emit, in first-seen order."""
    seen: dict[str, None] = {}
    for text in BUILTIN_TEMPLATES:
        for tag in LANGUAGE_NAMES:
            pre, post = PromptTemplate(text).parts(language_name(tag))
            for w in (pre + " " + post).split():
                seen.setdefault(w, None)
    return list(seen)
