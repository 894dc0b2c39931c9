"""Flat ``key=value`` run configuration with typed defaults and a full echo.

Keys are dotted (``pretrain.steps``) but the file is flat: one assignment per
line, ``#`` starts a comment.  Values are parsed according to the type of the
default; tuples are comma-separated.  Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from .data import CorpusSpec
from .errors import ConfigError
from .frontend import SynthEncoderSpec
from .llm import LMConfig, LMTrainConfig
from .qformer import QFormerConfig
from .trainer import FinetuneConfig, PretrainConfig


def _section(prefix: str, obj, skip: tuple[str, ...] = ()) -> dict[str, Any]:
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj) if f.name not in skip}


# Values derived from other sections are not settable: the Q-Former vocabulary,
# feature width and LM width always follow the corpus, encoder and LM sections.
_QF_DERIVED = ("vocab_size", "d_enc", "d_lm")

DEFAULTS: dict[str, Any] = {
    "seed": 42,
    **_section("corpus", CorpusSpec()),
    **_section("encoder", SynthEncoderSpec(), skip=("vocab_size",)),
    **_section("qformer", QFormerConfig(), skip=_QF_DERIVED),
    **_section("lm", LMConfig(), skip=("vocab_size",)),
    **_section("lm_train", LMTrainConfig(), skip=("seed",)),
    **_section("pretrain", PretrainConfig()),
    **_section("finetune", FinetuneConfig()),
    "eval.batch_size": 64,
    "eval.max_len": 12,
    "eval.idf": False,
    "eval.template_id": 1,
    "eval.connectives": "",
    "prompts.templates": "",
}


def _parse(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Resolved configuration: defaults overlaid with file and command-line overrides."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _parse(key, value, DEFAULTS[key]) if isinstance(value, str) else value
        self.validate()

    @staticmethod
    def assignments(text: str, source: str = "<config>") -> dict[str, str]:
        """Raw ``key -> value`` strings from config text; unknown or repeated keys are errors."""
        out: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
            if key in out:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            out[key] = value
        return out

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls(cls.assignments(text, source))

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "RunConfig":
        """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides in order."""
        values: dict[str, str] = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            values.update(cls.assignments(text, str(path)))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = (s.strip() for s in item.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def echo(self) -> str:
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))

    def write_echo(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "config.echo"
        path.write_text(self.echo(), encoding="utf-8")
        return path

    # -- typed views ------------------------------------------------------------
    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(**self.section("corpus"))

    def encoder_spec(self) -> SynthEncoderSpec:
        return SynthEncoderSpec(vocab_size=self["corpus.vocab_size"], **self.section("encoder"))

    def lm_config(self) -> LMConfig:
        return LMConfig(vocab_size=self["corpus.vocab_size"], **self.section("lm"))

    def lm_train_config(self) -> LMTrainConfig:
        return LMTrainConfig(seed=self["seed"], **self.section("lm_train"))

    def qformer_config(self) -> QFormerConfig:
        return QFormerConfig(vocab_size=self["corpus.vocab_size"], d_enc=self["encoder.d_enc"],
                             d_lm=self["lm.d_model"], **self.section("qformer"))

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.section("pretrain"))

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(**self.section("finetune"))

    def validate(self) -> None:
        """Build every typed view once so inconsistent values fail early."""
        try:
            self.corpus_spec()
            self.encoder_spec()
            self.lm_config()
            self.lm_train_config()
            self.qformer_config()
            self.pretrain_config().schedule()
            self.finetune_config().schedule()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
