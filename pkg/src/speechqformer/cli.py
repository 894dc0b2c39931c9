"""Command-line entry point: ``speechqformer <command> ...``.

Every command that writes files takes ``--out`` and writes nothing elsewhere.
Runs echo their fully resolved configuration to ``<out>/config.echo``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or usage
error, 3 training abort, 4 missing or corrupt artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import evaluation, gradsuite, llm, prompts, trainer
from .config import RunConfig
from .data import SampleRecord, gen_corpus, languages_for, parse_lm_line, read_manifest
from .errors import ConfigError, ContractError, FormatError, TrainingError
from .frontend import load_features, pad_features
from .optim import AdamState
from .prompts import PromptTemplate, builtin_template, language_name
from .qformer import AdapterParams
from .textproc import Vocab, detokenize, load_connectives

log = logging.getLogger("speechqformer")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_USAGE = 2
EXIT_ABORT = 3
EXIT_ARTIFACT = 4


class MissingArtifact(Exception):
    """An input file named on the command line does not exist."""


# -- shared plumbing --------------------------------------------------------------

def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"cannot serialize {type(o).__name__}")
    return json.dumps(obj, sort_keys=True, default=default)


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())


def _out(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        cfg.write_echo(out)
    return out


def _status(out: Path, command: str, status: str, **extra) -> None:
    (out / "status.json").write_text(_json({"command": command, "status": status, **extra}) + "\n",
                                     encoding="utf-8")


class _Metrics:
    """Streams step records to ``metrics.jsonl`` as they arrive."""

    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(_json(record) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _vocab(cfg: RunConfig, data_dir: Path | None = None) -> Vocab:
    """The corpus vocabulary implied by the config, checked against ``vocab.txt`` when available."""
    vocab = languages_for(cfg.corpus_spec()).vocab
    if data_dir is not None and (data_dir / "vocab.txt").exists():
        words = (data_dir / "vocab.txt").read_text(encoding="utf-8").splitlines()
        if words != vocab.itos:
            raise ContractError(f"{data_dir / 'vocab.txt'} does not match the configured corpus")
    return vocab


def _templates(cfg: RunConfig) -> list[PromptTemplate]:
    path = cfg["prompts.templates"]
    if path:
        return prompts.load_templates(_existing(path, "template file"))
    return [builtin_template(i) for i in range(1, len(prompts.BUILTIN_TEMPLATES) + 1)]


def _connectives(cfg: RunConfig):
    path = cfg["eval.connectives"]
    return load_connectives(_existing(path, "connectives file")) if path else evaluation.DEFAULT_CONNECTIVES


def _slot_span(vocab: Vocab) -> tuple[int, int]:
    return vocab.id(prompts.SPEECH_OPEN), vocab.id(prompts.SPEECH_CLOSE)


def _load_adapter(path: str | Path) -> tuple[AdapterParams, AdamState, trainer.Checkpoint]:
    ckpt = trainer.load_checkpoint(_existing(path, "checkpoint"))
    params, state = trainer.restore_adapter(ckpt)
    return params, state, ckpt


def _load_lm(path: str | Path) -> llm.FrozenLM:
    return trainer.load_frozen_lm(_existing(path, "language model checkpoint"))


def _check_lm_match(params: AdapterParams, lm: llm.FrozenLM) -> None:
    if params.config.d_lm != lm.config.d_model:
        raise ContractError(f"adapter projects to {params.config.d_lm} dims but the LM has {lm.config.d_model}")


def _checkpoint_hook(out: Path, make: Callable) -> Callable:
    def save(run) -> None:
        path = out / "checkpoints" / f"step-{run.step:06d}.spqc"
        trainer.save_checkpoint(path, make(run))
        log.info("saved %s", path)
    return save


def _train_guard(out: Path, command: str, body: Callable[[], dict]) -> dict:
    """Run a training body; on abort leave ``status.json`` saying so and re-raise."""
    _status(out, command, "running")
    try:
        result = body()
    except TrainingError as exc:
        _status(out, command, "aborted", error=str(exc))
        raise
    _status(out, command, "complete", **result)
    return result


# -- commands -----------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    files = gen_corpus(cfg.corpus_spec(), cfg.encoder_spec(), out)
    print(_json({"command": "synth-data", "rows": files.counts}))
    return EXIT_OK


def cmd_pretrain_lm(args) -> int:
    cfg = _config(args)
    data = _existing(args.data, "data directory")
    vocab = _vocab(cfg, data)
    pairs = {}
    for split in ("lm_train", "lm_dev"):
        lines = _existing(data / f"{split}.txt", "LM corpus").read_text(encoding="utf-8").splitlines()
        pairs[split] = [parse_lm_line(ln, vocab) for ln in lines if ln.strip()]
    resume = trainer.restore_lm(trainer.load_checkpoint(_existing(args.resume, "checkpoint"))) if args.resume else None
    if resume is not None and resume.lm.frozen:
        raise ContractError("cannot resume training from a frozen LM")
    out = _out(args, cfg)
    tcfg = cfg.lm_train_config()

    def body():
        metrics = _Metrics(out / "metrics.jsonl")
        try:
            run = llm.train_lm(pairs["lm_train"], pairs["lm_dev"], cfg.lm_config(), tcfg, metrics, resume,
                               _checkpoint_hook(out, trainer.lm_checkpoint), _slot_span(vocab))
        finally:
            metrics.close()
        llm.check_lm_run(run, tcfg)
        run.lm.freeze()
        checksum = trainer.save_checkpoint(out / "lm.spqc", trainer.lm_checkpoint(run))
        return {"checkpoint": "lm.spqc", "checksum": checksum, "step": run.step, "dev_perplexity": run.perplexity}

    print(_json(_train_guard(out, "pretrain-lm", body)))
    return EXIT_OK


def _speech_sets(data: Path, d_enc: int) -> tuple[trainer.SpeechSet, trainer.SpeechSet]:
    train_rows = read_manifest(_existing(data / "train.jsonl", "train manifest"))
    dev_rows = read_manifest(_existing(data / "dev.jsonl", "dev manifest"))
    return (trainer.SpeechSet.load(train_rows, data, d_enc),
            trainer.SpeechSet.load(trainer.unique_utterances(dev_rows), data, d_enc))


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    data = _existing(args.data, "data directory")
    vocab = _vocab(cfg, data)
    qcfg = cfg.qformer_config()
    resume = None
    if args.resume:
        params, state, ckpt = _load_adapter(args.resume)
        if params.config != qcfg:
            raise ContractError("resume checkpoint was written with a different Q-Former configuration")
        resume = trainer.AdapterRun(params, state, ckpt.step)
    train, dev = _speech_sets(data, qcfg.d_enc)
    out = _out(args, cfg)
    pcfg = cfg.pretrain_config()
    seed = cfg["seed"]
    meta = {"stage": "pretrain", "seed": seed}

    def make(run):
        return trainer.adapter_checkpoint(run.params, run.state, run.step, meta)

    def body():
        metrics = _Metrics(out / "metrics.jsonl")
        try:
            run = trainer.pretrain(train, dev, qcfg, pcfg, seed, vocab, metrics, resume, _checkpoint_hook(out, make))
        finally:
            metrics.close()
        checksum = trainer.save_checkpoint(out / "adapter.spqc", make(run))
        final = {k: run.metrics[-1][k] for k in ("r_at_1", "stm_accuracy") if run.metrics and k in run.metrics[-1]}
        return {"checkpoint": "adapter.spqc", "checksum": checksum, "step": run.step, **final}

    print(_json(_train_guard(out, "pretrain", body)))
    return EXIT_OK


def _dev_eval(cfg: RunConfig, rows: Sequence[SampleRecord], root: Path, lm: llm.FrozenLM, vocab: Vocab,
              languages: Sequence[str]) -> Callable[[AdapterParams], dict]:
    """Exact match and F1 per language on dev rows, using the configured evaluation template."""
    tpl = builtin_template(cfg["eval.template_id"])
    by_lang = {lang: [r for r in rows if r.language == lang] for lang in languages}

    def run(params: AdapterParams) -> dict:
        out = {}
        for lang, subset in by_lang.items():
            if not subset:
                continue
            rep = evaluation.corpus_eval(subset, params, lm, tpl, vocab, root, batch_size=cfg["eval.batch_size"],
                                         max_len=cfg["eval.max_len"], seed=cfg["seed"])
            out[f"dev_em_{lang}"] = rep.mean("exact_match")
            out[f"dev_f1_{lang}"] = rep.mean("f1")
        return out
    return run


def cmd_finetune(args) -> int:
    cfg = _config(args)
    data = _existing(args.data, "data directory")
    vocab = _vocab(cfg, data)
    lm_path = _existing(args.lm, "language model checkpoint")
    lm_checksum = trainer.file_checksum(lm_path)
    lm = _load_lm(lm_path)
    if args.resume:
        params, state, ckpt = _load_adapter(args.resume)
        resume = trainer.AdapterRun(params, state, ckpt.step)
    elif args.init:
        params, _, _ = _load_adapter(args.init)
        resume = None
    else:
        raise ContractError("finetune needs --init (a pre-trained adapter) or --resume")
    _check_lm_match(params, lm)
    train_rows = read_manifest(_existing(data / "train.jsonl", "train manifest"))
    train = trainer.SpeechSet.load(train_rows, data, params.config.d_enc)
    fcfg = cfg.finetune_config()
    seed = cfg["seed"]
    dev_eval = None
    if fcfg.eval_every and (data / "dev.jsonl").exists():
        langs = sorted({r.language for r in train_rows})
        dev_eval = _dev_eval(cfg, read_manifest(data / "dev.jsonl"), data, lm, vocab, langs)
    out = _out(args, cfg)
    meta = {"stage": "finetune", "seed": seed, "lm_checksum": lm_checksum}
    before = trainer.frozen_snapshot(lm, cfg.encoder_spec())

    def make(run):
        return trainer.adapter_checkpoint(run.params, run.state, run.step, meta)

    def body():
        metrics = _Metrics(out / "metrics.jsonl")
        try:
            run = trainer.finetune(train, params, lm, fcfg, seed, vocab, _templates(cfg), metrics, resume,
                                   _checkpoint_hook(out, make), dev_eval)
        finally:
            metrics.close()
        sweep = trainer.frozen_sweep(before, trainer.frozen_snapshot(lm, cfg.encoder_spec()))
        sweep["lm_checksum_before"] = lm_checksum
        sweep["lm_checksum_after"] = trainer.file_checksum(lm_path)
        sweep["ok"] = sweep["ok"] and lm_checksum == sweep["lm_checksum_after"]
        (out / "frozen_sweep.json").write_text(json.dumps(sweep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if not sweep["ok"]:
            raise TrainingError("frozen parameters changed during fine-tuning")
        checksum = trainer.save_checkpoint(out / "adapter.spqc", make(run))
        final = {k: v for k, v in (run.metrics[-1] if run.metrics else {}).items() if k.startswith("dev_")}
        return {"checkpoint": "adapter.spqc", "checksum": checksum, "step": run.step, "frozen_ok": sweep["ok"],
                **final}

    print(_json(_train_guard(out, "finetune", body)))
    return EXIT_OK


def _eval_kwargs(cfg: RunConfig) -> dict:
    return {"batch_size": cfg["eval.batch_size"], "max_len": cfg["eval.max_len"], "seed": cfg["seed"],
            "idf": cfg["eval.idf"], "connectives": _connectives(cfg)}


def cmd_select_prompt(args) -> int:
    cfg = _config(args)
    manifest = _existing(args.dev_manifest, "dev manifest")
    rows = read_manifest(manifest)
    lm = _load_lm(args.lm)
    params, _, _ = _load_adapter(args.checkpoint)
    _check_lm_match(params, lm)
    vocab = _vocab(cfg, manifest.parent)
    out = _out(args, cfg)
    sel = evaluation.select_prompt(rows, params, lm, _templates(cfg), vocab, manifest.parent, **_eval_kwargs(cfg))
    sel.write(out / "prompt_selection.json")
    for s in sel.scores:
        print(_json({"template_id": s["template_id"], "f1": s["f1"], "exact_match": s["exact_match"]}))
    print(_json({"chosen": sel.chosen, "tie": sel.tie, "tied": sel.tied}))
    return EXIT_OK


def _template_arg(cfg: RunConfig, args) -> PromptTemplate:
    if getattr(args, "prompt_selection", None):
        chosen = evaluation.PromptSelection.read(_existing(args.prompt_selection, "prompt selection")).chosen
    elif args.template is not None:
        chosen = args.template
    else:
        chosen = cfg["eval.template_id"]
    templates = _templates(cfg)
    if not 1 <= chosen <= len(templates):
        raise ContractError(f"template id {chosen} outside 1..{len(templates)}")
    return templates[chosen - 1]


def cmd_generate(args) -> int:
    cfg = _config(args)
    params, _, _ = _load_adapter(args.checkpoint)
    lm = _load_lm(args.lm)
    _check_lm_match(params, lm)
    vocab = _vocab(cfg)
    tpl = _template_arg(cfg, args)
    connectives = _connectives(cfg)
    if args.manifest:
        manifest = _existing(args.manifest, "manifest")
        rows = read_manifest(manifest)
        items = [(manifest.parent / r.features, args.language or r.language) for r in rows]
    else:
        if not args.language:
            raise ContractError("--language is required with --features")
        items = [(Path(args.features), args.language)]
    feats = [load_features(_existing(p, "feature file"), d_enc=params.config.d_enc) for p, _ in items]

    lines: list[str] = [""] * len(items)
    by_lang: dict[str, list[int]] = {}
    for i, (_, lang) in enumerate(items):
        by_lang.setdefault(lang, []).append(i)
    bs = cfg["eval.batch_size"]
    for lang, idx in sorted(by_lang.items()):
        for s in range(0, len(idx), bs):
            chunk = idx[s:s + bs]
            x, valid = pad_features([feats[i] for i in chunk])
            outs = llm.generate_batch(params, lm, x, valid, tpl, language_name(lang), vocab, cfg["eval.max_len"])
            for i, ids in zip(chunk, outs):
                lines[i] = evaluation.clean_output(detokenize(ids, vocab), tpl, lang, connectives)
    text = "".join(ln + "\n" for ln in lines)
    if args.out:
        out = _out(args, cfg)
        (out / "generations.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = _existing(args.test_manifest, "test manifest")
    rows = read_manifest(manifest)
    lm = _load_lm(args.lm)
    vocab = _vocab(cfg, manifest.parent)
    tpl = _template_arg(cfg, args)
    params = None
    generate_fn = None
    if args.oracle:
        generate_fn = SampleRecord.target_text
    else:
        if not args.checkpoint:
            raise ContractError("eval needs --checkpoint unless --oracle is given")
        params, _, _ = _load_adapter(args.checkpoint)
        _check_lm_match(params, lm)
    out = _out(args, cfg)
    report = evaluation.corpus_eval(rows, params, lm, tpl, vocab, manifest.parent, generate_fn=generate_fn,
                                    **_eval_kwargs(cfg))
    report.write(out / "eval_report.jsonl")
    summary = report.summary()
    by_lang = {}
    for lang in sorted({s.language for s in report.samples}):
        sub = [s for s in report.samples if s.language == lang]
        by_lang[lang] = {"count": len(sub), "f1": float(np.mean([s.f1 for s in sub])),
                         "exact_match": float(np.mean([s.exact_match for s in sub]))}
    summary["by_language"] = by_lang
    summary.pop("config")
    print(_json(summary))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(args.scope, seed=args.seed)
    worst = 0.0
    for scope, name, err in results:
        ok = err < gradsuite.TOLERANCE
        worst = max(worst, err)
        print(f"{scope:<10} {name:<28} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
    passed = worst < gradsuite.TOLERANCE
    print(f"{len(results)} cases, worst {worst:.3e}, tolerance {gradsuite.TOLERANCE:g}: {'PASS' if passed else 'FAIL'}")
    if args.out:
        out = _out(args)
        rows = [{"scope": s, "name": n, "max_rel_err": e} for s, n, e in results]
        (out / "gradcheck.json").write_text(_json({"cases": rows, "passed": passed}) + "\n", encoding="utf-8")
    return EXIT_OK if passed else EXIT_GRADCHECK


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechqformer", description="Q-Former speech adapter toolkit (desk scale)")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, config=True, out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if config:
            p.add_argument("--config", help="flat key=value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    command("synth-data", cmd_synth_data, "generate the synthetic corpus")

    p = command("pretrain-lm", cmd_pretrain_lm, "train and freeze the toy language model")
    p.add_argument("--data", required=True)
    p.add_argument("--resume")

    p = command("pretrain", cmd_pretrain, "pre-train the adapter with STC, STM and STG")
    p.add_argument("--data", required=True)
    p.add_argument("--resume")

    p = command("finetune", cmd_finetune, "instruction fine-tuning through the frozen LM")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--init", help="pre-trained adapter checkpoint")
    g.add_argument("--resume", help="fine-tuning checkpoint to continue from")

    p = command("select-prompt", cmd_select_prompt, "score every template on a dev manifest")
    p.add_argument("--dev-manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lm", required=True)

    p = command("generate", cmd_generate, "greedy generation for one feature file or a manifest", out=False)
    p.add_argument("--out", help="also write generations.txt here")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lm", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--features")
    g.add_argument("--manifest")
    p.add_argument("--language", help="target language tag; unseen tags are passed to the prompt as-is")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--template", type=int)
    g.add_argument("--prompt-selection", help="use the template chosen in this prompt_selection.json")

    p = command("eval", cmd_eval, "generate and score a test manifest")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the references against themselves")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--template", type=int)
    g.add_argument("--prompt-selection")

    p = command("gradcheck", cmd_gradcheck, "finite-difference gradient suite", config=False, out=False)
    p.add_argument("--scope", choices=gradsuite.SCOPES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (MissingArtifact, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
