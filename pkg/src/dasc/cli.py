"""Command-line entry point: ``dasc <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import click

from .config import RunConfig, load_run_config, provenance
from .controllers import METHODS, extra_param_count
from .decoding import DECODE_METHODS, DecodeConfig, decode_many, generate
from .errors import ConfigError, DascError, DataError, MethodMismatchError, SchemaMismatchError
from .evaluation import alpha_sweep, embedding_export, evaluate, robustness_suite, sweep_tsv
from .model import ModelConfig
from .synthlang import (
    Corpus,
    build_default_schema,
    build_vocab,
    generate_corpus,
    load_corpus,
    parse_attrs,
    save_corpus,
    split,
)
from .trainer import Checkpoint, build_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("dasc")


# --- helpers ----------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _sidecar(path: Path, meta: dict) -> None:
    """Provenance next to artifacts that have no header of their own (JSONL, TSV)."""
    _write_json(path.with_name(path.name + ".run.json"), meta)


def _splits(corpus: Corpus, run: RunConfig):
    seed = corpus.meta.get("split_seed", 0)
    ratios = tuple(corpus.meta.get("split_ratios", run.split_ratios))
    return dict(zip(("train", "dev", "test"), split(corpus.samples, ratios, seed=seed)))


def _load(ckpt_path: str, corpus_dir: str | None = None):
    ckpt = load_checkpoint(ckpt_path)
    corpus = None
    if corpus_dir is not None:
        corpus = load_corpus(corpus_dir)
        if corpus.schema.digest() != ckpt.schema_hash:
            raise SchemaMismatchError(
                f"corpus schema {corpus.schema.digest()} does not match checkpoint {ckpt.schema_hash}"
            )
        if corpus.vocab != ckpt.vocab:
            raise DataError("corpus vocabulary differs from the checkpoint's")
    return ckpt, corpus


def _decode_cfg(run: RunConfig, ckpt: Checkpoint, method, alpha, no_scale, greedy, top_p, seed, max_len=None):
    method = method or ckpt.method
    if method not in ("baseline", "rerank") and method != ckpt.method:
        raise MethodMismatchError(f"checkpoint was trained with {ckpt.method!r}; cannot decode with {method!r}")
    base = run.decode.to_dict()
    base.update(method=method)
    if alpha is not None:
        base["alpha"] = alpha
    if no_scale:
        base["scale_alpha_by_k"] = False
    if greedy:
        base["strategy"] = "greedy"
    if top_p is not None:
        base.update(strategy="top_p", top_p=top_p)
    if seed is not None:
        base["seed"] = seed
    if max_len is not None:
        base["max_len"] = max_len
    return DecodeConfig(**base)


def _run_config(config: str | None, **overrides) -> RunConfig:
    return load_run_config(config, overrides)


decode_options = [
    click.option("--method", type=click.Choice(DECODE_METHODS), default=None,
                 help="Decoding method (default: the checkpoint's; baseline/rerank work with any checkpoint)."),
    click.option("--alpha", type=float, default=None, help="Control strength."),
    click.option("--no-scale-alpha", is_flag=True, help="Do not multiply alpha by the number of active attributes."),
    click.option("--greedy", is_flag=True, help="Greedy decoding."),
    click.option("--top-p", type=float, default=None, help="Nucleus sampling threshold."),
    click.option("--seed", type=int, default=None),
    click.option("--config", type=click.Path(dir_okay=False), default=None, help="TOML run config."),
]


def with_decode_options(fn):
    for opt in reversed(decode_options):
        fn = opt(fn)
    return fn


# --- commands ---------------------------------------------------------------


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Log progress (-v info, -vv debug).")
def cli(verbose: int) -> None:
    """Attribute-controlled dialogue generation on a synthetic corpus."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


@cli.command("gen-corpus")
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--topic-cue-prob", type=float, default=None)
def gen_corpus_cmd(config, out, n_samples, seed, topic_cue_prob):
    """Write corpus.jsonl, vocab.tsv, schema.json and meta.json to OUT."""
    run = _run_config(config, corpus={"n_samples": n_samples, "seed": seed, "topic_cue_prob": topic_cue_prob})
    schema = build_default_schema()
    vocab = build_vocab(schema)
    samples = generate_corpus(run.corpus, schema, vocab)
    meta = provenance(run, split_seed=run.corpus.seed, split_ratios=list(run.split_ratios))
    save_corpus(out, samples, schema, vocab, meta=meta)
    click.echo(f"wrote {len(samples)} samples to {out}")


@cli.command("train")
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--metrics", type=click.Path(dir_okay=False), default=None,
              help="Per-epoch metrics JSONL (default: next to the checkpoint).")
def train_cmd(method, config, corpus_dir, out, seed, epochs, metrics):
    """Train METHOD on the corpus train split and save the best-dev checkpoint."""
    run = _run_config(config, train={"method": method, "seed": seed, "epochs": epochs})
    if seed is None and "train" not in run.seeded:
        raise ConfigError("--seed is required unless [train] seed is set in the config")
    corpus = load_corpus(corpus_dir)
    parts = _splits(corpus, run)
    model_cfg = ModelConfig(vocab_size=len(corpus.vocab), **run.model)
    out = Path(out)
    metrics_path = Path(metrics) if metrics else out.with_name(out.stem + ".metrics.jsonl")
    result = train(parts["train"], parts["dev"], corpus.schema, corpus.vocab, run.train, model_cfg,
                   metrics_path=metrics_path, metadata=provenance(run, corpus=str(corpus_dir)))
    save_checkpoint(result.checkpoint, out)
    _sidecar(metrics_path, provenance(run))
    best = result.history[result.best_epoch]
    click.echo(f"saved {out} (epoch {best.epoch}, dev loss {best.dev_total:.4f})")


@cli.command("generate")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--context-file", required=True, type=click.Path(dir_okay=False),
              help="One context per line as space-separated vocabulary tokens.")
@click.option("--attrs", required=True, help='e.g. "emotion=happiness,style=alpha,question=question"')
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSONL output (default stdout).")
@click.option("--max-len", type=int, default=None)
@with_decode_options
def generate_cmd(ckpt, context_file, attrs, out, max_len, method, alpha, no_scale_alpha, greedy, top_p, seed, config):
    """Generate one response per context line under the given attributes."""
    run = _run_config(config)
    if seed is None and "decode" not in run.seeded:
        raise ConfigError("--seed is required unless [decode] seed is set in the config")
    ck, _ = _load(ckpt)
    cfg = _decode_cfg(run, ck, method, alpha, no_scale_alpha, greedy, top_p, seed, max_len)
    model, head = build_model(ck)
    assignment = parse_attrs(ck.schema, attrs)
    lines = [l for l in Path(context_file).read_text(encoding="utf-8").splitlines() if l.strip()]
    contexts = [ck.vocab.encode(l) for l in lines]
    gens = decode_many(model, head, contexts, [assignment] * len(contexts), cfg, ck.schema, ck.vocab)
    records = [
        {
            "context_ids": list(c),
            "assignment": assignment.to_dict(ck.schema),
            "tokens": g.tokens,
            "text": ck.vocab.decode(g.tokens),
            "terminated_by": g.terminated_by,
        }
        for c, g in zip(contexts, gens)
    ]
    text = "".join(json.dumps(r) + "\n" for r in records)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        _sidecar(Path(out), provenance(run, decode=cfg.to_dict(), checkpoint=str(ckpt)))
    else:
        click.echo(text, nl=False)


@cli.command("eval")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(file_okay=False))
@click.option("--split", "split_name", type=click.Choice(["train", "dev", "test"]), default="test")
@click.option("--n", type=int, default=None, help="Evaluate the first N samples of the split.")
@click.option("--out", type=click.Path(dir_okay=False), default="report.json")
@click.option("--generations", type=click.Path(dir_okay=False), default=None, help="Also write generations JSONL.")
@with_decode_options
def eval_cmd(ckpt, corpus_dir, split_name, n, out, generations, method, alpha, no_scale_alpha, greedy, top_p, seed, config):
    """Control accuracy and Distinct-2 under gold attributes."""
    run = _run_config(config)
    ck, corpus = _load(ckpt, corpus_dir)
    cfg = _decode_cfg(run, ck, method, alpha, no_scale_alpha, greedy, top_p, seed)
    samples = _splits(corpus, run)[split_name][:n]
    model, head = build_model(ck)
    rep, gens = evaluate(model, head, samples, cfg, corpus.schema, corpus.vocab)
    rep.config.update(provenance(run, checkpoint=str(ckpt), split=split_name))
    rep.write(out)
    if generations:
        _write_generations(Path(generations), samples, gens, corpus, run)
    click.echo(json.dumps({k: v for k, v in rep.to_dict().items() if k != "config"}, sort_keys=True))


def _write_generations(path: Path, samples, gens, corpus: Corpus, run: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s, g in zip(samples, gens):
            fh.write(json.dumps({
                "context_ids": list(s.context),
                "assignment": s.gold.to_dict(corpus.schema),
                "tokens": g.tokens,
                "text": corpus.vocab.decode(g.tokens),
            }) + "\n")
    _sidecar(path, provenance(run))


@cli.command("robustness")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n", type=int, default=100, help="Number of test contexts (each decoded under every emotion).")
@click.option("--out", type=click.Path(dir_okay=False), default="robustness.json")
@with_decode_options
def robustness_cmd(ckpt, corpus_dir, n, out, method, alpha, no_scale_alpha, greedy, top_p, seed, config):
    """Force every emotion on each of N test contexts (greedy decoding)."""
    run = _run_config(config)
    ck, corpus = _load(ckpt, corpus_dir)
    cfg = _decode_cfg(run, ck, method, alpha, no_scale_alpha, greedy, top_p, seed)
    samples = _splits(corpus, run)["test"][:n]
    model, head = build_model(ck)
    rep, _, _ = robustness_suite(model, head, samples, cfg, corpus.schema, corpus.vocab)
    rep.config.update(provenance(run, checkpoint=str(ckpt)))
    rep.write(out)
    click.echo(json.dumps({k: v for k, v in rep.to_dict().items() if k != "config"}, sort_keys=True))


@cli.command("sweep-alpha")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(file_okay=False))
@click.option("--alphas", default="0,0.5,1,2,4", help="Comma-separated control strengths.")
@click.option("--n", type=int, default=500)
@click.option("--out", type=click.Path(dir_okay=False), default="sweep.tsv")
@with_decode_options
def sweep_cmd(ckpt, corpus_dir, alphas, n, out, method, alpha, no_scale_alpha, greedy, top_p, seed, config):
    """Standard evaluation repeated for each alpha; writes a TSV."""
    run = _run_config(config)
    try:
        values = [float(a) for a in alphas.split(",") if a.strip()]
    except ValueError:
        raise ConfigError(f"--alphas must be comma-separated numbers, got {alphas!r}") from None
    ck, corpus = _load(ckpt, corpus_dir)
    cfg = _decode_cfg(run, ck, method, alpha, no_scale_alpha, greedy, top_p, seed)
    samples = _splits(corpus, run)["test"][:n]
    model, head = build_model(ck)
    rows = alpha_sweep(model, head, samples, cfg, corpus.schema, corpus.vocab, values)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(sweep_tsv(rows), encoding="utf-8")
    _sidecar(Path(out), provenance(run, decode=cfg.to_dict(), checkpoint=str(ckpt)))
    click.echo(sweep_tsv(rows), nl=False)


@cli.command("params")
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--d", "d", type=int, required=True, help="Hidden size.")
@click.option("--vocab", "V", type=int, required=True, help="Vocabulary size.")
@click.option("--k", "K", type=int, required=True, help="Number of attributes.")
@click.option("--p", "p", type=int, default=None, help="Attribute-space dimension (dasc).")
def params_cmd(method, d, V, K, p):
    """Extra parameters a control method adds to the base model."""
    n = extra_param_count(method, d, V, K, p)
    line = f"{method}: {n} ({n / 1e6:.2f}M)"
    if method == "director":
        line += f"; per-attribute biases add {V * K} more"
    click.echo(line)


@cli.command("export-embeddings")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--split", "split_name", type=click.Choice(["train", "dev", "test"]), default="dev")
@click.option("--config", type=click.Path(dir_okay=False), default=None)
def export_cmd(ckpt, corpus_dir, out, split_name, config):
    """Write atemb.tsv and ctxemb.tsv for a dasc checkpoint."""
    run = _run_config(config)
    ck, corpus = _load(ckpt, corpus_dir)
    if ck.method != "dasc":
        raise MethodMismatchError(f"embedding export needs a dasc checkpoint, got {ck.method!r}")
    model, head = build_model(ck)
    samples = _splits(corpus, run)[split_name]
    paths = embedding_export(model, head, samples, corpus.schema, corpus.vocab, out)
    for p in paths:
        _sidecar(p, provenance(run, checkpoint=str(ckpt), split=split_name))
    click.echo(" ".join(str(p) for p in paths))


REPL_HELP = """commands:
  :attrs SPEC     set attributes, e.g. :attrs emotion=happiness,style=alpha,question=question
  :alpha X        set control strength
  :greedy | :top-p P    choose decoding strategy
  :quit           leave
anything else is a context (space-separated vocabulary tokens)"""


@cli.command("repl")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=0)
def repl_cmd(ckpt, seed):
    """Interactive decoding with per-step top-5 adjusted tokens."""
    ck, _ = _load(ckpt)
    model, head = build_model(ck)
    vocab, schema = ck.vocab, ck.schema
    method = ck.method
    state = {"attrs": parse_attrs(schema, "question=question"), "alpha": 1.0, "strategy": "greedy", "top_p": 0.5}
    click.echo(f"{method} checkpoint, |V|={len(vocab)}. {REPL_HELP}")
    for raw in sys.stdin:
        line = raw.strip()
        if not line:
            continue
        try:
            if line in (":quit", ":q"):
                break
            if line.startswith(":attrs"):
                state["attrs"] = parse_attrs(schema, line[len(":attrs"):].strip())
                click.echo(f"attrs: {', '.join(state['attrs'].ones(schema)) or 'none'}")
            elif line.startswith(":alpha"):
                state["alpha"] = float(line.split()[1])
            elif line == ":greedy":
                state["strategy"] = "greedy"
            elif line.startswith(":top-p"):
                state.update(strategy="top_p", top_p=float(line.split()[1]))
            elif line.startswith(":"):
                click.echo(REPL_HELP)
            else:
                cfg = DecodeConfig(method=method, alpha=state["alpha"], strategy=state["strategy"],
                                   top_p=state["top_p"], seed=seed)
                context = vocab.encode(line)
                if method == "ctrl" and not all(state["attrs"].target(schema, a.name) for a in schema.aspects):
                    raise ConfigError("ctrl needs exactly one attribute per aspect; use :attrs")
                g = generate(model, head, context, state["attrs"], cfg, schema, vocab)
                click.echo(f"> {vocab.decode(g.tokens)}  [{g.terminated_by}]")
                for i, st in enumerate(g.steps):
                    top = "  ".join(f"{vocab.tokens[t]}:{p:.2f}" for t, p in st.top)
                    click.echo(f"  {i:2d} {vocab.tokens[st.chosen]:<12} {top}")
        except (DascError, ValueError, IndexError) as exc:
            click.echo(f"error: {exc}")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="dasc", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except DascError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
