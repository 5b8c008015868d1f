"""Command-line entry point: ``milgan <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import embed_mm as mm
from .baselines import baseline_pg_similarity, baseline_random, baseline_ss
from .checkpoint import load_model, save_model
from .errors import MilganError, SchemaError
from .gan import TrainConfig, apply_policy, pretrain, pretrain_generator, train
from .metrics import cosine_matrix
from .policy import CandidateSet
from .seqdata import (MODALITIES, EventCorpus, PlantedPolicy, Storyline, dump_dataset,
                      load_dataset, synth_corpus)

log = logging.getLogger("milgan")


def _config(args, text: str = "") -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    elif text:
        values = dict(line.split(" = ", 1) for line in text.strip().splitlines())
        cfg = TrainConfig.from_mapping(values)
    else:
        cfg = TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "length", None) is not None:
        overrides["T"] = args.length
    if getattr(args, "temperature", None) is not None:
        overrides["temperature"] = args.temperature
    return cfg.replace(**overrides) if overrides else cfg


def _corpus(path, event=None, role="train") -> EventCorpus:
    corpora = load_dataset(path, role)
    if not corpora:
        raise SchemaError(f"{path}: no events")
    if event is None:
        return corpora[0]
    for c in corpora:
        if c.event_id == event:
            return c
    raise SchemaError(f"{path}: no event {event!r}")


def _write_storylines(path, storylines, seed) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sl in storylines:
            fh.write(json.dumps({"start": sl.names[0], "nodes": sl.names, "seed": seed}) + "\n")


def _starts(args, corpus: EventCorpus, seed: int):
    if args.start:
        return list(args.start)
    rng = np.random.default_rng(seed)
    names = corpus.names()
    n = args.n if args.n is not None else len(names)
    return [names[i] for i in rng.choice(len(names), size=n, replace=n > len(names))]


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _config(args)
    train_c, test_c, planted = synth_corpus(args.n_entities, args.dim, args.image_dim, cfg.T,
                                            args.n_storylines, cfg.seed)
    dump_dataset([train_c], args.out)
    if args.test_out:
        dump_dataset([test_c], args.test_out)
    if args.planted_out:
        Path(args.planted_out).write_text(json.dumps(planted.successor, sort_keys=True) + "\n")


def _mm_items(corpus: EventCorpus, vocab: dict[str, int]):
    items = []
    for sl in corpus.storylines:
        for t in range(len(sl) - 1):
            node = sl.nodes[t]
            if node.image_feat is None:
                continue
            items.append(mm.MMCorpusItem(tuple(vocab[n] for n in sl.names[t:]), node.image_feat))
    return items


def _project(corpus: EventCorpus, params: mm.MMParams) -> EventCorpus:
    entities = {}
    for name, node in corpus.entities.items():
        if node.image_feat is not None:
            node = node.with_image_vec(mm.embed_image(params, node.image_feat))
        entities[name] = node
    out = EventCorpus(corpus.event_id, entities, [], corpus.role, corpus.missing_images)
    out.storylines = [Storyline(sl.event_id, tuple(entities[n] for n in sl.names))
                      for sl in corpus.storylines]
    return out


def cmd_embed_mm(args) -> None:
    cfg = _config(args)
    corpora = load_dataset(args.data)
    nodes = [n for c in corpora for n in c.entities.values()]
    vocab = {n.name: i for i, n in enumerate(nodes)}
    items = [it for c in corpora for it in _mm_items(c, vocab)]
    if not items:
        raise SchemaError(f"{args.data}: no storyline nodes with image features to train on")
    word_embed = np.stack([n.text_vec for n in nodes])
    params = mm.MMParams.init(word_embed, len(items[0].image_feat), args.rank, seed=cfg.seed)
    params, history = mm.train_mm(items, params, args.epochs, args.rate, cfg.seed)
    log.info("embed-mm: NLL %.4f -> %.4f", history[0] if history else float("nan"),
             history[-1] if history else float("nan"))
    if args.model_out:
        mm.save_mm(params, args.model_out)
    dump_dataset([_project(c, params) for c in corpora], args.out)
    if args.apply:
        if not args.apply_out:
            raise SchemaError("--apply needs --apply-out")
        dump_dataset([_project(c, params) for c in load_dataset(args.apply)], args.apply_out)


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    corpus = _corpus(args.data, args.event)
    gen, disc = pretrain(corpus, cfg)
    save_model(args.out, gen, disc, cfg.to_text())


def cmd_train(args) -> None:
    cfg = _config(args)
    corpus = _corpus(args.data, args.event)
    init = None
    if args.init:
        gen, disc, _ = load_model(args.init)
        if disc is None:
            raise SchemaError(f"{args.init}: checkpoint has no discriminator")
        init = (gen, disc)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def on_log(rec):
            log.info("round %d: sum_sim %.4f", rec["round"], rec["sum_sim"])
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        result = train(corpus, cfg, init=init, on_log=on_log)
    finally:
        if log_fh:
            log_fh.close()
    save_model(args.out, result.gen, result.disc, cfg.to_text())


def cmd_generate(args) -> None:
    gen, _, cfg_text = load_model(args.model)
    cfg = _config(args, cfg_text)
    corpus = _corpus(args.data, args.event, role="test")
    starts = _starts(args, corpus, cfg.seed)
    storylines = apply_policy(gen, corpus, cfg, starts=starts, seed=cfg.seed)
    _write_storylines(args.out, storylines, cfg.seed)


def cmd_baseline(args) -> None:
    cfg = _config(args)
    corpus = _corpus(args.data, args.event)
    target = _corpus(args.apply, role="test") if args.apply else corpus
    starts = _starts(args, target, cfg.seed)
    if args.kind == "random":
        storylines = baseline_random(CandidateSet.from_corpus(target), starts, cfg.T, cfg.seed)
    else:
        if args.kind == "lstm":
            gen = pretrain_generator(corpus, cfg)
        elif args.kind == "ss":
            gen = baseline_ss(corpus, cfg)
        else:
            gen = baseline_pg_similarity(corpus, cfg)
        if args.model_out:
            save_model(args.model_out, gen, None, cfg.to_text())
        storylines = apply_policy(gen, target, cfg, starts=starts, seed=cfg.seed)
    _write_storylines(args.out, storylines, cfg.seed)


def _read_sequences(path, entities: dict):
    """Storyline name lists from a generated-storyline file or a dataset file."""
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") == "entity":
                continue
            names = rec.get("nodes")
            if not isinstance(names, list):
                raise SchemaError(f"{path}:{lineno}: record has no node list")
            missing = [n for n in names if n not in entities]
            if missing:
                raise SchemaError(f"{path}:{lineno}: unknown entities {missing}")
            seqs.append(names)
    return seqs


def _entity_table(paths) -> dict:
    table = {}
    for p in dict.fromkeys(str(Path(p).resolve()) for p in paths):
        for corpus in load_dataset(p):
            for name, node in corpus.entities.items():
                if name in table and table[name] is not node:
                    raise SchemaError(f"entity {name!r} defined in more than one event")
                table[name] = node
    return table


def cmd_eval(args) -> None:
    sources = list(args.data or [])
    for p in (args.ref, args.gen):
        with open(p, encoding="utf-8") as fh:
            if any('"kind": "entity"' in line or '"kind":"entity"' in line for line in fh):
                sources.append(p)
    entities = _entity_table(sources)
    ref = _read_sequences(args.ref, entities)
    gen = _read_sequences(args.gen, entities)
    cands = CandidateSet(list(entities.values()))
    ref_idx = np.array([[cands.index[n] for n in s] for s in ref], dtype=np.intp)
    gen_idx = np.array([[cands.index[n] for n in s] for s in gen], dtype=np.intp)
    ch = args.channel
    contrib = cosine_matrix(cands.channels(ref_idx, ch), cands.channels(gen_idx, ch))
    report = {
        "model": Path(args.gen).name,
        "reference": Path(args.ref).name,
        "channel": ch,
        "n_reference": len(ref),
        "n_generated": len(gen),
        "sum_sim": float(contrib.sum()),
        "contributions": contrib.tolist(),
        "audit": {
            "repeat_violations": sum(len(set(s)) != len(s) for s in gen),
            "nonzero_first_rows": int(np.count_nonzero(
                np.abs(cands.channels(gen_idx, ch)[:, 0]).sum(axis=1))),
        },
    }
    if args.planted:
        planted = PlantedPolicy(json.loads(Path(args.planted).read_text()))
        report["planted_match"] = planted.match_rate([cands.storyline(r) for r in gen_idx])
    if args.config:
        report["config"] = TrainConfig.from_file(args.config).to_text()
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"sum_sim = {report['sum_sim']!r}")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milgan")
    parser.add_argument("-v", "--verbose", action="store_true")
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                         help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[verbose], **kw)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True)
            p.add_argument("--event", help="event id inside --data (default: first)")
        return p

    p = common(sub.add_parser("synth", help="write a planted-policy synthetic corpus"), False)
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.add_argument("--planted-out")
    p.add_argument("--n-entities", type=int, default=20)
    p.add_argument("--n-storylines", type=int, default=200)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--image-dim", type=int, default=12)
    p.add_argument("--length", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed-mm", help="train the image-conditioned word model and "
                                        "rewrite image vectors")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--apply")
    p.add_argument("--apply-out")
    p.add_argument("--model-out")
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--rate", type=float, default=0.05)
    p.set_defaults(func=cmd_embed_mm)

    p = common(sub.add_parser("pretrain", help="MLE generator + cross-entropy critic"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train", help="full adversarial training"))
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="pretrained checkpoint to start from")
    p.add_argument("--log", help="line-delimited JSON training log")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("generate", help="generate storylines on a vocabulary"))
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--start", action="append")
    p.add_argument("--n", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="accumulated similarity between two storyline files")
    p.add_argument("--ref", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--channel", choices=MODALITIES, default="txt")
    p.add_argument("--data", action="append", help="dataset(s) supplying entity vectors")
    p.add_argument("--planted", help="successor map JSON from `synth --planted-out`")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("baseline", help="run a comparison generator"))
    p.add_argument("kind", choices=["random", "lstm", "ss", "pg"])
    p.add_argument("--out", required=True)
    p.add_argument("--apply", help="vocabulary to generate on (default: --data)")
    p.add_argument("--model-out")
    p.add_argument("--start", action="append")
    p.add_argument("--n", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_baseline)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MilganError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"milgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())
