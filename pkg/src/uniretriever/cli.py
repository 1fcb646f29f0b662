"""Command-line interface.

Every subcommand writes its artifacts under ``--out`` and is deterministic for
a fixed ``--seed``. Configuration comes from an optional flat ``key=value``
file (``--config``) overridden by trailing ``key=value`` arguments.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .core import Rng
from .harness import experiments as ex
from .harness.world import WorldConfig, generate, load_config, load_world, read_rank_source, save_world
from .rerank import AdaptConfig, TableRankSource, adapt_to_rank
from .search import SearchParams, search
from .store import CODEBOOK_FILE, CODES_FILE, POSTING_FILE, DiskIndex, PostingListFile
from .trainer.encoder import Encoder
from .trainer.train import TrainConfig, TrainLog, train

log = logging.getLogger("uniretriever")


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise SystemExit(f"expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, cls, **fixed):
    """Build ``cls`` from --config and key=value overrides, keeping only its fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    over = {k: v for k, v in _overrides(args.set).items() if k in names}
    unknown = set(_overrides(args.set)) - names - set(args.known_keys)
    if unknown:
        raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")
    return load_config(args.config, cls, ignore_unknown=True, **{**over, **fixed})


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# --- subcommands -----------------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg = _config(args, WorldConfig, seed=str(args.seed))
    world = generate(cfg, Rng(cfg.seed))
    save_world(world, args.out)
    print(f"world: {world.n_ads} ads, {len(world.query_text)} queries, "
          f"{len(world.train_clicks)} train / {len(world.test_clicks)} test clicks -> {args.out}")


def cmd_train(args) -> None:
    world = load_world(args.world)
    cfg = _config(args, TrainConfig, seed=str(args.seed))
    lg = TrainLog()
    enc = train(ex.dataset(world), cfg, log_out=lg)
    out = Path(args.out)
    enc.save(out / "model.enc")
    _write(out / "train_log.tsv", "step\tloss\n" + "".join(f"{i}\t{v:.8f}\n" for i, v in enumerate(lg.losses)))
    rep = ex.evaluate_encoder(enc, world)
    print(f"trained {lg.steps} steps; Hit@10={rep.hit_at[10]:.4f} Rel@10={rep.rel_at[10]:.4f} -> {out / 'model.enc'}")


def cmd_build(args) -> None:
    world = load_world(args.world)
    enc = Encoder.load(args.model)
    cfg = _config(args, ex.IndexConfig, seed=str(args.seed))
    idx = ex.build_index(enc, world, Path(args.out) / "index", cfg)
    h = idx.postings.header()
    print(f"index: N={h['N']} d={h['d']} R={h['R']} M={idx.tier1.codebook.M} "
          f"tier-one {idx.tier1.resident_bytes} bytes -> {Path(args.out) / 'index'}")
    idx.close()


def _read_queries(path) -> list[tuple[int, str]]:
    """Query file: TSV ``query_id \\t text`` with an optional header row."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            parts = line.rstrip("\n").split("\t")
            if lineno == 0 and not parts[0].isdigit():
                continue
            out.append((int(parts[0]), parts[1] if len(parts) > 1 else ""))
    return out


def cmd_search(args) -> None:
    idx = DiskIndex.open(args.index)
    enc = Encoder.load(args.model)
    queries = _read_queries(args.query_file)
    p = SearchParams(k=args.k, L_search=max(args.l, args.k), beam_width=args.beam_width)
    vecs = enc.serving_embeddings([t for _, t in queries])
    head = "query_id\trank\titem_id\tscore"
    if args.stats:
        head += "\thops\tsector_reads\tpq_evals\texact_evals"
    lines = [head]
    for (qid, _), v in zip(queries, vecs):
        res = search(idx, v, p)
        st = res.stats
        extra = f"\t{st.hops}\t{st.sector_reads}\t{st.pq_evals}\t{st.exact_evals}" if args.stats else ""
        for r, (item, score) in enumerate(res.items, 1):
            lines.append(f"{qid}\t{r}\t{item}\t{score:.6f}{extra}")
    text = "\n".join(lines) + "\n"
    _write(Path(args.out) / "search.tsv", text)
    sys.stdout.write(text)
    idx.close()


def cmd_adapt(args) -> None:
    world = load_world(args.world)
    enc = Encoder.load(args.model)
    table = read_rank_source(args.ranks)
    src = TableRankSource(table)
    train_ids = [q for q in world.rank_train_ids.tolist() if (q, 0) in table]
    if not train_ids:
        raise SystemExit(f"{args.ranks} has no rank inputs for the world's adaptation queries")
    cfg = _config(args, AdaptConfig, seed=str(args.seed))
    params = SearchParams(k=args.k, L_search=args.l)
    base = DiskIndex.open(args.index)
    texts = [world.query_text[q] for q in train_ids]
    route = enc.serving_embeddings(texts)
    first = [[i for i, _ in search(base, route[j], params).candidates] for j in range(len(texts))]
    base.close()
    hist: list = []
    adapted = adapt_to_rank(enc, first, list(zip(train_ids, texts)), world.ad_text, src, cfg, hist)
    out = Path(args.out)
    adapted.save(out / "adapted.enc")
    ex.with_tier_two(args.index, adapted.rank_embeddings(world.ad_text), out / "bi_index").close()
    _write(out / "adapt_log.tsv", "step\tloss\n" + "".join(f"{i}\t{v:.8f}\n" for i, v in enumerate(hist)))
    print(f"adapted rank head on {len(train_ids)} queries ({len(hist)} steps) -> {out / 'bi_index'}")


def cmd_eval(args) -> None:
    world = load_world(args.world)
    enc = Encoder.load(args.model)
    out = Path(args.out)
    rep = ex.evaluate_encoder(enc, world, Ks=(10, 50, 100))
    lines = ["metric\tvalue"]
    for K in (10, 50, 100):
        lines.append(f"Hit@{K}\t{rep.hit_at[K]:.4f}")
    for K in (10, 50, 100):
        lines.append(f"Rel@{K}\t{rep.rel_at[K]:.4f}")
    text = "\n".join(lines) + "\n"
    if args.index:
        idx = DiskIndex.open(args.index)
        q_ids = np.unique(world.test_clicks[:, 0])
        vecs = enc.serving_embeddings([world.query_text[q] for q in q_ids])
        p = SearchParams(k=10, L_search=args.l)
        top = np.array([[i for i, _ in search(idx, v, p).items] for v in vecs])
        irep = ex.evaluate_retrieval(world, q_ids, top, (10,))
        text += f"index Hit@10\t{irep.hit_at[10]:.4f}\nindex Rel@10\t{irep.rel_at[10]:.4f}\n"
        idx.close()
        if args.adapted:
            adapted = Encoder.load(Path(args.adapted) / "adapted.enc")
            bi_dir = Path(args.adapted) / "bi_index"
            rerank = ex.compare_pipelines(world, enc, adapted, args.index, bi_dir, world.rank_query_ids,
                                          SearchParams(k=10, L_search=args.l))
            _write(out / "rerank.tsv", ex.rerank_tsv(rerank))
            text += ex.rerank_tsv(rerank)
    _write(out / "eval.tsv", text)
    sys.stdout.write(text)


def cmd_ladder(args) -> None:
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for s in seeds:
        wcfg = _config(args, WorldConfig, seed=str(s))
        world = generate(wcfg, Rng(s))
        tcfg = _config(args, TrainConfig, seed=str(s))
        rows.extend(ex.run_ladder(world, tcfg))
    text = ex.ladder_tsv(rows)
    _write(out / "ladder.tsv", text)
    sys.stdout.write(text)


def cmd_bench(args) -> None:
    world = load_world(args.world)
    enc = Encoder.load(args.model)
    idx = DiskIndex.open(args.index)
    corpus = enc.serving_embeddings(world.ad_text)
    q_ids = np.unique(world.test_clicks[:, 0])[: args.queries]
    queries = enc.serving_embeddings([world.query_text[q] for q in q_ids])
    extra = {}
    if args.compare_pq:
        cfg = _config(args, ex.IndexConfig, seed=str(args.seed))
        extra["pq"] = ex.train_codebook(enc, world, corpus, dataclasses.replace(cfg, quantizer="pq"))
    Ks = tuple(int(k) for k in args.ks.split(","))
    rows = ex.bench_index(idx, corpus, queries, Ks, L_search=args.l, extra_codebooks=extra)
    idx.close()
    # wall-clock columns vary run to run, so the file keeps only reproducible columns
    full = ex.bench_tsv(rows, Ks)
    stable = "\n".join("\t".join(line.split("\t")[:-2]) for line in full.rstrip("\n").split("\n")) + "\n"
    _write(Path(args.out) / "bench.tsv", stable)
    sys.stdout.write(full)


def cmd_inspect(args) -> None:
    path = Path(args.path)
    if path.is_dir():
        path = path / POSTING_FILE
    lines = []
    if path.name.endswith(".urpl") or path.name == POSTING_FILE:
        with PostingListFile(path) as f:
            for k, v in f.header().items():
                lines.append(f"{k}\t{v}")
            for r in args.record or []:
                rec = f.read_record(r)
                lines.append(f"record\t{r}")
                lines.append(f"id\t{rec.id}")
                lines.append("vector\t" + " ".join(f"{x:.6g}" for x in rec.vector))
                lines.append(f"neighbor_count\t{rec.neighbor_count}")
                lines.append("neighbors\t" + " ".join(str(int(n)) for n in rec.neighbors))
        d = path.parent
        if (d / CODEBOOK_FILE).exists() and (d / CODES_FILE).exists():
            from .store import load_tier_one

            t1 = load_tier_one(d / CODEBOOK_FILE, d / CODES_FILE)
            lines += [f"codebook_M\t{t1.codebook.M}", f"codebook_P\t{t1.codebook.P}",
                      f"codes_N\t{t1.N}", f"tier_one_bytes\t{t1.resident_bytes}"]
            for r in args.record or []:
                lines.append(f"code\t{r}\t" + " ".join(str(int(c)) for c in t1.codes[r]))
    elif path.suffix == ".enc":
        enc = Encoder.load(path)
        lines += [f"F\t{enc.F}", f"h\t{enc.h}", f"d_raw\t{enc.d_raw}", f"d\t{enc.d}"]
        for k, v in enc.params.items():
            lines.append(f"{k}\t{'x'.join(map(str, v.shape))}\tnorm={np.linalg.norm(v):.6f}")
    else:
        raise SystemExit(f"don't know how to inspect {path}")
    text = "\n".join(lines) + "\n"
    _write(Path(args.out) / "inspect.txt", text)
    sys.stdout.write(text)


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--config", default=None, help="flat key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("set", nargs="*", metavar="key=value", help="configuration overrides")

    ap = argparse.ArgumentParser(prog="uniretriever", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic world")
    p.set_defaults(func=cmd_gen, known_keys=())

    p = sub.add_parser("train", parents=[common], help="train an encoder on a world's clicks")
    p.add_argument("--world", required=True)
    p.set_defaults(func=cmd_train, known_keys=())

    p = sub.add_parser("build", parents=[common], help="build a two-tier index")
    p.add_argument("--world", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_build, known_keys=())

    p = sub.add_parser("search", parents=[common], help="search an index with text queries")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--query-file", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=64)
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--stats", action="store_true")
    p.set_defaults(func=cmd_search, known_keys=())

    p = sub.add_parser("adapt", parents=[common], help="adapt the rank head and write the bi-stage index")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--ranks", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=100)
    p.set_defaults(func=cmd_adapt, known_keys=())

    p = sub.add_parser("eval", parents=[common], help="evaluate a model (and optionally an index)")
    p.add_argument("--world", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--index", default=None)
    p.add_argument("--adapted", default=None, help="output directory of `adapt`")
    p.add_argument("--l", type=int, default=100)
    p.set_defaults(func=cmd_eval, known_keys=())

    p = sub.add_parser("ladder", parents=[common], help="run the training ladder over seeds")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ladder, known_keys=())

    p = sub.add_parser("bench", parents=[common], help="benchmark index recall, I/O and latency")
    p.add_argument("--world", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--ks", default="100,500,1000")
    p.add_argument("--l", type=int, default=None)
    p.add_argument("--compare-pq", action="store_true", help="also scan reconstruction-PQ codes")
    p.set_defaults(func=cmd_bench, known_keys=())

    p = sub.add_parser("inspect", parents=[common], help="dump file headers and records")
    p.add_argument("path")
    p.add_argument("--record", type=int, action="append")
    p.set_defaults(func=cmd_inspect, known_keys=())
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.command == "ladder":
        args.known_keys = tuple(f.name for f in dataclasses.fields(WorldConfig)) + tuple(
            f.name for f in dataclasses.fields(TrainConfig))
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
