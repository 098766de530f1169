"""Command-line entry point binding the pipeline stages into reproducible runs.

Usage:
    cartoforge <stage> --config run.ini [--set section.key=value ...]
    cartoforge run-all --config run.ini
    cartoforge train-toy --data d0.jsonl --epochs 5 --seed 7 --out-log log.jsonl --out-emb emb.jsonl
    cartoforge audit partial-input --train a.jsonl --test b.jsonl --field hypothesis
    cartoforge audit lexcorr --data d.jsonl --alpha 0.01 --min-count 20 --out stats.csv
    cartoforge audit simdist --data d.jsonl --emb sent.jsonl --out dist.json
    cartoforge make-corpus --n 300 --seed 1 --out corpus.jsonl
    cartoforge serve --data-dir reviews/ --port 8400

Exits 0 on success; on failure prints a machine-readable error JSON on
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import audit as audit_mod
from . import pipeline
from .corpus import read_dataset, write_dataset
from .dynamics import write_prediction_log
from .exemplars import EmbeddingTable, read_embedding_table, write_embedding_table
from .synth import make_corpus
from .toytrainer import ToyModelConfig, featurize, train


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"override {pair!r} is not of the form section.key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cartoforge")
    sub = parser.add_subparsers(dest="command", required=True)

    stage_names = list(pipeline.STAGES) + ["run-all"]
    for name in stage_names:
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "run-all" else "run every stage in order")
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value")
        if name == "train-toy":
            sp.add_argument("--data", default=None, help="training dataset (overrides config d0)")
            sp.add_argument("--epochs", type=int, default=None)
            sp.add_argument("--seed", type=int, default=None)
            sp.add_argument("--out-log", default=None, help="write the prediction log here instead of the run dir")
            sp.add_argument("--out-emb", default=None, help="write embeddings here instead of the run dir")
        if name == "audit":
            # bare `audit --config ...` runs the pipeline stage; the tool
            # subcommands below run one analysis on explicit files
            tool = sp.add_subparsers(dest="tool", required=False)
            pa = tool.add_parser("partial-input")
            pa.add_argument("--train", required=True)
            pa.add_argument("--test", required=True)
            pa.add_argument("--field", choices=("premise", "hypothesis"), required=True)
            pa.add_argument("--seed", type=int, default=0)
            lx = tool.add_parser("lexcorr")
            lx.add_argument("--data", required=True)
            lx.add_argument("--alpha", type=float, default=0.01)
            lx.add_argument("--min-count", type=int, default=20)
            lx.add_argument("--balance-seed", type=int, default=None,
                            help="balance the dataset first with this seed")
            lx.add_argument("--out", required=True)
            sd = tool.add_parser("simdist")
            sd.add_argument("--data", required=True)
            sd.add_argument("--emb", required=True)
            sd.add_argument("--out", required=True)

    mk = sub.add_parser("make-corpus", help="generate the bundled-style synthetic corpus")
    mk.add_argument("--n", type=int, default=300)
    mk.add_argument("--seed", type=int, default=1)
    mk.add_argument("--out", required=True)

    va = sub.add_parser("validate-chain", help="check manifest hash chaining in a run dir")
    va.add_argument("--run-dir", required=True)

    sv = sub.add_parser("serve", help="start the review service")
    sv.add_argument("--data-dir", required=True)
    sv.add_argument("--port", type=int, default=8400)
    sv.add_argument("--lease-timeout", type=float, default=1800.0)
    sv.add_argument("--tokens", default=None, help="JSON file mapping worker id to token")
    sv.add_argument("--guidelines", default=None, help="text file shown in the UI guidelines pane")

    return parser


def _audit_tool(args) -> dict:
    if args.tool == "partial-input":
        train_ds = read_dataset(args.train, name="train")
        test_ds = read_dataset(args.test, name="test")
        cfg = ToyModelConfig(batch_size=min(32, len(train_ds)), rng_seed=args.seed)
        acc = audit_mod.partial_input_accuracy(train_ds, test_ds, args.field, cfg)
        return {"field": args.field, "accuracy": acc}
    if args.tool == "lexcorr":
        ds = read_dataset(args.data, name="data")
        if args.balance_seed is not None:
            ds = audit_mod.balance_by_label(ds, args.balance_seed)
        stats = audit_mod.lexical_correlations(ds, args.alpha, args.min_count)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("word,label,n,p_hat,z,detectable\n")
            for s in stats:
                fh.write(f"{s.word},{s.label},{s.n},{s.p_hat!r},{s.z!r},{int(s.detectable)}\n")
        return {"tested": len(stats), "detectable": sum(1 for s in stats if s.detectable)}
    if args.tool == "simdist":
        ds = read_dataset(args.data, name="data")
        table = read_embedding_table(args.emb)
        dist = audit_mod.similarity_distributions(ds, table)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                {"means": dist.means, "stds": dist.stds, "overlap": dist.overlap,
                 "per_label": dist.per_label},
                fh, indent=2,
            )
            fh.write("\n")
        return {"examples": sum(len(v) for v in dist.per_label.values()),
                "overlap": dist.overlap}
    raise ValueError(f"unknown audit tool {args.tool!r}")


def _standalone_train(args, cfg: pipeline.PipelineConfig) -> dict:
    ds = read_dataset(args.data, name="d0")
    trainer_cfg = ToyModelConfig(
        epochs=args.epochs or cfg.trainer.epochs,
        learning_rate=cfg.trainer.learning_rate,
        batch_size=min(cfg.trainer.batch_size, len(ds)),
        hash_dims=cfg.trainer.hash_dims,
        rng_seed=args.seed if args.seed is not None else cfg.trainer.rng_seed,
        l2=cfg.trainer.l2,
    )
    state, log = train(ds, trainer_cfg, label_names=cfg.label_names)
    if args.out_log:
        write_prediction_log(log, args.out_log)
    if args.out_emb:
        table = EmbeddingTable(dim=trainer_cfg.hash_dims)
        for ex in ds.examples:
            table.add(ex.id, featurize(ex, trainer_cfg.hash_dims))
        write_embedding_table(table, args.out_emb)
    return {"examples": len(ds), "epochs": trainer_cfg.epochs}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "make-corpus":
            ds = make_corpus(args.n, args.seed)
            write_dataset(ds, args.out)
            print(json.dumps({"written": len(ds), "path": args.out}))
            return 0
        if args.command == "validate-chain":
            problems = pipeline.validate_chain(args.run_dir)
            print(json.dumps({"ok": not problems, "problems": problems}))
            return 0 if not problems else 1
        if args.command == "serve":
            from .review_service import serve

            tokens = None
            if args.tokens:
                with open(args.tokens, encoding="utf-8") as fh:
                    tokens = json.load(fh)
            guidelines = ""
            if args.guidelines:
                with open(args.guidelines, encoding="utf-8") as fh:
                    guidelines = fh.read()
            serve(args.data_dir, port=args.port, lease_timeout=args.lease_timeout,
                  worker_tokens=tokens, guidelines=guidelines)
            return 0

        if args.command == "audit" and getattr(args, "tool", None):
            counts = _audit_tool(args)
            print(json.dumps({"command": f"audit {args.tool}", "counts": counts}))
            return 0

        cfg = pipeline.load_config(args.config, _parse_overrides(args.set))
        if args.command == "train-toy" and getattr(args, "data", None):
            counts = _standalone_train(args, cfg)
        elif args.command == "run-all":
            counts = pipeline.run_all(cfg)
        else:
            counts = pipeline.run_stage(args.command, cfg)
        print(json.dumps({"command": args.command, "counts": counts}))
        return 0
    except Exception as exc:  # surfaced as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
