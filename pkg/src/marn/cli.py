"""Command-line interface.

Subcommands: synth, train, evaluate, ground, export-attention.  Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from marn import training
from marn.checkpoint import load_checkpoint
from marn.data import (
    SyntheticSpec,
    build_vocabulary,
    encode_query,
    generate_synthetic_dataset,
    load_embedding_table,
    load_feature_file,
    load_manifest,
    write_embedding_table,
    write_manifest,
)
from marn.errors import ConfigError, DataError, NumericError
from marn.evaluate import ground_single, run_evaluation, write_predictions, write_report
from marn.model import synthetic_config

log = logging.getLogger("marn")


def _parse_floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_synth(args) -> int:
    out = args.out
    os.makedirs(out, exist_ok=True)
    splits = (("train", args.train, 0), ("val", args.val, 1), ("test", args.test, 2))
    vocab = None
    for name, count, offset in splits:
        spec = SyntheticSpec(
            n_videos=count, T=args.t, d_v=args.d_v, vocab_size=args.vocab_size,
            seed=args.seed + offset,
        )
        manifest, vocab = generate_synthetic_dataset(spec, out, prefix=name)
        write_manifest(os.path.join(out, f"{name}.jsonl"), manifest)
    write_embedding_table(os.path.join(out, "embeddings.txt"), vocab)
    model = synthetic_config(vocab_size=args.vocab_size, d_v=args.d_v)
    if model.T != args.t:
        model = replace(model, T=args.t)
    train_config = training.TrainConfig(
        model=model, seed=args.seed, checkpoint_dir=os.path.join(out, "checkpoints")
    )
    config_path = os.path.join(out, "config.json")
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(train_config.to_json_dict(), fh, indent=2)
        fh.write("\n")
    print(json.dumps({
        "out": out,
        "manifests": {name: os.path.join(out, f"{name}.jsonl") for name, _, _ in splits},
        "embeddings": os.path.join(out, "embeddings.txt"),
        "config": config_path,
    }, indent=2))
    return 0


def cmd_train(args) -> int:
    config = training.load_train_config(args.config)
    table = load_embedding_table(args.embeddings)
    train_manifest = load_manifest(args.train_manifest)
    vocab = build_vocabulary(train_manifest, table, min_count=args.min_count)
    result = training.train(config, args.train_manifest, args.val_manifest, vocab)
    print(json.dumps({
        "best": result.best_path,
        "last": result.last_path,
        "best_val_mIoU": round(result.best_miou, 4),
    }, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    params, config, vocab = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    results, report = run_evaluation(
        params, config, vocab, manifest, args.manifest,
        n_list=[int(v) for v in _parse_floats(args.n)],
        theta_list=_parse_floats(args.theta),
        use_nms=args.nms,
    )
    if args.predictions:
        write_predictions(args.predictions, results)
    if args.out:
        write_report(args.out, report)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return 0


def cmd_ground(args) -> int:
    params, config, vocab = load_checkpoint(args.checkpoint)
    raw = load_feature_file(args.features)
    query = encode_query(args.sentence, vocab, config.max_query_len)
    if training.query_is_all_unk(query):
        log.warning("every word of %r is out of vocabulary", args.sentence)
    result = ground_single(params, config, raw, query, args.top_n, query_id=raw.video_id)
    print(json.dumps({
        "query_id": result.query_id,
        "ranked": [[t_s, t_e, score] for t_s, t_e, score in result.ranked],
    }, indent=2))
    return 0


def cmd_export_attention(args) -> int:
    params, config, vocab = load_checkpoint(args.checkpoint)
    raw = load_feature_file(args.features)
    paths = training.export_attention(params, config, vocab, raw, args.sentence, args.out)
    print(json.dumps({"written": paths}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marn",
        description="Weakly-supervised temporal grounding of textual queries in videos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted segments")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=200, help="training videos")
    p.add_argument("--val", type=int, default=50, help="validation videos")
    p.add_argument("--test", type=int, default=50, help="test videos")
    p.add_argument("--t", type=int, default=32, help="temporal units per video")
    p.add_argument("--d-v", type=int, default=30, help="feature dimension")
    p.add_argument("--vocab-size", type=int, default=30, help="vocabulary size incl. reserved")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True, help="JSON train config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--embeddings", required=True, help="word embedding table (text)")
    p.add_argument("--min-count", type=int, default=1, help="vocabulary count threshold")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against a manifest with gt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", default="1,5", help="comma-separated recall ranks")
    p.add_argument("--theta", default="0.3,0.5,0.7", help="comma-separated IoU thresholds")
    p.add_argument("--predictions", help="write ranked predictions (JSON lines)")
    p.add_argument("--out", help="write the metric report (JSON)")
    p.add_argument("--nms", action="store_true", help="suppress overlapping proposals (IoU 0.5)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ground", help="localize one sentence in one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("export-attention", help="write attention maps as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
