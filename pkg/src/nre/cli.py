"""Command-line entry points: train, eval, infer, serve."""

import argparse
import json
import sys

from . import data as D
from . import framework as F
from .service import create_app, extract


def _parse_span(arg):
    a, b = arg.split(",")
    return (int(a), int(b))


def cmd_train(args):
    cfg = F.TrainConfig.from_file(args.config)
    relation_map = None
    if cfg.relation_map_path:
        relation_map = D.load_relation_map(cfg.relation_map_path)
    train_insts, train_skipped = D.load_jsonl_dataset(cfg.train_path, relation_map)
    val_insts, val_skipped = D.load_jsonl_dataset(cfg.val_path, relation_map)
    if train_skipped or val_skipped:
        print(f"skipped malformed lines: train={train_skipped} val={val_skipped}", file=sys.stderr)
    model, log, best = F.run_training(cfg, train_insts, val_insts, relation_map)
    if cfg.embeddings_path:
        print("note: embeddings_path is applied before training, not on reload", file=sys.stderr)
    model.save(args.out)
    with open(args.log, "w", encoding="utf-8") as f:
        f.write("\n".join(log) + "\n")
    print(f"best validation metric: {best:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args):
    model = F.ReModel.load(args.ckpt)
    instances, skipped = D.load_jsonl_dataset(args.data, model.relation_map)
    if skipped:
        print(f"skipped {skipped} malformed lines", file=sys.stderr)
    if args.metric in ("acc", "f1"):
        encs, kept, _ = model.encode_instances(instances)
        preds = F.predict_relations(model, encs)
        golds = [model.relation_map.id_of(i.relation) for i in kept]
        value = (F.evaluate_accuracy(preds, golds) if args.metric == "acc"
                 else F.evaluate_micro_f1(preds, golds))
    else:
        value, max_f1, curve = F.evaluate_bag_auc(model, instances)
        if args.pr_curve:
            F.dump_pr_curve(curve, args.pr_curve)
        print(f"max_f1={max_f1:.4f}")
    print(f"{args.metric}={value:.4f}")
    return 0


def cmd_infer(args):
    model = F.ReModel.load(args.ckpt)
    h = _parse_span(args.h) if args.h else None
    t = _parse_span(args.t) if args.t else None
    if (h is None) != (t is None):
        print("error: --h and --t must be given together", file=sys.stderr)
        return 2
    results = extract(model, args.text, h_span=h, t_span=t, top_k=args.top_k)
    print(json.dumps({"results": results}, ensure_ascii=False))
    return 0


def cmd_serve(args):
    import uvicorn

    app = create_app(checkpoint_path=args.ckpt, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="nre", description="neural relation extraction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", default="train.log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=("acc", "f1", "auc"), default="acc")
    p.add_argument("--pr-curve", default="", help="write PR curve points here (auc only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="extract relations from one sentence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--h", default="", help="head char span 'start,end'")
    p.add_argument("--t", default="", help="tail char span 'start,end'")
    p.add_argument("--top-k", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static", default=None, help="directory of static demo files")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
