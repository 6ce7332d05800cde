"""Command-line workflows: synth, patch, train, eval, bench, tune, heatmap.

Every artifact is written under ``--out`` together with the seed and the
resolved configuration that produced it. Options can also come from a JSON
file given with ``--config``; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from drasmil import bench as benchmod
from drasmil import evaluation as ev
from drasmil import model as mdl
from drasmil import sampler as smp
from drasmil import slide as sl
from drasmil import tune as tn
from drasmil.seeding import derive_seed

log = logging.getLogger("drasmil")


class CLIError(Exception):
    pass


def _out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _settings(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose", "workers", "out")}


def _sampling_config(args, seed: int) -> smp.SamplingConfig:
    return smp.SamplingConfig(total_budget=args.budget, iterations=args.iterations,
                              final_extra=args.final_extra, neighbours=args.neighbours,
                              sampling_random=args.sampling_random,
                              sampling_random_delta=args.sampling_random_delta, seed=seed)


def _train_config(args, **override) -> mdl.TrainConfig:
    kw = dict(learning_rate=args.lr, weight_decay=args.weight_decay, dropout=args.dropout,
              loss_mode=args.loss_mode, max_epochs=args.max_epochs, patience=args.patience,
              seed=args.seed)
    kw.update(override)
    return mdl.TrainConfig(**kw)


def _load_models(models_dir: str):
    folds_path = os.path.join(models_dir, "folds.json")
    if not os.path.exists(folds_path):
        raise CLIError(f"{models_dir}: no folds.json (run `train` first)")
    with open(folds_path) as fh:
        info = json.load(fh)
    models = [mdl.load_checkpoint(os.path.join(models_dir, f"fold{k}.ckpt"))[0]
              for k in range(info["n_folds"])]
    return info, models


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    out = _out(args)
    os.makedirs(os.path.join(out, "bags"), exist_ok=True)
    bags = sl.synthetic_dataset(args.n_bags, args.slides_per_patient, seed=args.seed,
                                width=args.width, height=args.height, fraction=args.fraction,
                                shift=args.shift, noise=args.noise, M=args.dim)
    rows = []
    for b in bags:
        rel = os.path.join("bags", f"{b.slide_id}.feat")
        sl.cache_write(b, os.path.join(out, rel))
        rows.append({"slide_id": b.slide_id, "patient_id": b.patient_id, "label": b.label, "path": rel})
    sl.write_manifest(rows, os.path.join(out, "manifest.csv"))
    ev.write_json({"command": "synth", "seed": args.seed, "config": _settings(args)},
                  os.path.join(out, "synth_config.json"))
    log.info("wrote %d bags to %s", len(bags), out)


def cmd_patch(args):
    out = _out(args)
    image = sl.load_image(args.image)
    bag = sl.bag_from_image(image, args.slide_id, args.patient_id, args.label, args.patch_size,
                            args.threshold, args.encoder, args.dim, args.seed)
    rel = f"{args.slide_id}.feat"
    sl.cache_write(bag, os.path.join(out, rel))
    manifest = os.path.join(out, "manifest.csv")
    rows = []
    if os.path.exists(manifest):
        rows = [dict(r, path=os.path.relpath(r["path"], out)) for r in sl.read_manifest(manifest)
                if r["slide_id"] != args.slide_id]
    rows.append({"slide_id": bag.slide_id, "patient_id": bag.patient_id, "label": bag.label, "path": rel})
    rows.sort(key=lambda r: r["slide_id"])
    sl.write_manifest(rows, manifest)
    ev.write_json({"command": "patch", "seed": args.seed, "config": _settings(args), "patches": len(bag)},
                  os.path.join(out, f"{args.slide_id}_patch.json"))
    log.info("%s: %d tissue patches", args.slide_id, len(bag))


def cmd_train(args):
    out = _out(args)
    bags = sl.load_manifest_bags(args.manifest)
    folds = ev.stratified_folds(bags, args.folds, args.seed)
    summary = {"command": "train", "seed": args.seed, "n_folds": args.folds, "folds": folds,
               "config": _settings(args), "best_epoch": []}
    for k in range(args.folds):
        train, val, _ = ev.split_bags(bags, folds, k, args.folds)
        config = _train_config(args, seed=derive_seed(args.seed, "fold", k))
        params, trace = mdl.train(train, val, config, L=args.attn_dim)
        mdl.save_checkpoint(params, os.path.join(out, f"fold{k}.ckpt"),
                            {"seed": args.seed, "fold": k, "config": mdl.config_dict(config),
                             "attn_dim": args.attn_dim})
        with open(os.path.join(out, f"fold{k}_log.csv"), "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for r in trace.rows():
                fh.write(f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r}\n")
        summary["best_epoch"].append(trace.best_epoch)
        log.info("fold %d: best epoch %d, val loss %.4f", k, trace.best_epoch,
                 min(trace.val_loss) if trace.val_loss else float("nan"))
    ev.write_json(summary, os.path.join(out, "folds.json"))


def _fold_predictions(args, bags, info, models, split: str = "test"):
    folds = info["folds"]
    n = info["n_folds"]
    table = None
    for k in range(n):
        _, val, test = ev.split_bags(bags, folds, k, n)
        part = ev.PredictionTable([], [], [], np.empty((0, args.repeats)))
        chosen = test if split == "test" else val
        if chosen:
            part = smp.repeat_evaluate(models[k], chosen, args.method, args.repeats,
                                       derive_seed(args.seed, "fold", k),
                                       _sampling_config(args, args.seed), args.workers)
        table = part if table is None else table.concat(part)
    return table


def cmd_eval(args):
    out = _out(args)
    bags = sl.load_manifest_bags(args.manifest)
    info, models = _load_models(args.models)
    table = _fold_predictions(args, bags, info, models)
    order = np.argsort(table.slide_ids, kind="stable")
    table = ev.PredictionTable([table.slide_ids[i] for i in order], [table.patient_ids[i] for i in order],
                               table.labels[order], table.probs[order])
    table.write_csv(os.path.join(out, "predictions.csv"))
    meta = {"command": "eval", "seed": args.seed, "method": args.method, "config": _settings(args)}
    point = ev.metrics_report(table.probs.mean(axis=1), table.labels, args.threshold)
    ev.write_json(dict(meta, metrics=point.as_dict()), os.path.join(out, "metrics.json"))
    boot = ev.bootstrap(table, args.epochs, derive_seed(args.seed, "bootstrap"), args.threshold)
    ev.write_json(dict(meta, **boot.as_dict()), os.path.join(out, "bootstrap.json"))
    for m in ev.METRICS:
        log.info("%s %-17s %.4f +- %.4f", args.method, m, boot.mean[m], boot.std[m])


def cmd_bench(args):
    out = _out(args)
    config = benchmod.BenchConfig(batch_sizes=args.batch_sizes, methods=args.methods,
                                  repetitions=args.repetitions, n_bags=args.n_bags,
                                  width=args.width, height=args.height, patch_size=args.patch_size,
                                  M=args.dim, L=args.attn_dim, seed=args.seed,
                                  sampling=_sampling_config(args, args.seed))
    report = benchmod.run_bench(config, progress=lambda c: log.info("%s", c))
    text, csv_text = benchmod.report_render(report)
    with open(os.path.join(out, "bench.csv"), "w") as fh:
        fh.write(csv_text)
    ev.write_json({"command": "bench", "seed": args.seed, "config": _settings(args)},
                  os.path.join(out, "bench_config.json"))
    sys.stdout.write(text)


def _train_objective(args, bags, folds):
    train, val, _ = ev.split_bags(bags, folds, 0, args.folds)

    def objective(cfg, seed):
        config = _train_config(args, learning_rate=cfg["learning_rate"],
                               weight_decay=cfg["weight_decay"], dropout=cfg["dropout"], seed=seed)
        params, _ = mdl.train(train, val, config, L=args.attn_dim)
        return mdl.mean_loss(params, val, config, np.bincount([b.label for b in train], minlength=2))

    return objective


def _sampling_objective(args, bags, info, models):
    _, val, _ = ev.split_bags(bags, info["folds"], 0, info["n_folds"])
    labels = [b.label for b in val]

    def objective(cfg, seed):
        config = smp.SamplingConfig(total_budget=args.budget, final_extra=args.final_extra,
                                    iterations=cfg["iterations"], neighbours=cfg["neighbours"],
                                    sampling_random=cfg["sampling_random"],
                                    sampling_random_delta=cfg["sampling_random_delta"])
        probs = [smp.evaluate(models[0], b, "dras", config, derive_seed(seed, b.slide_id)).probability
                 for b in val]
        return ev.auc(probs, labels)

    return objective


def cmd_tune(args):
    out = _out(args)
    bags = sl.load_manifest_bags(args.manifest)
    if args.space:
        space = tn.ParamSpace.load(args.space)
    else:
        space = tn.TRAIN_SPACE if args.mode == "train" else tn.SAMPLING_SPACE
    if args.mode == "train":
        folds = ev.stratified_folds(bags, args.folds, args.seed)
        objective, direction = _train_objective(args, bags, folds), "min"
    else:
        if not args.models:
            raise CLIError("--models is required for --mode sample")
        info, models = _load_models(args.models)
        objective, direction = _sampling_objective(args, bags, info, models), "max"
    best, trials = tn.random_search(space, objective, args.trials, args.repeats, args.seed,
                                    direction, args.workers)
    tn.write_log(trials, space, os.path.join(out, "tuning_log.csv"))
    ev.write_json(space.to_json(), os.path.join(out, "space.json"))
    ev.write_json({"command": "tune", "seed": args.seed, "mode": args.mode, "direction": direction,
                   "best": {"trial": best.trial, "config": best.config, "objective": best.objective,
                            "seed": best.seed},
                   "config": _settings(args)}, os.path.join(out, "best.json"))
    log.info("best trial %d: %s -> %.5f", best.trial, best.config, best.objective)


def cmd_heatmap(args):
    out = _out(args)
    rows = [r for r in sl.read_manifest(args.manifest) if r["slide_id"] == args.slide_id]
    if not rows:
        raise CLIError(f"slide {args.slide_id!r} not in {args.manifest}")
    bag = sl.cache_read(rows[0]["path"])
    if args.checkpoint:
        params, _ = mdl.load_checkpoint(args.checkpoint)
    else:
        info, models = _load_models(args.models)
        params = models[info["folds"][bag.patient_id]]
    result = smp.evaluate(params, bag, args.method, _sampling_config(args, args.seed), args.seed)
    smp.write_trace(result, os.path.join(out, "trace.csv"))
    att = result.attention_map(len(bag))
    smp.write_pgm(smp.grid_image(bag.coords, att), os.path.join(out, "attention.pgm"))
    smp.write_map_csv(bag.coords, att, os.path.join(out, "attention.csv"), "attention")
    if args.method == "dras":
        smp.write_pgm(smp.grid_image(bag.coords, result.weights), os.path.join(out, "weights.pgm"))
        smp.write_map_csv(bag.coords, result.weights, os.path.join(out, "weights.csv"))
    ev.write_json({"command": "heatmap", "seed": args.seed, "method": args.method,
                   "probability": result.probability, "patches_encoded": result.patches_encoded,
                   "config": _settings(args)}, os.path.join(out, "heatmap.json"))


# -- parser ------------------------------------------------------------------

def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _str_list(text):
    return [x for x in text.split(",") if x]


def _add_sampling(p):
    d = smp.SamplingConfig()
    p.add_argument("--budget", type=int, default=d.total_budget)
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--final-extra", type=int, default=d.final_extra)
    p.add_argument("--neighbours", type=int, default=d.neighbours)
    p.add_argument("--sampling-random", type=float, default=d.sampling_random)
    p.add_argument("--sampling-random-delta", type=float, default=d.sampling_random_delta)


def _add_training(p):
    d = mdl.TrainConfig()
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--loss-mode", choices=["cross_entropy", "balanced_cross_entropy"], default=d.loss_mode)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--attn-dim", type=int, default=256, help="attention hidden size L")
    p.add_argument("--folds", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="drasmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic bags and a manifest")
    p.add_argument("--n-bags", type=int, default=120)
    p.add_argument("--slides-per-patient", type=int, default=2)
    p.add_argument("--width", type=int, default=50)
    p.add_argument("--height", type=int, default=80)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--dim", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patch", parents=[common], help="tile and encode a raster image")
    p.add_argument("--image", required=True)
    p.add_argument("--slide-id", required=True)
    p.add_argument("--patient-id", required=True)
    p.add_argument("--label", type=int, choices=[0, 1], required=True)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--threshold", type=float, default=0.07)
    p.add_argument("--encoder", choices=["random_projection", "color_histogram"], default="random_projection")
    p.add_argument("--dim", type=int, default=32)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("train", parents=[common], help="cross-validated training")
    p.add_argument("--manifest", required=True)
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate test folds and bootstrap")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="output directory of `train`")
    p.add_argument("--method", choices=["full", "random", "dras"], default="dras")
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--epochs", type=int, default=100_000)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_sampling(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="batch-size efficiency sweep")
    p.add_argument("--n-bags", type=int, default=10)
    p.add_argument("--width", type=int, default=100)
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 4, 8, 16, 32, 64])
    p.add_argument("--methods", type=_str_list, default=["full", "dras"])
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--attn-dim", type=int, default=16)
    _add_sampling(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("tune", parents=[common], help="random hyperparameter search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["train", "sample"], required=True)
    p.add_argument("--space", help="parameter space JSON (default: built-in space for the mode)")
    p.add_argument("--models", help="output directory of `train` (sample mode)")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--repeats", type=int, default=30)
    _add_training(p)
    _add_sampling(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("heatmap", parents=[common], help="export sampling trace and weight/attention maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--slide-id", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--models", help="output directory of `train`")
    group.add_argument("--checkpoint")
    p.add_argument("--method", choices=["full", "random", "dras"], default="dras")
    _add_sampling(p)
    p.set_defaults(func=cmd_heatmap)
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config) as fh:
            defaults = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        sub = parser._subparsers._group_actions[0].choices
        cmd = next((a for a in argv if a in sub), None)
        if cmd is not None:
            sub[cmd].set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"drasmil: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CLIError, OSError, ValueError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
