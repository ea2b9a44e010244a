"""Command-line entry point: ``hybridtune <command> [options]``."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import analysis, evaluation, phantom, training
from .adapter import HT_B16, HTParams, LoRAParams, ht_param_count, lora_param_count
from .backbone import VIT_B16, ViTConfig
from .errors import ConfigurationError, HybridTuneError, IntegrityError

COMMANDS = ("gen-data", "finetune", "train-seg", "train-cls", "eval", "zeroshot", "fewshot",
            "cross-domain", "analyze-spectrum", "bench", "count-params")


def _config(args):
    cfg = training.TrainConfig.load(args.config) if args.config else training.TrainConfig()
    for key in ("epochs", "lr", "batch_size"):
        value = getattr(args, key, None)
        if value is None:
            continue
        if key == "epochs":
            cfg.epochs_downstream = cfg.epochs_finetune = value
        elif key == "lr":
            cfg.base_lr = value
        else:
            cfg.batch_size = value
    return cfg


def _summary(out, title, lines):
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{title}\n")
        for line in lines:
            fh.write(f"{line}\n")
    print(f"{title}: {out}")


def _split_indices(manifest):
    groups = {"train": [], "val": [], "test": []}
    for i, r in enumerate(manifest.records):
        groups.setdefault(r["split"], []).append(i)
    return groups["train"], groups["val"], groups["test"]


def _load(args):
    manifest, samples = phantom.read_dataset(args.data)
    return manifest, samples, _split_indices(manifest)


def _log(args):
    return (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    samples = phantom.make_dataset(args.n, args.domain, args.seed)
    parts = [float(x) for x in args.split.split(":")]
    if sum(parts) <= 0:
        raise ConfigurationError(f"bad split {args.split!r}")
    spec = training.SplitSpec(tuple(x / sum(parts) for x in parts), seed=args.seed)
    names = ["train"] * len(samples)
    tr, va, te = training.split_dataset(samples, spec)
    for idx, name in ((va, "val"), (te, "test")):
        for i in idx:
            names[i] = name
    phantom.write_dataset(samples, args.out, name=f"phantom-{args.domain}", splits=names, seed=args.seed)
    counts = {k: names.count(k) for k in ("train", "val", "test")}
    evaluation.write_rows_csv(os.path.join(args.out, "splits.csv"),
                              [{"split": k, "count": v} for k, v in counts.items()])
    _summary(args.out, "gen-data", [f"domain={args.domain}", f"n={args.n}", f"seed={args.seed}",
                                    *(f"{k}={v}" for k, v in counts.items())])


def cmd_finetune(args):
    cfg = _config(args)
    _, samples, (tr, va, _) = _load(args)
    corpus = [(samples[i].image, samples[i].caption) for i in tr + va]
    model = training.Model.build(cfg, args.variant, "embed", seed=args.seed)
    result = training.run_finetune(corpus, model, cfg, seed=args.seed, log=_log(args))
    model.save(os.path.join(args.out, "model.ckpt"))
    training.write_trace_csv(os.path.join(args.out, "trace.csv"), result.trace)
    losses = [r.loss for r in result.trace if r.split == "train"]
    _summary(args.out, "finetune", [f"pairs={len(corpus)}", f"epochs={cfg.epochs_finetune}",
                                    f"first_train_loss={losses[0] if losses else float('nan'):.6f}",
                                    f"final_train_loss={losses[-1] if losses else float('nan'):.6f}",
                                    f"backbone_unchanged={result.backbone_checksum[0] == result.backbone_checksum[1]}"])


def _train(args, task):
    cfg = _config(args)
    _, samples, splits = _load(args)
    model = training.Model.build(cfg, args.variant, task, seed=args.seed)
    result = training.run_downstream(samples, model, task, cfg, seed=args.seed, splits=splits, log=_log(args))
    model.save(os.path.join(args.out, "model.ckpt"))
    training.write_trace_csv(os.path.join(args.out, "trace.csv"), result.trace)
    metric = "dice" if task == "seg" else "auc"
    lines = [f"task={task}", f"variant={args.variant}", f"epochs={cfg.epochs_downstream}",
             f"best_epoch={result.best_epoch}", f"best_val_{metric}={result.best_metric:.4f}"]
    if model.backbone.adapters is not None:
        lines.append(f"grand_mean_theta={analysis.grand_mean_theta(model.backbone):.6f}")
    _summary(args.out, f"train-{task}", lines)


def cmd_train_seg(args):
    _train(args, "seg")


def cmd_train_cls(args):
    _train(args, "cls")


def _evaluate(model, samples, indices, task):
    if task == "seg":
        preds = training.predict_masks(model, samples, indices=indices)
        report = evaluation.seg_report(preds, [samples[i].mask for i in indices])
        rows = [dict(index=i, dice=e.dice, iou=e.iou, hd95=e.hd95, asd=e.asd, flag=e.flag)
                for i, e in zip(indices, report.entries)]
        return rows, report.summary()
    scores = training.predict_scores(model, samples, indices=indices)
    labels = [samples[i].label for i in indices]
    report = evaluation.cls_metrics(scores, labels)
    rows = [dict(index=i, score=s, label=y) for i, s, y in zip(indices, scores, labels)]
    return rows, {k: (v, 0.0, len(indices)) for k, v in report.summary().items()}


def cmd_eval(args):
    cfg = _config(args)
    _, samples, (tr, va, te) = _load(args)
    model = training.Model.from_checkpoint(args.checkpoint, cfg)
    task = model.head.role
    indices = {"train": tr, "val": va, "test": te}[args.split] or list(range(len(samples)))
    rows, summary = _evaluate(model, samples, indices, task)
    evaluation.write_rows_csv(os.path.join(args.out, "per_sample.csv"), rows)
    evaluation.write_summary_csv(os.path.join(args.out, "metrics.csv"), summary)
    _summary(args.out, "eval", [f"task={task}", f"split={args.split}",
                                *(f"{k}={m:.4f}" for k, (m, _, _) in summary.items())])


def cmd_zeroshot(args):
    cfg = _config(args)
    _, samples, _ = _load(args)
    bank = evaluation.load_prompt_bank(args.bank)
    model = (training.Model.from_checkpoint(args.checkpoint, cfg) if args.checkpoint
             else training.Model.build(cfg, "frozen", "embed", seed=args.seed))
    rows, correct = [], 0
    encoder = training.prompt_encoder(cfg)
    for i, s in enumerate(samples):
        emb = model.embed_images(s.image[None, None].astype(np.float32)).data[0]
        winner, scores = evaluation.zero_shot_classify(emb, bank, encoder)
        correct += winner == phantom.LABELS[s.label]
        rows.append(dict(index=i, label=phantom.LABELS[s.label], predicted=winner,
                         **{f"score_{k}": v for k, v in scores.items()}))
    evaluation.write_rows_csv(os.path.join(args.out, "zeroshot.csv"), rows)
    _summary(args.out, "zeroshot", [f"bank={args.bank}", f"n={len(samples)}",
                                    f"accuracy={100.0 * correct / max(len(samples), 1):.4f}"])


def cmd_fewshot(args):
    cfg = _config(args)
    _, samples, (tr, va, te) = _load(args)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else list(training.FEWSHOT_RATIOS)
    labels = [s.label for s in samples]
    rows = []
    for ratio in ratios:
        subset = training.fewshot_sample(tr, labels, ratio, seed=args.seed)
        model = training.Model.build(cfg, args.variant, args.task, seed=args.seed)
        training.run_downstream(samples, model, args.task, cfg, seed=args.seed, splits=(subset, va, te),
                                log=_log(args))
        _, summary = _evaluate(model, samples, te or va, args.task)
        rows.append(dict(ratio=ratio, n_train=len(subset), **{k: v[0] for k, v in summary.items()}))
    evaluation.write_rows_csv(os.path.join(args.out, "fewshot.csv"), rows)
    _summary(args.out, "fewshot", [f"task={args.task}", f"ratios={','.join(map(str, ratios))}"])


def cmd_cross_domain(args):
    cfg = _config(args)
    domains = {d: phantom.make_dataset(args.n, d, seed=args.seed + k) for k, d in enumerate(args.domains.split(","))}
    task = args.task

    def train(data):
        model = training.Model.build(cfg, args.variant, task, seed=args.seed)
        training.run_downstream(data, model, task, cfg, seed=args.seed, log=_log(args))
        return model

    def evaluate(model, data):
        _, summary = _evaluate(model, data, list(range(len(data))), task)
        return {k: v[0] for k, v in summary.items()}

    result = evaluation.cross_dataset_run(domains, train, evaluate)
    evaluation.write_rows_csv(os.path.join(args.out, "cross_domain.csv"), result.rows())
    key = "dice" if task == "seg" else "auc"
    _summary(args.out, "cross-domain", [f"{scope}_{key}={vals[key]:.4f}" for scope, vals in result.aggregates.items()])


def cmd_analyze_spectrum(args):
    cfg = _config(args)
    model = training.Model.from_checkpoint(args.checkpoint, cfg)
    if args.data:
        _, samples, _ = _load(args)
    else:
        samples = phantom.make_dataset(args.n, args.domain, seed=args.seed)
    images = np.stack([s.image for s in samples[: args.n]])
    report = analysis.spectral_report(model.backbone, images)
    evaluation.write_rows_csv(os.path.join(args.out, "spectral.csv"), report.rows())
    _summary(args.out, "analyze-spectrum",
             [f"grand_mean_theta={np.mean([s.mean for s in report.theta]):.6f}", f"probes={len(images)}"])


def cmd_bench(args):
    cfg = _config(args)
    rows = []
    for variant in args.variants.split(","):
        model = training.Model.build(cfg, variant, "seg", seed=args.seed)
        lat = analysis.bench_latency(model, batch=args.batch, reps=args.reps, warmup=args.warmup)
        flops = analysis.estimate_flops(model, (args.batch, 1, cfg.image_size, cfg.image_size))
        params = analysis.count_params(model)
        rows.append(dict(variant=variant, ms_per_image=lat.ms_per_image, std_ms=lat.std_ms, fps=lat.fps,
                         gflops_per_image=(flops.total / args.batch) / 1e9, trainable=params.trainable,
                         total=params.total))
    evaluation.write_rows_csv(os.path.join(args.out, "bench.csv"), rows)
    _summary(args.out, "bench", [f"{r['variant']}: {r['ms_per_image']:.2f} ms/image, {r['fps']:.2f} FPS"
                                 for r in rows])


def cmd_count_params(args):
    rows = []
    if args.dims == "b16":
        vit = ViTConfig(in_channels=3, **VIT_B16)
        ht = HT_B16
    else:
        cfg = _config(args)
        vit, ht = cfg.vit_config(), cfg.ht_config()
    per_layer = ht_param_count(ht.D, ht.d, ht.h, ht.kernels)
    rows.append(dict(item="ht_per_layer", params=per_layer))
    rows.append(dict(item="ht_stack", params=per_layer * vit.depth))
    rows.append(dict(item="lora_r16_qkvo", params=lora_param_count(vit.width, vit.depth, 16)))
    if args.dims == "b16":
        rng = np.random.default_rng(args.seed)
        stack = [HTParams.init(ht, rng) for _ in range(vit.depth)]
        rows.append(dict(item="ht_stack_enumerated", params=analysis.count_params(stack).trainable))
        rows.append(dict(item="lora_enumerated",
                         params=LoRAParams(vit.width, vit.depth, 16, rng=rng).num_params()))
    flops = analysis.estimate_flops(analysis.ModelShape(vit, ht), (1, vit.in_channels, vit.image_size, vit.image_size))
    rows.append(dict(item="backbone_gflops", params=f"{flops.backbone / 1e9:.4f}"))
    rows.append(dict(item="ht_overhead_pct", params=f"{flops.overhead_pct:.4f}"))
    evaluation.write_rows_csv(os.path.join(args.out, "params.csv"), rows)
    _summary(args.out, "count-params", [f"{r['item']}={r['params']}" for r in rows])


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="hybridtune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value TrainConfig file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--verbose", action="store_true")
        p.set_defaults(handler=handler)
        return p

    def training_flags(p, task=True):
        p.add_argument("--data", required=True, help="dataset directory written by gen-data")
        p.add_argument("--variant", choices=("ht", "lora", "frozen"), default="ht")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        if task:
            p.add_argument("--task", choices=("seg", "cls"), default="seg")

    p = add("gen-data", cmd_gen_data, "generate a phantom dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--domain", choices=sorted(phantom.PRESETS), default="A")
    p.add_argument("--split", default="8:1:1", help="train:val[:test] ratio, e.g. 8:1:1 or 9:1")

    training_flags(add("finetune", cmd_finetune, "contrastive image-caption fine-tuning"), task=False)
    training_flags(add("train-seg", cmd_train_seg, "train adapters + segmentation head"), task=False)
    training_flags(add("train-cls", cmd_train_cls, "train adapters + classification head"), task=False)

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = add("zeroshot", cmd_zeroshot, "prompt-ensemble zero-shot classification")
    p.add_argument("--data", required=True)
    p.add_argument("--bank", choices=sorted(evaluation.PROMPT_FILES), default="breast")
    p.add_argument("--checkpoint")

    p = add("fewshot", cmd_fewshot, "ratio-based few-shot training")
    training_flags(p)
    p.add_argument("--ratios", help="comma-separated ratios (default: the standard grid)")

    p = add("cross-domain", cmd_cross_domain, "leave-one-domain-out evaluation on phantom domains")
    p.add_argument("--domains", default="A,B")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--variant", choices=("ht", "lora", "frozen"), default="ht")
    p.add_argument("--task", choices=("seg", "cls"), default="seg")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = add("analyze-spectrum", cmd_analyze_spectrum, "theta, spectral energy and NE weight probes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--domain", choices=sorted(phantom.PRESETS), default="A")

    p = add("bench", cmd_bench, "latency, FLOPs and parameter counts")
    p.add_argument("--variants", default="frozen,ht,lora")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)

    p = add("count-params", cmd_count_params, "parameter and FLOP accounting")
    p.add_argument("--dims", choices=("toy", "b16"), default="b16")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        t0 = time.perf_counter()
        args.handler(args)
        if args.verbose:
            print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    except HybridTuneError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"{IntegrityError.category}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
