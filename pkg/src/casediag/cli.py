"""Command-line entry point.

Subcommands: generate, pretrain-knowledge, train, eval, finetune, zeroshot,
explain, report. Every command takes --config (YAML) plus flag overrides
(flags win), writes its resolved configuration into the output directory, and
guards that directory with a lock file. Exit codes: 0 success, 2 usage,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import reporting
from .config import load_config, write_resolved
from .corpus import (
    apply_manifest_splits,
    build_label_space,
    load_manifest,
    split_corpus,
)
from .errors import DataError, NumericError, UsageError
from .explain import score_cam
from .knowledge import (
    KnowledgeConfig,
    TextEncoder,
    embed_labels,
    kb_triples,
    load_knowledge_base,
    pretrain_knowledge_encoder,
)
from .metrics import thresholded_metrics
from .model import forward_case, load_checkpoint, save_checkpoint
from .preprocess import normalize_scan
from .synthetic import generate_synthetic
from .training import (
    finetune,
    predict_corpus,
    select_threshold,
    train,
    zero_shot_predict,
)

KNOWLEDGE_ENCODER_FORMAT_VERSION = 1


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", metavar="DIR", help="override the output directory")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")


_VARIANT_ALIASES = {"resnet": "resnet", "vit": "vit", "mix": "resnet_vit_mix"}


def _overrides(args):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    if getattr(args, "variant", None):
        o["encoder.variant"] = _VARIANT_ALIASES[args.variant]
    if getattr(args, "fusion", None):
        o["train.fusion_mode"] = args.fusion
    if getattr(args, "ke", None):
        o["train.knowledge_enhancement"] = args.ke == "on"
    if getattr(args, "level", None):
        o["level"] = args.level
    return o


def _run_config(args):
    return load_config(args.config, _overrides(args))


def _locked_out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out, FileLock(str(out / ".lock"), timeout=600)


def _load_corpus(cfg):
    if not cfg.corpus.manifest:
        raise UsageError("config corpus.manifest is required for this command")
    return load_manifest(cfg.corpus.manifest, mapping_path=cfg.corpus.icd_map)


def _splits_for(corpus, seed):
    preassigned = apply_manifest_splits(corpus)
    return preassigned if preassigned is not None else split_corpus(corpus, seed)


def _knowledge_embedding(cfg, label_space):
    """Load or pretrain the text encoder, then embed the label space."""
    kcfg = cfg.knowledge
    encoder = TextEncoder(kcfg)
    if cfg.corpus.knowledge_encoder:
        payload = torch.load(cfg.corpus.knowledge_encoder, map_location="cpu", weights_only=False)
        if payload.get("format_version") != KNOWLEDGE_ENCODER_FORMAT_VERSION:
            raise DataError(
                f"unsupported knowledge encoder format {payload.get('format_version')!r}"
            )
        encoder = TextEncoder(KnowledgeConfig(**payload["config"]))
        encoder.load_state_dict(payload["state_dict"])
    elif cfg.corpus.knowledge_base:
        torch.manual_seed(cfg.seed)
        encoder = TextEncoder(kcfg)
        triples = kb_triples(load_knowledge_base(cfg.corpus.knowledge_base))
        pretrain_knowledge_encoder(triples, encoder, kcfg, seed=cfg.seed)
    else:
        raise UsageError(
            "knowledge enhancement is on but neither corpus.knowledge_encoder "
            "nor corpus.knowledge_base is configured"
        )
    return embed_labels(label_space, encoder)


def cmd_generate(args):
    cfg = _run_config(args)
    out, lock = _locked_out(cfg)
    with lock:
        if any(p.name != ".lock" for p in out.iterdir()) and not args.force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        gen = dataclasses.replace(cfg.generate, out_dir=str(out))
        corpus = generate_synthetic(gen, cfg.seed)
        write_resolved(cfg, out)
    print(f"generated {len(corpus)} cases into {out}")


def cmd_pretrain_knowledge(args):
    cfg = _run_config(args)
    if not cfg.corpus.knowledge_base:
        raise UsageError("config corpus.knowledge_base is required")
    out, lock = _locked_out(cfg)
    with lock:
        torch.manual_seed(cfg.seed)
        encoder = TextEncoder(cfg.knowledge)
        triples = kb_triples(load_knowledge_base(cfg.corpus.knowledge_base))
        pretrain_knowledge_encoder(triples, encoder, cfg.knowledge, seed=cfg.seed)
        payload = {
            "format_version": KNOWLEDGE_ENCODER_FORMAT_VERSION,
            "config": dataclasses.asdict(cfg.knowledge),
            "state_dict": encoder.state_dict(),
        }
        torch.save(payload, out / "knowledge_encoder.pt")
        write_resolved(cfg, out)
    print(f"knowledge encoder written to {out / 'knowledge_encoder.pt'}")


def cmd_train(args):
    cfg = _run_config(args)
    corpus = _load_corpus(cfg)
    splits = _splits_for(corpus, cfg.seed)
    label_space = build_label_space(corpus, cfg.level, splits)
    out, lock = _locked_out(cfg)
    with lock:
        knowledge = None
        if cfg.train.knowledge_enhancement:
            knowledge = _knowledge_embedding(cfg, label_space)
        result = train(
            corpus, splits, cfg.train, cfg.encoder,
            seed=cfg.seed, geometry=cfg.geometry, level=cfg.level,
            knowledge=knowledge, fusion_cfg=cfg.fusion,
            out_dir=out / "checkpoints", label_space=label_space,
        )
        model = result["model"]
        val_cases = splits.cases_in(corpus, "val")
        thresholds = np.full(len(label_space), 0.5)
        if val_cases:
            scores, ys, _ = predict_corpus(model, val_cases, label_space, cfg.geometry, seed=cfg.seed)
            thresholds = select_threshold(scores, ys)
        save_checkpoint(
            out / "model.pt", model, label_space,
            encoder_cfg=cfg.encoder,
            fusion_cfg=cfg.fusion if cfg.train.fusion_mode == "learnable" else None,
            train_config=dataclasses.asdict(cfg.train),
            epoch=cfg.train.epochs - 1,
            thresholds=thresholds.tolist(),
            geometry=cfg.geometry,
        )
        reporting.write_json(result["history"], out / "history.json")
        splits_doc = splits.to_dict()
        reporting.write_json(splits_doc, out / "splits.json")
        write_resolved(cfg, out)
    last = result["history"][-1]
    print(
        f"trained {cfg.train.epochs} epochs; final train loss {last['train_loss']:.4f}"
        + (f", val macro AUC {last['val_macro_auc']:.4f}" if "val_macro_auc" in last else "")
    )
    print(f"checkpoint written to {out / 'model.pt'}")


def _check_label_space(ckpt_space, corpus_space):
    if list(ckpt_space.classes) != list(corpus_space.classes):
        raise DataError(
            "label space mismatch: checkpoint has "
            f"{len(ckpt_space.classes)} classes {ckpt_space.classes[:4]}..., corpus has "
            f"{len(corpus_space.classes)} classes {corpus_space.classes[:4]}..."
        )


def cmd_eval(args):
    cfg = _run_config(args)
    bundle = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(cfg)
    splits = _splits_for(corpus, cfg.seed)
    label_space = bundle["label_space"]
    corpus_space = build_label_space(corpus, label_space.level, splits)
    _check_label_space(label_space, corpus_space)
    cases = splits.cases_in(corpus, args.split)
    if not cases:
        raise DataError(f"split {args.split!r} has no cases")
    out, lock = _locked_out(cfg)
    with lock:
        scores, ys, ids = predict_corpus(
            bundle["model"], cases, label_space, bundle["geometry"], seed=cfg.seed
        )
        thresholds = bundle["payload"].get("thresholds")
        if thresholds is None:
            thresholds = [0.5] * len(label_space)
        report = reporting.evaluate_split(
            scores, ys, label_space, thresholds, seed=cfg.seed
        )
        report["split"] = args.split
        report["n_cases"] = len(cases)
        report["categories"] = dict(label_space.category)
        report["display_names"] = dict(label_space.names)
        series = reporting.roc_series(scores, ys, label_space)
        reporting.write_json(report, out / "report.json")
        reporting.write_json(series, out / "roc_points.json")
        anatomies = [c.anatomy or "" for c in cases]
        np.savez(
            out / "scores.npz",
            scores=scores,
            labels=ys,
            case_ids=np.array(ids),
            anatomies=np.array(anatomies),
            classes=np.array(list(label_space.classes)),
        )
        write_resolved(cfg, out)
    macro = report["strata"].get("all", {}).get("auc", float("nan"))
    print(f"evaluated {len(cases)} {args.split} cases; macro AUC {macro:.2f}%")
    print(f"report written to {out / 'report.json'}")


def cmd_finetune(args):
    cfg = _run_config(args)
    bundle = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(cfg)
    splits = _splits_for(corpus, cfg.seed)
    out, lock = _locked_out(cfg)
    with lock:
        result = finetune(
            bundle, corpus, splits, args.mode, args.fraction, cfg.train,
            seed=cfg.seed, level=cfg.level, out_dir=out / "checkpoints",
        )
        model = result["model"]
        label_space = result["label_space"]
        val_cases = splits.cases_in(corpus, "val")
        thresholds = np.full(len(label_space), 0.5)
        if val_cases:
            scores, ys, _ = predict_corpus(model, val_cases, label_space, bundle["geometry"], seed=cfg.seed)
            thresholds = select_threshold(scores, ys)
        save_checkpoint(
            out / "model.pt", model, label_space,
            encoder_cfg=bundle["encoder_cfg"],
            fusion_cfg=bundle["fusion_cfg"] if args.mode == "multi_image" else None,
            train_config=dataclasses.asdict(cfg.train),
            epoch=cfg.train.epochs - 1,
            thresholds=thresholds.tolist(),
            geometry=bundle["geometry"],
        )
        reporting.write_json(result["history"], out / "history.json")
        write_resolved(cfg, out)
    print(f"finetuned ({args.mode}, fraction {args.fraction}); model at {out / 'model.pt'}")


def cmd_zeroshot(args):
    cfg = _run_config(args)
    if not args.mapping:
        raise UsageError("zeroshot requires --mapping PATH")
    mapping_path = Path(args.mapping)
    if not mapping_path.exists():
        raise DataError(f"mapping file not found: {mapping_path}")
    mapping = {k: set(v) for k, v in json.loads(mapping_path.read_text()).items()}
    bundle = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(cfg)
    splits = _splits_for(corpus, cfg.seed)
    label_space = bundle["label_space"]
    external_space = build_label_space(corpus, cfg.level, splits)
    cases = splits.cases_in(corpus, args.split)
    if not cases:
        raise DataError(f"split {args.split!r} has no cases")
    thresholds = bundle["payload"].get("thresholds")
    if thresholds is None:
        raise DataError("checkpoint has no stored thresholds; train with a validation split")
    out, lock = _locked_out(cfg)
    with lock:
        probs = np.zeros((len(cases), len(label_space)))
        truth = np.zeros((len(cases), len(external_space)))
        for i, case in enumerate(cases):
            probs[i] = (
                forward_case(bundle["model"], case, bundle["geometry"], seed=cfg.seed)
                .detach()
                .numpy()
            )
            truth[i] = external_space.label_vector(case)
        preds, ext_classes, note = zero_shot_predict(
            probs, list(label_space.classes), mapping, thresholds
        )
        per_class = {}
        for j, ext in enumerate(ext_classes):
            if ext not in external_space.classes:
                raise DataError(f"mapping target {ext!r} is not a corpus class")
            col = external_space.index(ext)
            tm = thresholded_metrics(preds[:, j].astype(float), truth[:, col], 0.5)
            per_class[ext] = {
                "f1": 100.0 * tm["f1"],
                "mcc": 100.0 * tm["mcc"],
                "acc": 100.0 * tm["acc"],
                "mcc_defined": tm["mcc_defined"],
            }
        macro = {
            m: float(np.mean([v[m] for v in per_class.values()])) for m in ("f1", "mcc", "acc")
        }
        report = {
            "per_class": per_class,
            "macro": macro,
            "notes": [note],
            "split": args.split,
            "n_cases": len(cases),
        }
        reporting.write_json(report, out / "zeroshot_report.json")
        write_resolved(cfg, out)
    print(f"zero-shot macro F1 {macro['f1']:.2f}% over {len(ext_classes)} external classes")
    print(f"note: {note}")


def cmd_explain(args):
    cfg = _run_config(args)
    bundle = load_checkpoint(args.checkpoint)
    corpus = _load_corpus(cfg)
    label_space = bundle["label_space"]
    try:
        case = corpus.get(args.case)
    except KeyError:
        raise DataError(f"case {args.case!r} not in the corpus") from None
    target = args.target_class
    if target is None:
        probs = forward_case(bundle["model"], case, bundle["geometry"], seed=cfg.seed)
        order = np.argsort(-probs.detach().numpy())
        target = next(
            (label_space.classes[i] for i in order if label_space.classes[i] != "normal"),
            label_space.classes[int(order[0])],
        )
    out, lock = _locked_out(cfg)
    with lock:
        saliency = score_cam(
            bundle["model"], case, label_space, target,
            geometry=bundle["geometry"], scan_index=args.scan_index,
            slice_index=args.slice_index, seed=cfg.seed,
        )
        tensor = normalize_scan(case.scans[args.scan_index], bundle["geometry"])
        k = saliency.slice_index if saliency.slice_index is not None else 0
        k = min(max(k, 0), tensor.values.shape[2] - 1)
        paths = reporting.save_saliency(saliency, tensor.values[:, :, k], out)
        write_resolved(cfg, out)
    print(f"saliency for {case.case_id}/{target}: " + ", ".join(str(p) for p in paths))


def cmd_report(args):
    cfg = _run_config(args)
    src = Path(args.eval_dir)
    report_path = src / "report.json"
    scores_path = src / "scores.npz"
    roc_path = src / "roc_points.json"
    for p in (report_path, scores_path, roc_path):
        if not p.exists():
            raise DataError(f"missing evaluation artifact: {p}")
    report = json.loads(report_path.read_text())
    series = json.loads(roc_path.read_text())
    data = np.load(scores_path, allow_pickle=False)
    from .corpus import LabelSpace

    classes = [str(c) for c in data["classes"]]
    categories = report.get("categories", {})
    names = report.get("display_names", {})
    label_space = LabelSpace(
        level=cfg.level,
        classes=classes,
        names={c: names.get(c, c) for c in classes},
        counts={c: 0 for c in classes},
        category={c: categories.get(c, "tail") for c in classes},
    )
    out, lock = _locked_out(cfg)
    with lock:
        roc_files = reporting.plot_roc(report, series, label_space, out / "plots")
        dist_files = reporting.plot_probability_distributions(
            data["scores"], data["labels"], [str(a) for a in data["anatomies"]],
            label_space, out / "plots",
        )
        write_resolved(cfg, out)
    print(f"wrote {len(roc_files)} ROC plots and {len(dist_files)} distribution plots to {out / 'plots'}")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="casediag",
        description="Case-level multi-scan diagnosis: synthesis, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("pretrain-knowledge", help="contrastively pretrain the text encoder")
    _add_common(p)
    p.set_defaults(handler=cmd_pretrain_knowledge)

    p = sub.add_parser("train", help="train a case model")
    _add_common(p)
    p.add_argument("--variant", choices=sorted(_VARIANT_ALIASES))
    p.add_argument("--fusion", choices=["learnable", "max", "mean", "random"])
    p.add_argument("--ke", choices=["on", "off"])
    p.add_argument("--level", choices=["disorder", "icd"])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("finetune", help="adapt a checkpoint to an external corpus")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["single_image", "multi_image"], required=True)
    p.add_argument("--fraction", type=float, choices=[0.01, 0.1, 0.3, 1.0], default=1.0)
    p.add_argument("--level", choices=["disorder", "icd"])
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("zeroshot", help="zero-shot transfer via a class mapping")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mapping", metavar="PATH")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--level", choices=["disorder", "icd"])
    p.set_defaults(handler=cmd_zeroshot)

    p = sub.add_parser("explain", help="Score-CAM saliency for one case")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="case id")
    p.add_argument("--target-class", dest="target_class")
    p.add_argument("--scan-index", dest="scan_index", type=int, default=0)
    p.add_argument("--slice-index", dest="slice_index", type=int, default=None)
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("report", help="render plots from an evaluation directory")
    _add_common(p)
    p.add_argument("--eval-dir", dest="eval_dir", required=True)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return 2
    try:
        args.handler(args)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
