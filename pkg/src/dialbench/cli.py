"""Command-line entry point (`dial`) for the segmentation workbench.

Subcommands cover the whole loop: corpus generation, workbench init,
initial training, slide segmentation, correction submission (from mask
files or the scripted oracle), finetuning, satisfaction, status, case-level
assessment, the HTTP service, and the multi-seed closed-loop experiment.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .assess import (
    error_rate,
    model_comparison,
    necrosis_ratio,
    read_reference_csv,
    write_report,
)
from .experiment import ExperimentConfig, build_corpus, run_experiment
from .inference import SegmentationMap, segment_slide
from .rounds import (
    CorrectionPolicy,
    LoopConfig,
    Workbench,
    finetune_round,
    oracle_correct,
    run_initial_round,
    submit_corrections,
)
from .wsi import LabelMask, load_slide


def _bench(args) -> Workbench:
    return Workbench(args.root)


def cmd_generate(args) -> int:
    build_corpus(
        args.out,
        n_train=args.train,
        n_test=args.test,
        slide_size=args.size,
        seed=args.seed,
        annotation_fraction=args.fraction,
    )
    payload = json.loads((Path(args.out) / "cases.json").read_text())
    refs = {
        cid: info["r_path"]
        for cid, info in payload["cases"].items()
        if info["r_path"] is not None
    }
    from .assess import write_reference_csv

    write_reference_csv(Path(args.out) / "refs.csv", refs)
    print(f"generated {len(payload['cases'])} cases under {args.out}")
    return 0


def cmd_init(args) -> int:
    cfg = LoopConfig(
        patch_size=args.patch_size,
        base_channels=args.base_channels,
        depth=args.depth,
        batch_size=args.batch_size,
        epochs=args.epochs,
        finetune_epochs=args.finetune_epochs,
        rng_seed=args.seed,
    )
    bench = Workbench(args.root, cfg, corpus_dir=args.corpus)
    if not (bench.corpus_dir / "cases.json").exists():
        print(f"error: no corpus at {bench.corpus_dir}", file=sys.stderr)
        return 1
    print(f"workbench ready at {args.root} ({len(bench.cases())} cases)")
    return 0


def _progress_printer(stats, total) -> None:
    print(
        f"  epoch {stats.epoch}/{total}  loss {stats.train_loss:.4f}  "
        f"val mIOU {stats.val_miou:.4f}",
        flush=True,
    )


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    state = run_initial_round(_bench(args), progress=_progress_printer)
    rec = state.rounds[-1]
    print(f"trained {rec.model_id} (val mIOU {rec.val_miou:.4f})")
    return 0


def cmd_segment(args) -> int:
    torch.set_num_threads(args.threads)
    bench = _bench(args)
    model_id = args.model or bench.load_state().current_model
    if model_id is None:
        print("error: no trained model", file=sys.stderr)
        return 1
    model = bench.load_model(model_id)
    if not args.slide and not args.slide_dir:
        print("error: pass --slide <id> or --slide-dir <path>", file=sys.stderr)
        return 1
    slide = bench.load_slide(args.slide) if not args.slide_dir else load_slide(args.slide_dir)
    seg = segment_slide(model, slide, bench.config.inference_batch)
    out = args.out or f"{slide.slide_id}.seg"
    seg.save(out)
    print(f"{slide.slide_id}: counts {seg.counts.tolist()} -> {out}")
    return 0


def cmd_correct(args) -> int:
    bench = _bench(args)
    if args.oracle:
        masks = oracle_correct(bench, args.budget, margin=args.margin)
    else:
        if not args.masks:
            print("error: pass --from <dir> or --oracle", file=sys.stderr)
            return 1
        k1 = bench.load_state().round_index + 1
        masks = [
            LabelMask.load(p, p.stem) for p in sorted(Path(args.masks).glob("*.mask"))
        ]
        for m in masks:
            if m.round != k1:
                print(
                    f"error: {m.slide_id} has round {m.round}, expected {k1}",
                    file=sys.stderr,
                )
                return 1
    if not masks:
        print("nothing to correct (predictions already match)")
        return 0
    state = submit_corrections(bench, masks)
    total = sum(m.labeled_count for m in masks)
    print(f"submitted {len(masks)} correction masks ({total} px) for round {state.pending_round}")
    return 0


def cmd_finetune(args) -> int:
    torch.set_num_threads(args.threads)
    bench = _bench(args)
    state = finetune_round(
        bench, CorrectionPolicy(args.weighting), parent_model_id=args.parent,
        progress=_progress_printer,
    )
    rec = state.rounds[-1]
    print(f"finetuned -> {rec.model_id} (val mIOU {rec.val_miou:.4f})")
    return 0


def cmd_satisfy(args) -> int:
    state = submit_corrections(_bench(args), [], satisfy=True)
    print(f"status: {state.status} (final model {state.current_model})")
    return 0


def cmd_status(args) -> int:
    state = _bench(args).load_state()
    print(json.dumps(state.as_dict(), indent=1))
    return 0


def cmd_assess(args) -> int:
    torch.set_num_threads(args.threads)
    refs = read_reference_csv(args.refs) if args.refs else {}
    if args.cases:
        # offline mode: directory of per-case segmentation maps
        reports = []
        for case_dir in sorted(Path(args.cases).iterdir()):
            if not case_dir.is_dir():
                continue
            segs = [
                SegmentationMap.load(p, p.stem, "offline")
                for p in sorted(case_dir.glob("*.seg"))
            ]
            if segs:
                reports.append(
                    necrosis_ratio(case_dir.name, segs, refs.get(case_dir.name))
                )
        e = error_rate(reports)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(
                {"error_rate": e, "cases": [r.as_dict() for r in reports]},
                indent=1,
                sort_keys=True,
            )
        )
        print(f"E = {e:.4f} over {len(reports)} cases -> {out}")
        return 0
    bench = _bench(args)
    state = bench.load_state()
    if not state.rounds:
        print("error: no trained models to assess", file=sys.stderr)
        return 1
    models = [(rec.model_id, bench.load_model(rec.model_id)) for rec in state.rounds]
    if len(models) == 1:
        models = models * 2
    cases = bench.cases()
    test_slides = {
        cid: [bench.load_slide(s) for s in info.slides]
        for cid, info in cases.items()
        if info.split == "test"
    }
    case_refs = refs or {
        cid: info.r_path
        for cid, info in cases.items()
        if info.split == "test" and info.r_path is not None
    }
    rows = model_comparison(models, test_slides, case_refs, bench.config.inference_batch)
    out = Path(args.out or (bench.root / "reports"))
    write_report(out, rows)
    for row in rows:
        print(f"{row.model_id}: E = {row.error:.4f}{'  (best)' if row.best else ''}")
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceConfig, run_server

    if args.config:
        cfg = ServiceConfig.load(args.config)
    else:
        cfg = ServiceConfig(
            root=args.root, host=args.host, port=args.port, eager_jobs=args.eager_jobs
        )
    run_server(cfg)
    return 0


def cmd_experiment(args) -> int:
    torch.set_num_threads(args.threads)
    cfg = ExperimentConfig(
        seeds=tuple(args.seeds),
        slide_size=args.size,
        n_train_cases=args.train,
        n_test_cases=args.test,
        epochs=args.epochs,
        finetune_epochs=args.finetune_epochs,
    )

    def report(seed_result):
        print(
            f"seed {seed_result.seed}: "
            + "  ".join(f"{k}={v:.4f}" for k, v in seed_result.errors.items())
            + f"  [{seed_result.wall_seconds:.0f}s]",
            flush=True,
        )

    result = run_experiment(args.out, cfg, progress=report)
    print(json.dumps(result.as_dict()["checks"], indent=1))
    return 0 if result.passed() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dial", description="interactive whole-slide segmentation workbench"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_root(p):
        p.add_argument("--root", required=True, help="workbench root directory")

    def add_threads(p):
        p.add_argument("--threads", type=int, default=1, help="torch thread count")

    p = sub.add_parser("generate", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=6)
    p.add_argument("--test", type=int, default=8)
    p.add_argument("--size", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.10)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("init", help="initialize a workbench over a corpus")
    add_root(p)
    p.add_argument("--corpus", default=None, help="corpus dir (default <root>/corpus)")
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="run the initial training round")
    add_root(p)
    add_threads(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("segment", help="segment one slide with a checkpoint")
    add_root(p)
    add_threads(p)
    p.add_argument("--slide", help="slide id within the corpus")
    p.add_argument("--slide-dir", help="path to an external slide directory")
    p.add_argument("--model", default=None, help="model id (default: current)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("correct", help="submit correction masks")
    add_root(p)
    p.add_argument("--from", dest="masks", default=None, help="directory of .mask files")
    p.add_argument("--oracle", action="store_true", help="use the scripted annotator")
    p.add_argument("--budget", type=int, default=None, help="oracle pixel budget")
    p.add_argument(
        "--margin", type=int, default=0,
        help="grow corrected regions by this many pixels of true context",
    )
    p.set_defaults(fn=cmd_correct)

    p = sub.add_parser("finetune", help="finetune on the pending corrections")
    add_root(p)
    add_threads(p)
    p.add_argument("--weighting", choices=["single", "double"], required=True)
    p.add_argument("--parent", default=None, help="parent model id (default: latest)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("satisfy", help="declare the predictions satisfactory")
    add_root(p)
    p.set_defaults(fn=cmd_satisfy)

    p = sub.add_parser("status", help="print round state")
    add_root(p)
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("assess", help="case-level necrosis-ratio assessment")
    p.add_argument("--root", default=None, help="workbench root (model comparison mode)")
    add_threads(p)
    p.add_argument("--cases", default=None, help="directory of per-case .seg files")
    p.add_argument("--refs", default=None, help="CSV of case_id,R_PATH")
    p.add_argument("--out", default="report")
    p.set_defaults(fn=cmd_assess)

    p = sub.add_parser("serve", help="run the HTTP service")
    add_root(p)
    p.add_argument("--config", default=None, help="JSON service config file")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--eager-jobs", action="store_true")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("experiment", help="run the multi-seed closed-loop experiment")
    p.add_argument("--out", required=True)
    add_threads(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--train", type=int, default=6)
    p.add_argument("--test", type=int, default=8)
    p.add_argument("--size", type=int, default=2048)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.set_defaults(fn=cmd_experiment)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
