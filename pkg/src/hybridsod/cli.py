"""Command-line entry point: prepare, schedule, train, predict, eval (and synth).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime abort.
``HYBRIDSOD_OUTPUT_ROOT`` overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import OUTPUT_ENV, RunConfig, load_config
from .data import (GroupPartition, LabelKind, Sample, generate_coarse_label, partition,
                   resize_map)
from .exceptions import ConfigError, DataError, HybridSODError
from .metrics import evaluate_corpus
from .orchestrator import EventLog, Pipeline, _seed, build_schedule
from .snet import ReferenceSNet
from .store import (GT_THRESHOLD, DatasetLayout, RunStore, list_pngs, read_gray,
                    read_manifest, read_rgb, write_gray, write_manifest)

log = logging.getLogger("hybridsod")


# ---------------------------------------------------------------- helpers

def _overrides(args) -> dict:
    ov = {k: getattr(args, k, None) for k in
          ("data_dir", "val_dir", "output_dir", "seed", "num_groups", "num_real", "mode")}
    if getattr(args, "generate_coarse", False):
        ov["generate_coarse"] = True
    if getattr(args, "epochs", None) is not None:
        ov["optimizer"] = {"epochs": args.epochs}
    return ov


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _dict_diff(old: dict, new: dict, prefix: str = "") -> list[str]:
    lines = []
    for k in sorted(set(old) | set(new)):
        a, b = old.get(k), new.get(k)
        if isinstance(a, dict) and isinstance(b, dict):
            lines += _dict_diff(a, b, f"{prefix}{k}.")
        elif a != b:
            lines.append(f"  {prefix}{k}: {a!r} -> {b!r}")
    return lines


def _placeholder(sid: str, kind: LabelKind) -> Sample:
    # partition() only inspects ids and label provenance
    return Sample(sid, np.zeros((1, 1, 3)), np.zeros((1, 1)), kind)


def load_run_samples(manifest: dict) -> tuple[list[Sample], GroupPartition, list[Sample]]:
    """Materialize training samples, the partition and the validation set."""
    layout = DatasetLayout(manifest["data_dir"])
    coarse_dir = Path(manifest["coarse_dir"])
    part = GroupPartition.from_dict(manifest["partition"])
    samples = []
    for rec in manifest["samples"]:
        sid, kind = rec["id"], LabelKind(rec["kind"])
        path = coarse_dir / f"{sid}.png"
        if not path.exists():
            raise DataError(f"coarse label {path} is missing")
        coarse = read_gray(path)
        image = read_rgb(layout.images / f"{sid}.png")
        if kind is LabelKind.REAL:
            label = (read_gray(layout.real_path(sid), raw=True) >= GT_THRESHOLD).astype(float)
        else:
            label = coarse
        samples.append(Sample(sid, image, label, kind, rec["group"], coarse))
    val = []
    if manifest.get("val_dir"):
        vl = DatasetLayout(manifest["val_dir"])
        val = [vl.load_eval(sid) for sid in vl.ids()]
    return samples, part, val


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    cfg = _config(args)
    if not cfg.data_dir:
        raise ConfigError("data_dir is required (config key or --data-dir)")
    layout = DatasetLayout(cfg.data_dir)
    ids = layout.ids()
    if not ids:
        raise DataError(f"{layout.images} holds no PNG images")
    if not layout.labels_real.is_dir():
        raise DataError(f"{layout.labels_real} does not exist")
    with_real = [s for s in ids if layout.real_path(s).exists()]
    if len(with_real) < cfg.num_real:
        lacking = [s for s in ids if s not in set(with_real)]
        raise DataError(f"need {cfg.num_real} real labels, found {len(with_real)}; "
                        f"missing labels_real for: {lacking[:20]}")
    rng = np.random.default_rng(_seed(cfg.seed, 17))
    real = set(sorted(rng.choice(with_real, cfg.num_real, replace=False).tolist()))

    store = RunStore(cfg.output_dir)
    coarse_dir = layout.labels_coarse
    no_coarse = [s for s in ids if not layout.coarse_path(s).exists()]
    if cfg.generate_coarse:
        coarse_dir = store.root / "coarse_labels"
        for sid in ids:
            target = coarse_dir / f"{sid}.png"
            if not target.exists():
                write_gray(target, generate_coarse_label(read_rgb(layout.images / f"{sid}.png")))
    elif no_coarse:
        raise DataError(f"missing labels_coarse for: {no_coarse[:20]} "
                        "(pass --generate-coarse to derive them)")
    kinds = {s: (LabelKind.REAL if s in real else LabelKind.COARSE).value for s in ids}
    part = partition([_placeholder(s, LabelKind(kinds[s])) for s in ids], cfg.num_groups,
                     cfg.num_real, cfg.seed)
    extra = {"data_dir": str(Path(cfg.data_dir).resolve()),
             "val_dir": str(Path(cfg.val_dir).resolve()) if cfg.val_dir else None,
             "coarse_dir": str(coarse_dir.resolve()), "num_real": cfg.num_real}
    path = write_manifest(store.manifest, part, kinds, cfg.seed, extra)
    sizes = [len(part.group(g)) for g in range(1, len(part) + 1)]
    print(f"manifest written to {path}: {len(ids)} samples, group sizes {sizes}")
    return 0


def cmd_schedule(args) -> int:
    cfg = _config(args)
    group1 = args.group1_size if args.group1_size is not None else cfg.num_real
    sched = build_schedule(cfg.num_groups, group1, cfg.mode)
    print(json.dumps(sched.to_dict(), indent=1) if args.json else sched.describe())
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    store = RunStore(cfg.output_dir)
    manifest = read_manifest(store.manifest)
    if manifest["num_groups"] != cfg.num_groups or manifest["seed"] != cfg.seed:
        raise ConfigError("config disagrees with the prepared manifest "
                          f"(num_groups {manifest['num_groups']}, seed {manifest['seed']}); "
                          "rerun `prepare`")
    with store.lock():
        previous = store.read_run()
        if previous and previous.get("completed_iterations"):
            diff = _dict_diff(previous["config"], cfg.to_dict())
            if diff:
                raise ConfigError("cannot resume: config differs from the stored run\n"
                                  + "\n".join(diff))
            if "final_val_mae" in previous:
                print(f"run already complete: final validation MAE "
                      f"{previous['final_val_mae']}")
                return 0
        samples, part, val = load_run_samples(manifest)
        events = EventLog(store.events)
        pipeline = Pipeline(cfg, samples, part, val, store=store, events=events)
        if pipeline.restore():
            log.info("resuming after iteration %d", pipeline.completed)
        events.emit("header", metric={"config": cfg.to_dict()})
        result = pipeline.run(stop_after=args.stop_after)
    if result.events[-1]["action"] != "final":
        print(f"stopped after iteration {result.completed_iterations}")
    else:
        print(f"done: {result.completed_iterations} iteration(s), "
              f"final validation MAE {result.final_val_mae}")
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint or RunStore(cfg.output_dir).checkpoints / "snet_final.ckpt")
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    net = ReferenceSNet.from_checkpoint(ckpt)
    if not Path(args.images).is_dir():
        raise DataError(f"{args.images} is not a directory")
    images = list_pngs(args.images)
    out = Path(args.out or Path(cfg.output_dir) / "predictions")
    out.mkdir(parents=True, exist_ok=True)
    size = (net.input_size, net.input_size)
    for stem, path in images.items():
        image = read_rgb(path)
        pred = net.predict(resize_map(image, size)[None])[0]
        write_gray(out / f"{stem}.png", np.clip(resize_map(pred, image.shape[:2]), 0, 1))
    print(f"{len(images)} saliency map(s) written to {out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_corpus(args.pred, args.gt, dataset=args.dataset)
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.to_json(args.out)
    if args.csv:
        report.to_csv(args.csv)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_corpus, write_dataset

    root = Path(args.out)
    write_dataset(root / "train", make_corpus(args.n, args.size, args.seed))
    write_dataset(root / "val", make_corpus(args.n_val, args.size, args.seed + 1000, prefix="v"))
    print(f"synthetic corpus written to {root} ({args.n} train, {args.n_val} val)")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML/JSON run config")
        sp.add_argument("--output-dir", help=f"run directory (env {OUTPUT_ENV} also applies)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--num-groups", type=int)
        sp.add_argument("--num-real", type=int)
        sp.add_argument("--mode")
        if data:
            sp.add_argument("--data-dir")
            sp.add_argument("--val-dir")

    sp = sub.add_parser("prepare", help="validate a dataset and write the group manifest")
    common(sp)
    sp.add_argument("--generate-coarse", action="store_true",
                    help="derive missing coarse labels with the MBD transform")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("schedule", help="print the iteration plan")
    common(sp, data=False)
    sp.add_argument("--group1-size", type=int, help="defaults to num_real")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("train", help="run (or resume) the training pipeline")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--stop-after", type=int, help="stop once this iteration completes")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="S-Net inference over a folder of PNG images")
    common(sp, data=False)
    sp.add_argument("--checkpoint", help="defaults to <run>/checkpoints/snet_final.ckpt")
    sp.add_argument("--images", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="score predicted maps against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--dataset", default="")
    sp.add_argument("--out", help="report JSON path")
    sp.add_argument("--csv", help="PR-curve CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="write a synthetic shape corpus (train/ and val/)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--n-val", type=int, default=50)
    sp.add_argument("--size", type=int, default=48)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HybridSODError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything unexpected is a runtime abort
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
