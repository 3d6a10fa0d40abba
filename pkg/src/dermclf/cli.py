"""Command-line entry point: ``dermclf {ingest,train,evaluate,predict,plot}``.

Exit codes: 0 success, 1 internal error, 2 user/input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .dataset import CATEGORY_CODES, SPLITS, Manifest, find_unreadable_images, format_manifest, read_manifest
from .errors import DermclfError, InputError, MissingImagesError
from .schedule import (
    N_GROUPS,
    describe_plan,
    emit_schedule_table,
    read_schedule_csv,
    write_schedule_csv,
)

log = logging.getLogger("dermclf")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


def _load_split(cfg: cfgmod.RunConfig, split: str) -> Manifest:
    path = cfg.data.csv_for(split)
    if not path:
        raise InputError(f"no ground-truth CSV configured for split {split!r}")
    try:
        return read_manifest(path, split, cfg.data.image_root)
    except FileNotFoundError:
        raise InputError(f"ground-truth CSV not found: {path}") from None


# --------------------------------------------------------------------------- ingest


def cmd_ingest(cfg: cfgmod.RunConfig, args) -> int:
    manifests = {}
    missing: dict[str, list[str]] = {}
    for split in cfgmod.split_csvs(cfg):
        m = _load_split(cfg, split)
        manifests[split] = m
        bad = find_unreadable_images(m)
        if bad:
            missing[split] = bad
    if missing:
        for split, ids in missing.items():
            print(f"{split}: {len(ids)} missing or unreadable image(s):", file=sys.stderr)
            for image_id in ids:
                print(f"  {image_id}", file=sys.stderr)
        return EXIT_INPUT
    cache = cfg.output_dir / "manifests"
    cache.mkdir(parents=True, exist_ok=True)
    summary = {}
    for split, m in manifests.items():
        (cache / f"{split}.csv").write_text(format_manifest(m), encoding="utf-8")
        counts = m.category_counts()
        summary[split] = {"n_records": len(m), "per_category": dict(zip(CATEGORY_CODES, counts))}
        per_cat = " ".join(f"{c}={n}" for c, n in zip(CATEGORY_CODES, counts))
        print(f"{split}: {len(m)} records ({per_cat})")
    (cache / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------- train


# size of the full HAM10000 training split
FULL_TRAIN_RECORDS = 10015


def _train_count(cfg: cfgmod.RunConfig) -> int | None:
    try:
        return len(_load_split(cfg, "train"))
    except InputError:
        return None


def cmd_train(cfg: cfgmod.RunConfig, args) -> int:
    from .trainer import run_recipe

    if args.dry_run:
        n = _train_count(cfg)
        plan = cfg.train.plan(n if n is not None else FULL_TRAIN_RECORDS)
        if n is None:
            print(f"training records: unknown (train CSV not readable); step counts assume {FULL_TRAIN_RECORDS}")
        else:
            print(f"training records: {n}")
        print(f"batch size: {cfg.train.batch_size}, base lr: {cfg.train.base_lr:g}, "
              f"group divisors: {list(cfg.train.group_divisors)}")
        print(describe_plan(plan))
        return EXIT_OK
    train = _load_split(cfg, "train")
    bad = find_unreadable_images(train)
    if bad:
        raise MissingImagesError(bad)
    model, state = run_recipe(cfg.train, train, cfg.model.backbone_spec(), cfg.model.head_spec(),
                              resume=args.resume)
    out = cfg.output_dir
    with open(out / "schedule.csv", "w", encoding="utf-8", newline="") as fh:
        write_schedule_csv(emit_schedule_table(state.plan), fh)
    (out / "config.toml").write_text(cfgmod.dump_config(cfg), encoding="utf-8")
    print(f"final training loss (last step): {state.final_step_loss():.6f}")
    print(f"final training loss (last-epoch mean): {state.final_epoch_mean_loss():.6f}")
    for phase, secs in sorted(state.phase_seconds.items()):
        print(f"phase {phase + 1} time: {secs:.1f}s")
    print(f"checkpoints: {out / 'checkpoints'}")
    return EXIT_OK


# --------------------------------------------------------------------------- evaluate / predict


def _checkpoint(args):
    from .trainer import TrainConfig, model_from_checkpoint, read_checkpoint

    payload = read_checkpoint(args.checkpoint)
    model = model_from_checkpoint(payload)
    model.eval()
    return model, TrainConfig.from_dict(payload["config"]["train"])


def cmd_evaluate(cfg: cfgmod.RunConfig, args) -> int:
    from .inference import evaluate

    model, tcfg = _checkpoint(args)
    manifest = _load_split(cfg, args.split)
    use_tta = cfg.eval.tta if args.tta is None else args.tta
    report = evaluate(model, manifest, use_tta, cfg.eval.n_aug, cfg.seed, tcfg.augmentation, tcfg.image_size)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / f"{args.split}_report.json")
    with open(out / f"{args.split}_predictions.csv", "w", encoding="utf-8", newline="") as fh:
        report.write_predictions_csv(fh)
    plain = report.plain if report.tta else report
    print(f"{args.split}: {report.n_records} records")
    print(f"balanced accuracy (plain): {plain.balanced_accuracy:.4f}")
    if report.tta:
        print(f"balanced accuracy (TTA, n_aug={report.n_aug}): {report.balanced_accuracy:.4f}")
    return EXIT_OK


def cmd_predict(cfg: cfgmod.RunConfig, args) -> int:
    from .dataset import load_and_resize, normalize
    from .inference import argmax_label, predict, tta_predict
    from .seeding import stream, text_key

    model, tcfg = _checkpoint(args)
    img = normalize(load_and_resize(args.image, tcfg.image_size))
    if args.tta:
        rng = stream(cfg.seed, "tta", text_key(Path(args.image).stem))
        probs = tta_predict(model, img, cfg.eval.n_aug, tcfg.augmentation, rng)
    else:
        probs = predict(model, img)
    for code, p in zip(CATEGORY_CODES, probs):
        print(f"{code}\t{p:.6f}")
    print(f"predicted\t{CATEGORY_CODES[argmax_label(probs)]}")
    return EXIT_OK


# --------------------------------------------------------------------------- plot


def _count_restarts(lrs: list[float]) -> int:
    return sum(1 for i, lr in enumerate(lrs) if i == 0 or lr > lrs[i - 1])


def _write_tidy_lr(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,group,lr\n")
        for r in rows:
            for g, lr in enumerate((r.lr_g0, r.lr_g1, r.lr_g2)):
                fh.write(f"{r.step},{g},{lr!r}\n")


def cmd_plot(cfg: cfgmod.RunConfig, args) -> int:
    from .trainer import read_loss_csv

    out = cfg.output_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    if args.schedule:
        try:
            with open(args.schedule, encoding="utf-8") as fh:
                rows = read_schedule_csv(fh)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"bad schedule CSV {args.schedule}: {exc}") from None
        if not rows:
            raise InputError(f"schedule CSV {args.schedule} has no rows")
    else:
        n = args.steps_per_epoch
        if n is None:
            count = _train_count(cfg)
            if count is None:
                raise InputError("need --schedule, --steps-per-epoch or a readable train CSV")
            plan = cfg.train.plan(count)
        else:
            plan = cfg.train.plan(n * cfg.train.batch_size)
        rows = emit_schedule_table(plan)
    written = []
    n_phases = max(r.phase for r in rows) + 1
    for phase in range(n_phases):
        phase_rows = [r for r in rows if r.phase == phase]
        path = out / f"lr_phase{phase + 1}.csv"
        _write_tidy_lr(phase_rows, path)
        written.append(path)
    print(f"learning-rate restarts (top group): {_count_restarts([r.lr_g2 for r in rows])}")
    for g in range(N_GROUPS):
        print(f"max lr group {g}: {max((r.lr_g0, r.lr_g1, r.lr_g2)[g] for r in rows):.6g}")
    history = None
    if args.loss:
        try:
            with open(args.loss, encoding="utf-8") as fh:
                history = read_loss_csv(fh)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"bad loss CSV {args.loss}: {exc}") from None
        if not history:
            raise InputError(f"loss CSV {args.loss} has no rows")
        path = out / "loss.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for r in history:
                fh.write(f"{r.step},{r.loss!r}\n")
        written.append(path)
    if args.render:
        _render(rows, history, n_phases, out)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def _render(rows, history, n_phases, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for phase in range(n_phases):
        phase_rows = [r for r in rows if r.phase == phase]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        steps = [r.step for r in phase_rows]
        for g in range(N_GROUPS):
            ax.plot(steps, [(r.lr_g0, r.lr_g1, r.lr_g2)[g] for r in phase_rows], label=f"group {g}")
        ax.set_xlabel("step")
        ax.set_ylabel("learning rate")
        ax.set_title(f"phase {phase + 1}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"lr_phase{phase + 1}.png", dpi=120)
        plt.close(fig)
    if history:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot([r.step for r in history], [r.loss for r in history])
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        fig.tight_layout()
        fig.savefig(out / "loss.png", dpi=120)
        plt.close(fig)


# --------------------------------------------------------------------------- helpers


def cmd_toy_data(cfg: cfgmod.RunConfig, args) -> int:
    from .toydata import write_toy_config, write_toy_dataset

    csvs = write_toy_dataset(args.directory)
    path = write_toy_config(args.directory)
    for split, p in csvs.items():
        print(f"{split}: {p}")
    print(f"config: {path}")
    return EXIT_OK


def cmd_show_config(cfg: cfgmod.RunConfig, args) -> int:
    sys.stdout.write(cfgmod.dump_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dermclf", description="Dermoscopy image classifier toolkit")
    parser.add_argument("--config", help="TOML run configuration (defaults reproduce the published recipe)")
    parser.add_argument("--seed", type=int, help="override the top-level seed")
    parser.add_argument("--output", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and validate ground-truth manifests")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run the two-phase training recipe")
    p.add_argument("--dry-run", action="store_true", help="print the schedule plan and exit")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--tta", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="emit loss and learning-rate curve data")
    p.add_argument("--loss", help="loss CSV written by train")
    p.add_argument("--schedule", help="schedule CSV written by train (default: computed from the config)")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--render", action="store_true", help="also render PNGs with matplotlib")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("toy-data", help="write a small synthetic fixture and matching config")
    p.add_argument("directory")
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("show-config", help="print the normalized configuration")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config).with_overrides(args.seed, args.output)
        return args.func(cfg, args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DermclfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
