"""The ``vitforge`` command line.

Subcommands: ``split``, ``train``, ``eval``, ``predict``, ``gen-synthetic``,
``report``. Every command is a pure function of its config and seed:
rerunning with identical inputs produces byte-identical outputs. Commands
never mutate the input dataset tree; outputs land in ``--out``.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
5 checkpoint error, 6 output directory locked, 1 anything else.

``VITFORGE_THREADS`` caps kernel-level (BLAS) parallelism; results do not
depend on its value. Evaluation and prediction use a checkpoint's
best-epoch weights when present.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import checkpoint as CK
from . import data as D
from . import imageio
from . import metrics as MT
from . import model as M
from . import svgplot
from . import train as TR
from .config import ConfigError, RunConfig
from .tensor import Tensor

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_CHECKPOINT = 5
EXIT_LOCKED = 6

CURVES_FILE = "curves.csv"
CHECKPOINT_FILE = "checkpoint.vitf"
REPORT_FILE = "report.txt"
CONFUSION_CSV = "confusion.csv"
CONFUSION_SVG = "confusion.svg"
LOCK_FILE = ".vitforge.lock"
IDX_FILES = ("train.idx", "val.idx", "test.idx")

CURVES_HEADER = ("epoch,train_loss,train_acc,val_loss,val_acc,"
                 "val_precision_macro,val_recall_macro")


class LockError(RuntimeError):
    pass


class _OutputLock:
    """One command per output directory, enforced with an exclusive file."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, LOCK_FILE)

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _limit_threads() -> None:
    value = os.environ.get("VITFORGE_THREADS")
    if not value:
        return
    try:
        n = max(1, int(value))
    except ValueError:
        raise ConfigError(f"VITFORGE_THREADS must be an integer, got {value!r}")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _collect_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "out", None):
        overrides["out.dir"] = args.out
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _load_run_config(args) -> RunConfig:
    overrides = _collect_overrides(args)
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config, overrides=overrides)
    return RunConfig.from_text("", source="<defaults>", overrides=overrides)


def _synthetic_dataset(cfg: RunConfig) -> D.Dataset:
    return D.gen_synthetic(
        cfg.synthetic_per_class, k=cfg.synthetic_classes,
        size=cfg.vit.image_size, seed=cfg.seed,
    )


def _relative_path(img: D.LabeledImage, root: str) -> str:
    return os.path.relpath(img.source_path, root)


def _write_index_files(out_dir: str, root: str, splits, names=IDX_FILES) -> None:
    for ds, fname in zip(splits, names):
        lines = [_relative_path(img, root) for img in ds]
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))


def _read_index(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def _load_splits(cfg: RunConfig):
    """Produce (train, val, test): synthetic or on-disk, honoring existing
    index files so a prior ``split`` run is reused."""
    if not cfg.data_root:
        full = _synthetic_dataset(cfg)
        return D.split(full, cfg.split)
    root = cfg.data_root
    full = D.load_dataset(root, target_size=cfg.target_size)
    idx_paths = [os.path.join(cfg.out_dir, name) for name in IDX_FILES]
    if all(os.path.isfile(p) for p in idx_paths):
        by_rel = {_relative_path(img, root): i for i, img in enumerate(full)}
        subsets = []
        for path in idx_paths:
            try:
                subsets.append(full.subset([by_rel[rel] for rel in _read_index(path)]))
            except KeyError as exc:
                raise D.DataError(f"{path} lists unknown file {exc}") from None
        return tuple(subsets)
    return D.split(full, cfg.split)


def _records_to_csv(records) -> str:
    lines = [CURVES_HEADER]
    for r in records:
        lines.append(
            f"{r.epoch},{r.train_loss!r},{r.train_acc!r},{r.val_loss!r},"
            f"{r.val_acc!r},{r.val_precision_macro!r},{r.val_recall_macro!r}"
        )
    return "\n".join(lines) + "\n"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    cfg = _load_run_config(args)
    root = args.data_root or cfg.data_root
    if not root:
        raise ConfigError("split needs a dataset root (positional or data.root)")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with _OutputLock(cfg.out_dir):
        full = D.load_dataset(root, target_size=cfg.target_size)
        splits = D.split(full, cfg.split)
        _write_index_files(cfg.out_dir, root, splits)
    for ds, name in zip(splits, IDX_FILES):
        print(f"{name}: {len(ds)} samples")
    return EXIT_OK


def cmd_train(args) -> int:
    resume = None
    opt_state = None
    if args.resume:
        if not args.checkpoint:
            raise ConfigError("--resume needs --checkpoint")
        prior = CK.load_state(args.checkpoint)
        # the stored config governs a resumed run; --set/--out may extend it
        # (e.g. raising train.max_epochs), but the seed must stay untouched
        cfg = RunConfig.from_text(
            prior.run_config.to_text(), source=args.checkpoint,
            overrides=_collect_overrides(args),
        )
        params = prior.params
        opt_state = prior.optimizer_state()
        resume = TR.ResumeState(
            start_epoch=int(prior.meta.get("meta.completed_epochs", "0")) + 1,
            best_epoch=int(prior.meta.get("meta.best_epoch", "0")),
            best_value=float(prior.meta.get("meta.best_value", "inf")),
            best_params=prior.best_params,
        )
    else:
        cfg = _load_run_config(args)
        params = M.init_params(cfg.vit, np.random.default_rng(cfg.seed))
    if opt_state is None:
        opt_state = TR.OptimizerState(params)

    os.makedirs(cfg.out_dir, exist_ok=True)
    with _OutputLock(cfg.out_dir):
        train_ds, val_ds, test_ds = _load_splits(cfg)

        def progress(record):
            print(
                f"epoch {record.epoch:3d}  train_loss {record.train_loss:.4f}  "
                f"train_acc {record.train_acc:.4f}  val_loss {record.val_loss:.4f}  "
                f"val_acc {record.val_acc:.4f}",
                flush=True,
            )

        try:
            best, records, stop_reason = TR.train(
                params, cfg.vit, cfg.train, train_ds, val_ds,
                augment_spec=cfg.augment_spec(), callback=progress,
                optimizer_state=opt_state, resume=resume,
            )
        except TR.DivergenceError as exc:
            if exc.last_good_params is not None:
                rescue = os.path.join(cfg.out_dir, "last_good.vitf")
                CK.save_state(rescue, CK.TrainingState(
                    run_config=cfg, params=exc.last_good_params,
                    meta={"meta.class_names": ",".join(train_ds.class_map.names)},
                ))
                raise TR.DivergenceError(
                    f"{exc} (last good weights saved to {rescue})"
                ) from None
            raise
        _write_text(os.path.join(cfg.out_dir, CURVES_FILE), _records_to_csv(records))

        # best monitored value over the whole run, including a resumed past
        minimize = cfg.train.early_stop_metric == "val_loss"
        candidates = [
            (r.val_loss if minimize else r.val_acc, r.epoch) for r in records
        ]
        if resume is not None and math.isfinite(resume.best_value):
            candidates.append((resume.best_value, resume.best_epoch))
        if candidates:
            best_value, best_epoch = (min if minimize else max)(candidates)
        else:
            best_value, best_epoch = math.inf, 0
        completed = records[-1].epoch if records else (
            resume.start_epoch - 1 if resume else 0
        )
        state = CK.TrainingState(
            run_config=cfg,
            params=params,
            opt_m=opt_state.m,
            opt_v=opt_state.v,
            best_params=best,
            meta={
                "meta.best_epoch": str(best_epoch),
                "meta.best_value": repr(float(best_value)),
                "meta.class_names": ",".join(train_ds.class_map.names),
                "meta.completed_epochs": str(completed),
                "meta.opt_step": str(opt_state.t),
                "meta.stop_reason": stop_reason,
            },
        )
        ckpt_path = os.path.join(cfg.out_dir, CHECKPOINT_FILE)
        CK.save_state(ckpt_path, state)

        report_ds = test_ds if len(test_ds) else val_ds
        _, cm = TR.evaluate(best, report_ds, cfg.vit, cfg.train.batch_size)
        rep = MT.report(cm, "vit")
        _write_text(os.path.join(cfg.out_dir, REPORT_FILE), rep.to_text())
    print(
        f"done: {stop_reason} after {completed} epochs, "
        f"best {cfg.train.early_stop_metric} {best_value:.6f} at epoch {best_epoch}; "
        f"test accuracy {rep.accuracy:.4f}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    state = CK.load_state(args.checkpoint)
    cfg = state.run_config
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with _OutputLock(out_dir):
        dataset = _eval_dataset(args, state)
        params = state.best_params or state.params
        loss, cm = TR.evaluate(params, dataset, cfg.vit, cfg.train.batch_size)
        rep = MT.report(cm, "vit")
        _write_text(os.path.join(out_dir, CONFUSION_CSV), cm.to_csv_text())
        _write_text(os.path.join(out_dir, REPORT_FILE), rep.to_text())
        _write_text(os.path.join(out_dir, CONFUSION_SVG),
                    svgplot.confusion_heatmap(cm))
    print(f"loss {loss:.4f}  accuracy {rep.accuracy:.4f}  ({len(dataset)} samples)")
    return EXIT_OK


def _eval_dataset(args, state: CK.TrainingState) -> D.Dataset:
    cfg = state.run_config
    expected_names = state.meta.get("meta.class_names", "").split(",") \
        if state.meta.get("meta.class_names") else None
    if args.data_root:
        dataset = D.load_dataset(args.data_root, target_size=cfg.target_size)
        if args.index:
            by_rel = {
                _relative_path(img, args.data_root): i
                for i, img in enumerate(dataset)
            }
            try:
                dataset = dataset.subset(
                    [by_rel[rel] for rel in _read_index(args.index)]
                )
            except KeyError as exc:
                raise D.DataError(f"{args.index} lists unknown file {exc}") from None
    else:
        _, _, dataset = _load_splits(cfg)
    if len(dataset.class_map) != cfg.vit.num_classes:
        raise D.DataError(
            f"dataset has {len(dataset.class_map)} classes but the checkpoint "
            f"was trained for {cfg.vit.num_classes}"
        )
    if expected_names and dataset.class_map.names != expected_names:
        raise D.DataError(
            f"dataset classes {dataset.class_map.names} do not match the "
            f"checkpoint's {expected_names}"
        )
    h, w, c = cfg.vit.image_size
    sample = dataset[0].pixels
    if sample.shape != (h, w, c):
        raise D.DataError(
            f"dataset images shaped {sample.shape}, checkpoint expects {(h, w, c)}"
        )
    return dataset


def cmd_predict(args) -> int:
    state = CK.load_state(args.checkpoint)
    cfg = state.run_config
    params = state.best_params or state.params
    h, w, c = cfg.vit.image_size
    raw = imageio.read_image(args.image)
    pixels = raw.astype(np.float32)
    if pixels.shape[2] != c:
        if c == 3 and pixels.shape[2] == 1:
            pixels = np.repeat(pixels, 3, axis=2)
        else:
            raise D.DataError(
                f"image has {pixels.shape[2]} channels, model expects {c}"
            )
    if pixels.shape[:2] != (h, w):
        print(
            f"warning: resizing {pixels.shape[1]}x{pixels.shape[0]} image "
            f"to {w}x{h}",
            file=sys.stderr,
        )
        pixels = D.resize_bilinear(pixels, h, w)
    pixels = np.clip(pixels / 255.0, 0.0, 1.0).astype(np.float32)
    logits = M.forward(Tensor(pixels[None]), params, cfg.vit, training=False)
    z = logits.data[0] - logits.data[0].max()
    probs = np.exp(z) / np.exp(z).sum()
    names = state.meta.get("meta.class_names", "")
    names = names.split(",") if names else [f"class{i}" for i in range(cfg.vit.num_classes)]
    winner = int(probs.argmax())
    print(names[winner])
    for name, p in zip(names, probs):
        print(f"{name}\t{p:.6f}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    size = tuple(int(v) for v in args.size.split(","))
    if len(size) != 3:
        raise ConfigError(f"--size expects H,W,C, got {args.size!r}")
    ds = D.gen_synthetic(args.per_class, k=args.classes, size=size, seed=args.seed or 0)
    D.write_dataset(ds, args.out)
    print(f"wrote {len(ds)} images over {args.classes} classes to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            reports.append(MT.Report.from_text(fh.read()))
    table = MT.compare(reports)
    text = table.to_text()
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        _write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitforge",
        description="From-scratch Vision Transformer training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if checkpoint:
            p.add_argument("--checkpoint", help="VITF checkpoint path")

    p = sub.add_parser("split", help="write train/val/test index files")
    p.add_argument("data_root", nargs="?", help="dataset tree root")
    common(p)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train a model and emit run artifacts")
    common(p, checkpoint=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint's stored state")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("data_root", nargs="?",
                   help="dataset tree (defaults to the run's own test split)")
    p.add_argument("--index", help="index file restricting the dataset")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("image", help="image file")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset tree")
    p.add_argument("--out", required=True, help="destination directory")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", default="72,72,3", help="H,W,C")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("report", help="compare serialized reports side by side")
    p.add_argument("reports", nargs="+", help="report.txt files")
    p.add_argument("--out", help="write the comparison table here")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _limit_threads()
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, imageio.DecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MT.MetricsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except TR.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CK.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except LockError as exc:
        print(f"locked: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
