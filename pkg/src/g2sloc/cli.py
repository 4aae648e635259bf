"""Command line: ``g2sloc {gen,train-rot,train-trans,eval,viz}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Every command
writes into a temporary sibling first and renames on success, so a failed
run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .evaluation import EvalConfig, evaluate_dataset, write_outputs
from .geometry import GroundCameraRig
from .metric_learning import train_translation_stage
from .simworld import DatasetDir, DatasetError, SyntheticDataset, export_dataset, generate_world

log = logging.getLogger("g2sloc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class CommandError(RuntimeError):
    pass


@contextmanager
def staged_dir(target):
    """Yield a temp directory next to ``target``; it becomes ``target`` only on success."""
    target = Path(target)
    if not target.parent.is_dir():
        raise CommandError(f"parent directory {target.parent} does not exist")
    if target.exists() and any(target.iterdir()):
        raise CommandError(f"{target} already exists and is not empty")
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
        if target.exists():
            target.rmdir()
        tmp.rename(target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


@contextmanager
def staged_file(target):
    target = Path(target)
    if not target.parent.is_dir():
        raise CommandError(f"parent directory {target.parent} does not exist")
    tmp = target.with_name(f".{target.name}.partial")
    try:
        yield tmp
        tmp.replace(target)
    finally:
        if tmp.exists():
            tmp.unlink()


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _dataset(path) -> DatasetDir:
    if path is None:
        raise ConfigError("no data directory given (argument or paths.data_dir)")
    ds = DatasetDir(path)
    if len(ds) == 0:
        raise DatasetError(f"{path} holds no samples")
    return ds


def _rig(cfg: RunConfig, ds: DatasetDir) -> GroundCameraRig:
    return ds.rig or cfg.rig.build()


def _pick(cli_value, cfg_value):
    return cli_value if cli_value is not None else cfg_value


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, args) -> None:
    out = _pick(args.out, cfg.paths.out)
    if out is None:
        raise ConfigError("gen needs an output directory")
    w = cfg.world
    world = generate_world(cfg.seed, w.size_px, w.gamma_w, w.style)
    ds = SyntheticDataset(world, cfg.rig.build(), cfg.noise_model(), w.n_samples, w.sat_size_px, w.sat_gamma,
                          cfg.noise.label_noise_m)
    with staged_dir(out) as tmp:
        export_dataset(ds, tmp / "data", ds.meta())
        for p in (tmp / "data").iterdir():
            p.rename(tmp / p.name)
        (tmp / "data").rmdir()
    log.info("wrote %d samples to %s", len(ds), out)


def cmd_train_rot(cfg: RunConfig, args) -> None:
    from .rotation import train_rotation_stage

    ds = _dataset(_pick(args.data_dir, cfg.paths.data_dir))
    if not ds.has_satellite_images():
        raise DatasetError(f"{ds.path}: rotation training needs a satellite image in every record")
    out = _pick(args.out, cfg.paths.rot_ckpt)
    if out is None:
        raise ConfigError("train-rot needs an output checkpoint path")
    rig = _rig(cfg, ds)
    _seed_everything(cfg.seed)
    bundle = cfg.build_bundle()
    rcfg = cfg.rotation_config(rig)
    resume = None
    if args.resume:
        resume = bundle.load_stage(args.resume, "rotation")
    with staged_file(out) as tmp:
        train_rotation_stage(ds, bundle, rcfg, resume=resume, log_csv=args.log, checkpoint=tmp)


def _load_rotation(cfg: RunConfig, bundle, path):
    if path is None:
        raise ConfigError("a rotation checkpoint is required")
    if not Path(path).is_file():
        raise CommandError(f"rotation checkpoint {path} not found")
    bundle.load_stage(path, "rotation")
    bundle.freeze("rotation")


def _load_translation(bundle, path):
    if path is None:
        raise ConfigError("a translation checkpoint is required")
    if not Path(path).is_file():
        raise CommandError(f"translation checkpoint {path} not found")
    bundle.load_stage(path, "translation")
    bundle.freeze("translation")


def cmd_train_trans(cfg: RunConfig, args) -> None:
    ds = _dataset(_pick(args.data_dir, cfg.paths.data_dir))
    out = _pick(args.out, cfg.paths.trans_ckpt)
    if out is None:
        raise ConfigError("train-trans needs an output checkpoint path")
    tcfg = cfg.translation_config()
    if tcfg.lam == 1 and any(ds[i].label_pose is None for i in range(len(ds))):
        raise ConfigError("translation_train.lam = 1 needs label poses in every record")
    rig = _rig(cfg, ds)
    _seed_everything(cfg.seed)
    bundle = cfg.build_bundle()
    _load_rotation(cfg, bundle, _pick(args.rot_ckpt, cfg.paths.rot_ckpt))
    o = Path(out)
    per_epoch = str(o.with_name(f"{o.stem}_epoch{{epoch:03d}}{o.suffix}"))
    with staged_file(out) as tmp:
        train_translation_stage(ds, bundle, tcfg, rig, rot_config=cfg.rotation_config(rig), log_csv=args.log,
                                checkpoint=tmp, epoch_checkpoint=per_epoch)


def _eval_config(cfg: RunConfig, mode) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(mode=mode or e.mode, thresholds_m=tuple(e.thresholds_m), thresholds_deg=tuple(e.thresholds_deg),
                      kernel_m=cfg.translation_train.kernel_m, search_m=cfg.noise.max_translation_m, seed=cfg.seed)


def _model_bundle(cfg: RunConfig, args):
    bundle = cfg.build_bundle()
    _load_rotation(cfg, bundle, _pick(args.rot_ckpt, cfg.paths.rot_ckpt))
    _load_translation(bundle, _pick(args.trans_ckpt, cfg.paths.trans_ckpt))
    return bundle.eval()


def cmd_eval(cfg: RunConfig, args) -> None:
    from .registration import LocalizeConfig

    ds = _dataset(_pick(args.data_dir, cfg.paths.data_dir))
    out = _pick(args.out, cfg.paths.out)
    if out is None:
        raise ConfigError("eval needs an output directory")
    ecfg = _eval_config(cfg, args.mode)
    rig = _rig(cfg, ds)
    bundle, loc = None, None
    if ecfg.mode == "model":
        bundle = _model_bundle(cfg, args)
        loc = LocalizeConfig(kernel_m=ecfg.kernel_m, rotation=cfg.rotation_config(rig))
    with staged_dir(out) as tmp:
        report, records, preds = evaluate_dataset(bundle, ds, ecfg, rig, loc)
        write_outputs(tmp, report, records, preds)
    if report is not None:
        log.info("recall@%s m (euclidean) %s; mean %.2f m", report.thresholds_m, report.recall_m["euclidean"],
                 report.mean_m)


def cmd_viz(cfg: RunConfig, args) -> None:
    from .viz import render_sample_figures

    ds = _dataset(_pick(args.data_dir, cfg.paths.data_dir))
    out = _pick(args.out, cfg.paths.out)
    if out is None:
        raise ConfigError("viz needs an output directory")
    ids = [int(i) for i in ds.ids]
    if args.sample_id not in ids:
        raise CommandError(f"sample {args.sample_id} not in {ds.path}")
    sample = ds[ids.index(args.sample_id)]
    rig = _rig(cfg, ds)
    bundle = _model_bundle(cfg, args)
    with staged_dir(out) as tmp:
        render_sample_figures(sample, rig, bundle, cfg, tmp)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="g2sloc", description="Weakly supervised ground-to-satellite localization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    g = sub.add_parser("gen", help="render a synthetic dataset directory")
    common(g)
    g.add_argument("out", nargs="?", help="output dataset directory (must not exist yet)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("train-rot", help="train the rotation stage on satellite images")
    common(r)
    r.add_argument("data_dir", nargs="?")
    r.add_argument("--out", help="rotation checkpoint to write")
    r.add_argument("--resume", help="continue from this rotation checkpoint")
    r.add_argument("--log", help="CSV loss log")
    r.set_defaults(func=cmd_train_rot)

    t = sub.add_parser("train-trans", help="train the translation stage with the rotation stage frozen")
    common(t)
    t.add_argument("data_dir", nargs="?")
    t.add_argument("--rot-ckpt")
    t.add_argument("--out", help="translation checkpoint to write")
    t.add_argument("--log", help="CSV loss log")
    t.set_defaults(func=cmd_train_trans)

    e = sub.add_parser("eval", help="localize every sample and write report.json + per_sample.csv")
    common(e)
    e.add_argument("data_dir", nargs="?")
    e.add_argument("--rot-ckpt")
    e.add_argument("--trans-ckpt")
    e.add_argument("--mode", choices=["model", "oracle", "prior", "random"])
    e.add_argument("--out", help="report directory (must not exist yet)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="write ground/satellite/confidence/similarity/overlay PNGs for one sample")
    common(v)
    v.add_argument("data_dir", nargs="?")
    v.add_argument("--sample-id", type=int, required=True)
    v.add_argument("--rot-ckpt")
    v.add_argument("--trans-ckpt")
    v.add_argument("--out", help="figure directory (must not exist yet)")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("G2SLOC_THREADS", "1")))
    try:
        cfg = load_config(args.config, args.overrides)
        args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CommandError, DatasetError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
