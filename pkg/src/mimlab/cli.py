from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import Cifar10Binary, Normalization, SyntheticDataset, channel_stats
from .gradcheck import FLAG_SETTINGS, check_pipeline, check_primitives
from .harness import DatasetSpec, FinetuneConfig, ProbeConfig, SweepPlan, TeacherSpec, finetune, linear_probe, run_sweep
from .loss import LossKind
from .masking import sample_mask, target_mask_count
from .patching import PatchGrid
from .rng import stream
from .teacher import TargetCache, export_targets, load_teacher, pseudo_vit
from .train import TrainConfig, load_checkpoint, pretrain, student_view, view_seed

GRADCHECK_TOL = 1e-3


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _train_config(args, conf: dict) -> TrainConfig:
    fields = dict(conf.get("train", {}))
    if args.seed is not None:
        fields["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        fields["epochs"] = args.epochs
    return TrainConfig.from_dict(fields)


def _dataset(conf: dict):
    return DatasetSpec(**conf.get("dataset", {})).build()


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain(args) -> int:
    conf = _load_config(args.config)
    cfg = _train_config(args, conf)
    teacher = TeacherSpec(**conf.get("teacher", {})).build(cfg.patch_size)
    cache = TargetCache.load(args.targets) if args.targets else None
    result = pretrain(cfg, _dataset(conf), teacher, out_dir=_out_dir(args), resume=args.resume, cache=cache)
    print(f"final loss {result.final_loss:.6f}; checkpoint {result.checkpoint}")
    return 0


def _checkpoint_eval(args, evaluate) -> int:
    conf = _load_config(args.config)
    bundle, _, meta = load_checkpoint(args.checkpoint)
    norm = Normalization(tuple(meta["normalization"]["mean"]), tuple(meta["normalization"]["std"]))
    acc = evaluate(bundle, _dataset(conf), conf, norm)
    out = _out_dir(args)
    name = args.command
    (out / f"{name}.json").write_text(json.dumps({"checkpoint": str(args.checkpoint), "top1": acc}, indent=2))
    print(f"{name} top-1 {acc:.4f}")
    return 0


def cmd_probe(args) -> int:
    def evaluate(bundle, ds, conf, norm):
        fields = dict(conf.get("probe", {}))
        if args.seed is not None:
            fields["seed"] = args.seed
        return linear_probe(bundle, ds, ProbeConfig(**fields), norm)

    return _checkpoint_eval(args, evaluate)


def cmd_finetune(args) -> int:
    def evaluate(bundle, ds, conf, norm):
        fields = dict(conf.get("finetune", {}))
        if args.seed is not None:
            fields["seed"] = args.seed
        return finetune(bundle, ds, FinetuneConfig(**fields), norm)

    return _checkpoint_eval(args, evaluate)


def cmd_sweep(args) -> int:
    conf = _load_config(args.config)
    plan = SweepPlan.from_dict(conf.get("sweep", {}))
    if args.seed is not None:
        plan = dataclasses.replace(plan, seeds=[args.seed])
    path = _out_dir(args) / "sweep.csv"
    rows = run_sweep(plan, path, parallel=args.parallel)
    print(f"{len(rows)} new rows -> {path}")
    return 0


def _dataset_arg(value: str, image_size: int):
    if value == "synthetic":
        return SyntheticDataset(512, image_size)
    if value.startswith("synthetic:"):
        return SyntheticDataset(int(value.split(":", 1)[1]), image_size)
    if value.startswith("cifar10:"):
        return Cifar10Binary(value.split(":", 1)[1].split(","))
    raise argparse.ArgumentTypeError(f"unrecognized dataset {value!r}")


def cmd_export_targets(args) -> int:
    conf = _load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    fields = {**conf.get("train", {}), "seed": seed, "augment_per_epoch": False}
    cfg = TrainConfig.from_dict(fields)
    ds = _dataset_arg(args.dataset, cfg.image_size) if args.dataset else _dataset(conf)
    spec = TeacherSpec(**conf.get("teacher", {}))
    if args.teacher is None:
        teacher = spec.build(cfg.patch_size)
    elif args.teacher.startswith("pseudo_vit"):
        preset = args.teacher.split(":", 1)[1] if ":" in args.teacher else spec.preset
        teacher = pseudo_vit(preset, cfg.patch_size, spec.seed)
    else:
        teacher = load_teacher(args.teacher)
    norm = cfg.normalization() or channel_stats(ds)
    path = export_targets(
        ds,
        teacher,
        args.out,
        view_seed(seed, 0),
        normalize=cfg.normalize_targets,
        view_fn=lambda i: student_view(ds, i, cfg, 0, norm),
    )
    print(f"wrote targets for {len(ds)} samples -> {path}")
    return 0


def cmd_mask_dump(args) -> int:
    grid = PatchGrid(args.grid, args.grid, 16)
    count = target_mask_count(grid.n, args.gamma)
    seed = args.seed if args.seed is not None else 0
    for i in range(args.count):
        mask = sample_mask(args.sampler, grid, count, stream(seed, "mask", 0, i))
        if i:
            print()
        print(mask.render())
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, err in check_primitives().items():
        worst = max(worst, err)
        print(f"primitive {name:<12} {err:.3e}")
    for kind in LossKind:
        for flags in FLAG_SETTINGS:
            err = check_pipeline(kind, flags, probes=args.probes)
            worst = max(worst, err)
            print(f"pipeline  {kind.value:<10} dv={flags.delta_v} dm={flags.delta_m} {err:.3e}")
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mimlab", description="Masked image modeling lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common])
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint archive to resume from")
    p.add_argument("--targets", help="target archive produced by export-targets")
    p.set_defaults(func=cmd_pretrain)

    for name, func in (("probe", cmd_probe), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-targets", parents=[common])
    p.add_argument("--dataset", help="synthetic[:N] or cifar10:<file>[,<file>...]")
    p.add_argument("--teacher", help="pseudo_vit[:preset] or a teacher archive path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_targets)

    p = sub.add_parser("mask-dump", parents=[common])
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--sampler", default="blockwise", choices=["random", "blockwise"])
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("gradcheck", parents=[common])
    p.add_argument("--probes", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
