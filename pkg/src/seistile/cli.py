"""Command-line front end.

Subcommands mirror the workflow stages: ``synth`` emits a synthetic volume,
``prepare`` turns a volume into tile sets, ``train`` fits a model, ``eval``
scores it with the reassembly protocol, ``count`` prints the analytic
resource table, ``export-masks`` writes predicted masks as PGM images, and
``config --defaults`` dumps the full default configuration.

Exit codes: 0 success, 1 configuration error, 2 data/format error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import topology as T
from .config import apply_overrides, config_digest, load_config, resolve_config
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    LabelError,
    ParseError,
    SeistileError,
    TopologyError,
)
from .metrics import evaluate_testset, export_mask_pgm, report_to_csv, report_to_json
from .network import build_model
from .train import (
    OptimizerConfig,
    TrainConfig,
    load_checkpoint,
    restore_model,
    train,
)

# seed derivation offsets: every stage stream is a fixed function of the
# single config seed
SEED_SYNTH, SEED_SPLIT, SEED_BUILD, SEED_SHUFFLE = 0, 1, 2, 3


def _resolved(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else resolve_config()
    cfg = apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out_dir", None):
        cfg["data"]["out_dir"] = args.out_dir
    return cfg


def _announce(cfg: dict) -> None:
    print(f"config sha256={config_digest(cfg)}", file=sys.stderr)


def _model_spec(cfg: dict) -> T.TopologySpec:
    m = cfg["model"]
    if m.get("dsl_path"):
        path = Path(m["dsl_path"])
        if not path.exists():
            raise ConfigError(f"model.dsl_path {path} does not exist")
        spec = T.parse_topology(path.read_text(), name=path.stem)
    else:
        spec = T.preset(m["preset"])
    scale = float(m.get("width_scale") or 1.0)
    if scale != 1.0:
        spec = T.scale_widths(spec, scale, name=f"{spec.name}-w{scale:g}")
    return spec


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["data"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_indices(cfg: dict, num_slices: int) -> dict:
    scfg = cfg["split"]
    if scfg["test_slices"] is not None:
        test = tuple(int(i) for i in scfg["test_slices"])
    else:
        test = D.default_test_slices(num_slices, int(scfg["test_count"]))
    split_cfg = D.SplitConfig(
        n_blocks=int(scfg["n_blocks"]),
        train_fraction=float(scfg["train_fraction"]),
        slice_limit=None if scfg["slice_limit"] is None else int(scfg["slice_limit"]),
        test_slices=test,
        seed=int(cfg["seed"]) + SEED_SPLIT,
    )
    return D.split_blocks(num_slices, split_cfg)


# ---------------------------------------------------------------- commands


def cmd_config(args) -> int:
    if not args.defaults:
        raise ConfigError("config: only --defaults is supported")
    print(json.dumps(resolve_config(), indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    cfg = _resolved(args)
    _announce(cfg)
    s = cfg["synth"]
    synth_cfg = D.SynthConfig(
        slices=int(s["slices"]), height=int(s["height"]), width=int(s["width"]),
        num_classes=int(s["num_classes"]),
        horizon_waviness=float(s["horizon_waviness"]),
        texture_seed=int(cfg["seed"]) + SEED_SYNTH,
    )
    volume, masks = D.generate_synthetic_volume(synth_cfg)
    vol_path, mask_path = Path(cfg["data"]["volume"]), Path(cfg["data"]["masks"])
    for p in (vol_path, mask_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    D.save_volume(vol_path, volume)
    D.save_masks(mask_path, masks)
    print(f"wrote {vol_path} ({volume.data.shape[0]} slices of "
          f"{volume.data.shape[1]}x{volume.data.shape[2]}) and {mask_path}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _resolved(args)
    _announce(cfg)
    volume = D.load_volume(cfg["data"]["volume"])
    masks = D.load_masks(cfg["data"]["masks"])
    if volume.data.shape != masks.data.shape:
        raise FormatError(f"volume {volume.data.shape} and masks {masks.data.shape} disagree")

    volume = D.preprocess_rescale(volume, float(cfg["data"]["clip_lo_pct"]),
                                  float(cfg["data"]["clip_hi_pct"]))
    if masks.num_classes == 8:
        masks = D.merge_classes(masks)
    elif masks.num_classes != 7:
        raise FormatError(f"expected 7- or 8-class masks, got {masks.num_classes}")

    split = _split_indices(cfg, volume.num_slices)
    tile_cfg = D.TileConfig(tile_h=int(cfg["tiles"]["tile_h"]),
                            tile_w=int(cfg["tiles"]["tile_w"]),
                            overlap_fraction=float(cfg["tiles"]["overlap_fraction"]))
    out = _out_dir(cfg)
    D.save_volume(out / "volume_proc.segv", volume)
    D.save_masks(out / "masks_merged.segv", masks)
    (out / "split.json").write_text(json.dumps(
        {**split, "config_digest": config_digest(cfg)}, indent=2, sort_keys=True))
    for name, indices in (("tiles_train", split["train"]), ("tiles_val", split["val"])):
        tiles = D.tile_volume(volume, masks, indices, tile_cfg)
        tiles.save(out / name)
        print(f"{name}: {len(tiles)} tiles from slices {indices}")
    return 0


def _load_prepared(cfg: dict):
    out = _out_dir(cfg)
    for required in ("volume_proc.segv", "masks_merged.segv", "split.json"):
        if not (out / required).exists():
            raise ConfigError(f"{out / required} missing; run `seistile prepare` first")
    volume = D.load_volume(out / "volume_proc.segv")
    masks = D.load_masks(out / "masks_merged.segv")
    split = json.loads((out / "split.json").read_text())
    return out, volume, masks, split


def cmd_train(args) -> int:
    cfg = _resolved(args)
    _announce(cfg)
    out, volume, masks, split = _load_prepared(cfg)
    tiles = D.TileSet.load(out / "tiles_train")
    if len(tiles) == 0:
        raise ConfigError("prepared training tile set is empty")

    spec = _model_spec(cfg)
    if spec.num_classes != masks.num_classes:
        raise ConfigError(f"model emits {spec.num_classes} classes but masks have {masks.num_classes}")
    model = build_model(spec, seed=int(cfg["seed"]) + SEED_BUILD, dtype=np.float32,
                        bn_eps=float(cfg["model"]["bn_eps"]),
                        bn_momentum=float(cfg["model"]["bn_momentum"]))

    tcfg = cfg["train"]
    train_cfg = TrainConfig(
        batch_size=int(tcfg["batch_size"]),
        max_epochs=int(tcfg["max_epochs"]),
        lr_schedule=tuple((int(e), float(lr)) for e, lr in tcfg["lr_schedule"]),
        eval_every=int(tcfg["eval_every"]),
        seed=int(cfg["seed"]) + SEED_SHUFFLE,
    )
    ocfg = cfg["optimizer"]
    opt_cfg = OptimizerConfig(decay=float(ocfg["decay"]), momentum=float(ocfg["momentum"]),
                              epsilon=float(ocfg["epsilon"]),
                              weight_decay=float(ocfg["weight_decay"]))
    val_data = [(volume.slice(i), masks.slice(i)) for i in split["val"]]

    def progress(row):
        val = "" if row["val_miou"] is None else f" val_miou={row['val_miou']:.4f}"
        print(f"epoch {row['epoch']:3d} loss={row['loss']:.4f}{val} lr={row['lr']:g}",
              file=sys.stderr)

    try:
        best, _ = train(model, tiles, val_data, train_cfg, opt_cfg,
                        log_path=out / "log.csv", checkpoint_path=out / "checkpoint.ckpt",
                        progress=progress)
    except DivergenceError as err:
        if err.checkpoint is not None:
            from .train import save_checkpoint

            save_checkpoint(err.checkpoint, out / "checkpoint.ckpt")
            print(f"diverged; last good checkpoint kept at {out / 'checkpoint.ckpt'}",
                  file=sys.stderr)
        raise
    print(f"best epoch {best.epoch} val_miou={best.val_miou:.4f} -> {out / 'checkpoint.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    _announce(cfg)
    out, volume, masks, split = _load_prepared(cfg)
    ckpt_path = args.checkpoint or (out / "checkpoint.ckpt")
    model = restore_model(load_checkpoint(ckpt_path))
    if not split["test"]:
        raise ConfigError("split has no test slices")
    report = evaluate_testset(model, volume, masks, split["test"],
                              int(cfg["eval"]["tile_h"]), int(cfg["eval"]["tile_w"]))
    report.extra["config_digest"] = config_digest(cfg)
    (out / "report.json").write_text(report_to_json(report))
    (out / "report.csv").write_text(report_to_csv(report))
    print(report_to_csv(report), end="")
    print(f"mmIOU {report.mmiou:.6f} over {len(report.images)} test slices", file=sys.stderr)
    return 0


def cmd_count(args) -> int:
    cfg = _resolved(args)
    _announce(cfg)
    if args.dsl:
        path = Path(args.dsl)
        if not path.exists():
            raise ConfigError(f"DSL file {path} does not exist")
        specs = [T.parse_topology(path.read_text(), name=path.stem)]
    elif args.preset:
        specs = [T.preset(args.preset)]
    else:
        specs = [T.preset(name) for name in T.preset_names()]

    ops_per_mac = args.ops_per_mac
    custom = None
    if args.input:
        try:
            h, w = (int(v) for v in args.input.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--input must look like 80x120, got {args.input!r}") from None
        custom = (h, w)

    header = ["name", "parameters", "ops_80x120", "ops_128x128", "ops_per_mac"]
    if custom:
        header.insert(4, f"ops_{custom[0]}x{custom[1]}")
    print(",".join(header))
    for spec in specs:
        row = [spec.name, str(T.count_parameters(spec)),
               str(T.count_operations(spec, 80, 120, ops_per_mac)),
               str(T.count_operations(spec, 128, 128, ops_per_mac))]
        if custom:
            row.append(str(T.count_operations(spec, custom[0], custom[1], ops_per_mac)))
        row.append(str(ops_per_mac))
        print(",".join(row))
    return 0


def cmd_export_masks(args) -> int:
    cfg = _resolved(args)
    _announce(cfg)
    out, volume, masks, split = _load_prepared(cfg)
    ckpt_path = args.checkpoint or (out / "checkpoint.ckpt")
    model = restore_model(load_checkpoint(ckpt_path))
    mask_dir = out / "masks"
    mask_dir.mkdir(exist_ok=True)
    from .metrics import predict_slice_mask

    indices = split["test"] or split["val"]
    for i in indices:
        pred = predict_slice_mask(model, volume.slice(i),
                                  int(cfg["eval"]["tile_h"]), int(cfg["eval"]["tile_w"]))
        export_mask_pgm(mask_dir / f"pred_{i:04d}.pgm", pred, masks.num_classes)
        hc, wc = pred.shape
        export_mask_pgm(mask_dir / f"gt_{i:04d}.pgm", masks.slice(i)[:hc, :wc], masks.num_classes)
    print(f"wrote {2 * len(indices)} PGM masks to {mask_dir}")
    return 0


# ------------------------------------------------------------------ plumbing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (defaults used when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. --set train.batch_size=8")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override data.out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seistile", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print configuration defaults")
    p.add_argument("--defaults", action="store_true")
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("synth", help="generate a synthetic volume + masks")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="rescale, merge, split, and tile a volume")
    _add_common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train a model on prepared tiles")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run the tile-reassembly test protocol")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <out_dir>/checkpoint.ckpt)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("count", help="print parameter/operation counts as CSV")
    _add_common(p)
    p.add_argument("--preset", help="preset name (default: all presets)")
    p.add_argument("--dsl", help="topology DSL file instead of a preset")
    p.add_argument("--input", help="extra HxW column, e.g. 80x120")
    p.add_argument("--ops-per-mac", type=int, default=T.TABLE_OPS_PER_MAC, choices=(1, 2),
                   help="operation counting mode (default: %(default)s, the published-table calibration)")
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("export-masks", help="write predicted masks as PGM images")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <out_dir>/checkpoint.ckpt)")
    p.set_defaults(fn=cmd_export_masks)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError, TopologyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: missing file: {err}", file=sys.stderr)
        return 2
    except (FormatError, LabelError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DivergenceError, ContractError, SeistileError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
