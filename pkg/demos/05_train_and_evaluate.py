"""A complete desk-scale experiment in about a minute of CPU time.

Five training slices from a 16-slice synthetic volume, a width-reduced
encoder/decoder, a short schedule, then the reassembly test protocol on
held-out slices: non-overlapping tiles -> predicted masks -> per-class IOU
-> per-image mIOU -> test-set mmIOU.
"""

import time
from pathlib import Path

import numpy as np

from seistile.data import (
    SplitConfig,
    SynthConfig,
    TileConfig,
    default_test_slices,
    generate_synthetic_volume,
    preprocess_rescale,
    split_blocks,
    tile_volume,
)
from seistile.metrics import evaluate_testset, export_mask_pgm, report_to_csv
from seistile.network import build_model
from seistile.topology import preset, scale_widths
from seistile.train import OptimizerConfig, TrainConfig, restore_model, train

t0 = time.time()
out = Path("demo_output")
out.mkdir(exist_ok=True)

volume, masks = generate_synthetic_volume(
    SynthConfig(slices=16, height=160, width=240, num_classes=7, horizon_waviness=4.0,
                texture_seed=5)
)
volume = preprocess_rescale(volume)
split = split_blocks(16, SplitConfig(n_blocks=5, slice_limit=5,
                                     test_slices=default_test_slices(16, 3), seed=1))
tiles = tile_volume(volume, masks, split["train"], TileConfig(80, 120))
print(f"train slices {split['train']} -> {len(tiles)} tiles; "
      f"val {split['val']}; test {split['test']}")

spec = scale_widths(preset("danet-fcn2"), 0.2, name="danet-fcn2-w0.2")
model = build_model(spec, seed=0, dtype=np.float32, bn_momentum=0.9)
val_data = [(volume.slice(i), masks.slice(i)) for i in split["val"]]

best, _ = train(
    model, tiles, val_data,
    TrainConfig(batch_size=8, max_epochs=25, eval_every=5, seed=2,
                lr_schedule=((0, 0.1), (20, 0.01))),
    OptimizerConfig(),
    log_path=out / "train_log.csv",
    progress=lambda r: print(
        f"  epoch {r['epoch']:2d} loss {r['loss']:.4f}"
        + (f"  val mIOU {r['val_miou']:.4f}" if r["val_miou"] is not None else "")
    ),
)
print(f"best checkpoint: epoch {best.epoch}, validation mIOU {best.val_miou:.4f}")

final = restore_model(best)
report = evaluate_testset(final, volume, masks, split["test"], 80, 120)
print("\nper-image results:")
print(report_to_csv(report))

from seistile.metrics import predict_slice_mask

i = split["test"][0]
pred = predict_slice_mask(final, volume.slice(i), 80, 120)
export_mask_pgm(out / f"pred_{i:02d}.pgm", pred, masks.num_classes)
export_mask_pgm(out / f"gt_{i:02d}.pgm", masks.slice(i)[: pred.shape[0], : pred.shape[1]],
                masks.num_classes)
print(f"exported a predicted/ground-truth mask pair to {out}/  "
      f"[total {time.time() - t0:.0f} s]")
