"""From a raw volume to training tiles.

Generates a synthetic layered-texture volume (a desk-scale stand-in for a
real annotated survey), rescales intensities to [0, 255] with percentile
clipping, merges the 8 raw classes to 7, splits slices into blockwise
train/validation plus held-out test slices, and cuts overlapping tiles.
Writes PGM previews you can open in any image viewer.
"""

from pathlib import Path

import numpy as np

from seistile.data import (
    SplitConfig,
    SynthConfig,
    TileConfig,
    default_test_slices,
    generate_synthetic_volume,
    merge_classes,
    preprocess_rescale,
    split_blocks,
    tile_volume,
    write_pgm,
)
from seistile.metrics import export_mask_pgm

out = Path("demo_output")
out.mkdir(exist_ok=True)

volume, masks = generate_synthetic_volume(
    SynthConfig(slices=12, height=160, width=240, num_classes=8, horizon_waviness=4.0,
                texture_seed=0)
)
print("raw volume:", volume.data.shape, f"range [{volume.data.min():.0f}, {volume.data.max():.0f}]")

volume = preprocess_rescale(volume, clip_lo_pct=1.0, clip_hi_pct=99.0)
print("rescaled:  ", f"range [{volume.data.min():.1f}, {volume.data.max():.1f}]")

masks = merge_classes(masks)
print("classes after merge:", masks.num_classes, "| values:", np.unique(masks.data))

test = default_test_slices(volume.num_slices, 3)
split = split_blocks(volume.num_slices, SplitConfig(n_blocks=3, slice_limit=3,
                                                    test_slices=test, seed=0))
print("split:", split)

tiles = tile_volume(volume, masks, split["train"], TileConfig(tile_h=80, tile_w=120))
print(f"{len(tiles)} training tiles of {tiles.tile_h}x{tiles.tile_w} "
      f"(overlap 0.5 -> strides {40}x{60})")
print("first provenance rows (slice, row, col):")
print(tiles.provenance[:5])

write_pgm(out / "slice0.pgm", volume.slice(0))
export_mask_pgm(out / "slice0_mask.pgm", masks.slice(0), masks.num_classes)
write_pgm(out / "tile0.pgm", tiles.images[0])
export_mask_pgm(out / "tile0_mask.pgm", tiles.masks[0], masks.num_classes)
print(f"\nwrote previews to {out}/: slice0.pgm, slice0_mask.pgm, tile0.pgm, tile0_mask.pgm")
