"""Volume ingestion, preprocessing, splitting, tiling, and synthesis.

Volumes are stacks of 2-D slices: data[s, h, w] with s the slice index,
h the depth row and w the trace column. Binary storage uses the SEGV
container (see save_segv/load_segv); single slices round-trip through
binary PGM for eyeballing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, CorruptionError, FormatError

__all__ = [
    "Volume",
    "MaskVolume",
    "SplitConfig",
    "TileConfig",
    "TileSet",
    "SynthConfig",
    "save_segv",
    "load_segv",
    "load_volume",
    "load_masks",
    "save_volume",
    "save_masks",
    "write_pgm",
    "read_pgm",
    "preprocess_rescale",
    "split_blocks",
    "default_test_slices",
    "tile_slice",
    "tile_volume",
    "merge_classes",
    "generate_synthetic_volume",
]

SEGV_MAGIC = b"SEGV1\n"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


@dataclass
class Volume:
    data: np.ndarray  # f32, S x H x W
    meta: dict = field(default_factory=dict)

    @property
    def num_slices(self) -> int:
        return self.data.shape[0]

    def slice(self, i: int) -> np.ndarray:
        return self.data[i]


@dataclass
class MaskVolume:
    data: np.ndarray  # u8, S x H x W
    num_classes: int

    @property
    def num_slices(self) -> int:
        return self.data.shape[0]

    def slice(self, i: int) -> np.ndarray:
        return self.data[i]


# ----------------------------------------------------------------- SEGV I/O


def save_segv(path, array: np.ndarray, meta: dict | None = None) -> None:
    """Write an array in the SEGV container.

    Layout: magic "SEGV1\\n", u8 dtype code (0=f32, 1=u8), u8 rank,
    rank x u32 little-endian extents, then the row-major little-endian
    payload. ``meta`` lands in an optional <file>.json sidecar.
    """
    path = Path(path)
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise ContractError(f"SEGV stores f32 or u8, not {arr.dtype}")
    header = SEGV_MAGIC + bytes([code, arr.ndim])
    header += np.array(arr.shape, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_segv(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(SEGV_MAGIC)] != SEGV_MAGIC:
        raise FormatError(f"{path}: bad magic, not a SEGV file")
    if len(blob) < len(SEGV_MAGIC) + 2:
        raise CorruptionError(f"{path}: truncated header")
    code, rank = blob[len(SEGV_MAGIC)], blob[len(SEGV_MAGIC) + 1]
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    offset = len(SEGV_MAGIC) + 2
    if len(blob) < offset + 4 * rank:
        raise CorruptionError(f"{path}: truncated extents")
    extents = np.frombuffer(blob, dtype="<u4", count=rank, offset=offset)
    shape = tuple(int(e) for e in extents)
    offset += 4 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return np.array(data), meta


def save_volume(path, volume: Volume) -> None:
    save_segv(path, volume.data.astype(np.float32, copy=False), volume.meta or None)


def load_volume(path) -> Volume:
    data, meta = load_segv(path)
    if data.dtype != np.float32 or data.ndim != 3:
        raise FormatError(f"{path}: expected a rank-3 f32 volume, got {data.dtype} rank {data.ndim}")
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: volume contains non-finite values")
    return Volume(data=data, meta=meta)


def save_masks(path, masks: MaskVolume) -> None:
    save_segv(path, masks.data.astype(np.uint8, copy=False), {"num_classes": masks.num_classes})


def load_masks(path) -> MaskVolume:
    data, meta = load_segv(path)
    if data.dtype != np.uint8 or data.ndim != 3:
        raise FormatError(f"{path}: expected a rank-3 u8 mask volume, got {data.dtype} rank {data.ndim}")
    num_classes = int(meta.get("num_classes", int(data.max()) + 1 if data.size else 1))
    if data.size and data.max() >= num_classes:
        raise FormatError(f"{path}: mask value {int(data.max())} >= num_classes {num_classes}")
    return MaskVolume(data=data, num_classes=num_classes)


# ------------------------------------------------------------------ PGM I/O


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) export of a single 2-D slice."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"PGM export needs a 2-D image, got rank {img.ndim}")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos : pos + w * h]
    if len(payload) != w * h:
        raise CorruptionError(f"{path}: payload is {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# ------------------------------------------------------------- preprocessing


def preprocess_rescale(volume: Volume, clip_lo_pct: float = 1.0, clip_hi_pct: float = 99.0) -> Volume:
    """Clip to whole-volume percentiles, then map the clip bounds to [0, 255].

    A constant volume maps to all zeros (with a warning) since the clip
    range collapses.
    """
    if not 0.0 <= clip_lo_pct < clip_hi_pct <= 100.0:
        raise ConfigError(f"bad clip percentiles ({clip_lo_pct}, {clip_hi_pct})")
    lo, hi = np.percentile(volume.data, [clip_lo_pct, clip_hi_pct])
    if hi <= lo:
        warnings.warn("volume intensity range collapsed; rescale maps everything to 0")
        out = np.zeros_like(volume.data, dtype=np.float32)
    else:
        clipped = np.clip(volume.data, lo, hi)
        out = ((clipped - lo) * (255.0 / (hi - lo))).astype(np.float32)
    meta = dict(volume.meta)
    meta["rescaled"] = {"clip_lo_pct": clip_lo_pct, "clip_hi_pct": clip_hi_pct,
                        "lo": float(lo), "hi": float(hi)}
    return Volume(data=out, meta=meta)


# ---------------------------------------------------------------- splitting


@dataclass
class SplitConfig:
    n_blocks: int = 10
    train_fraction: float = 0.7
    slice_limit: int | None = None  # cap on total training slices
    test_slices: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")


def default_test_slices(num_slices: int, count: int = 40) -> tuple[int, ...]:
    """Evenly spaced slice indices reserved for testing."""
    if count <= 0:
        return ()
    if count > num_slices:
        raise ConfigError(f"cannot reserve {count} test slices out of {num_slices}")
    idx = np.linspace(0, num_slices - 1, count)
    return tuple(sorted(set(int(round(i)) for i in idx)))


def split_blocks(num_slices: int, cfg: SplitConfig) -> dict[str, list[int]]:
    """Block-wise train/validation split after removing the test slices.

    The remaining slices are cut into n contiguous blocks (any remainder
    spread one-per-block from the front). Within each block the first
    floor(train_fraction * size) slices train and the rest validate; with
    ``slice_limit`` x set, floor(x/n) training slices are sampled uniformly
    per block using the config seed.
    """
    test = sorted(set(cfg.test_slices))
    for t in test:
        if not 0 <= t < num_slices:
            raise ConfigError(f"test slice {t} outside [0, {num_slices})")
    remaining = [i for i in range(num_slices) if i not in set(test)]
    if len(remaining) < cfg.n_blocks:
        raise ConfigError(f"{len(remaining)} slices cannot fill {cfg.n_blocks} blocks")

    base, extra = divmod(len(remaining), cfg.n_blocks)
    train: list[int] = []
    val: list[int] = []
    rng = np.random.default_rng(cfg.seed)
    start = 0
    for b in range(cfg.n_blocks):
        size = base + (1 if b < extra else 0)
        block = remaining[start : start + size]
        start += size
        cut = int(np.floor(cfg.train_fraction * size))
        block_train = block[:cut]
        if cfg.slice_limit is not None:
            want = cfg.slice_limit // cfg.n_blocks
            if want > len(block_train):
                raise ConfigError(
                    f"slice_limit {cfg.slice_limit} asks for {want} train slices in a block "
                    f"that only has {len(block_train)}"
                )
            picked = rng.choice(len(block_train), size=want, replace=False)
            block_train = [block_train[i] for i in sorted(picked)]
        train.extend(block_train)
        val.extend(block[cut:])
    return {"train": train, "val": val, "test": test}


# ------------------------------------------------------------------- tiling


@dataclass
class TileConfig:
    tile_h: int
    tile_w: int
    overlap_fraction: float = 0.5
    edge_policy: str = "drop_partial"

    def __post_init__(self):
        if self.edge_policy != "drop_partial":
            raise ConfigError(f"unsupported edge policy {self.edge_policy!r}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError("overlap_fraction must lie in [0, 1)")
        for name, tile in (("tile_h", self.tile_h), ("tile_w", self.tile_w)):
            stride = tile * (1.0 - self.overlap_fraction)
            if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
                raise ConfigError(f"{name}={tile} with overlap {self.overlap_fraction} "
                                  f"gives non-integer stride {stride}")

    @property
    def stride_h(self) -> int:
        return int(round(self.tile_h * (1.0 - self.overlap_fraction)))

    @property
    def stride_w(self) -> int:
        return int(round(self.tile_w * (1.0 - self.overlap_fraction)))


@dataclass
class TileSet:
    images: np.ndarray  # f32, T x th x tw
    masks: np.ndarray  # u8, T x th x tw
    provenance: np.ndarray  # i32, T x 3 (slice, row, col)
    tile_h: int
    tile_w: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def save(self, stem) -> None:
        stem = str(stem)
        save_segv(stem + ".images.segv", self.images.astype(np.float32, copy=False))
        save_segv(stem + ".masks.segv", self.masks.astype(np.uint8, copy=False))
        prov = [
            {"slice": int(s), "row": int(r), "col": int(c)} for s, r, c in self.provenance
        ]
        Path(stem + ".json").write_text(
            json.dumps({"tile_h": self.tile_h, "tile_w": self.tile_w, "tiles": prov}, indent=2)
        )

    @classmethod
    def load(cls, stem) -> "TileSet":
        stem = str(stem)
        images, _ = load_segv(stem + ".images.segv")
        masks, _ = load_segv(stem + ".masks.segv")
        header = json.loads(Path(stem + ".json").read_text())
        prov = np.array(
            [[t["slice"], t["row"], t["col"]] for t in header["tiles"]], dtype=np.int32
        ).reshape(-1, 3)
        return cls(images=images, masks=masks, provenance=prov,
                   tile_h=header["tile_h"], tile_w=header["tile_w"])


def tile_origins(h: int, w: int, cfg: TileConfig) -> list[tuple[int, int]]:
    if cfg.tile_h > h or cfg.tile_w > w:
        raise ConfigError(f"tile {cfg.tile_h}x{cfg.tile_w} larger than slice {h}x{w}")
    rows = range(0, h - cfg.tile_h + 1, cfg.stride_h)
    cols = range(0, w - cfg.tile_w + 1, cfg.stride_w)
    return [(r, c) for r in rows for c in cols]


def tile_count(h: int, w: int, cfg: TileConfig) -> int:
    return ((h - cfg.tile_h) // cfg.stride_h + 1) * ((w - cfg.tile_w) // cfg.stride_w + 1)


def tile_slice(image: np.ndarray, mask: np.ndarray, cfg: TileConfig, slice_index: int = 0) -> TileSet:
    """Overlapping sliding-window tiles of one slice, partial tiles dropped."""
    if image.shape != mask.shape:
        raise ConfigError(f"image {image.shape} and mask {mask.shape} disagree")
    origins = tile_origins(image.shape[0], image.shape[1], cfg)
    images = np.stack([image[r : r + cfg.tile_h, c : c + cfg.tile_w] for r, c in origins]) \
        if origins else np.zeros((0, cfg.tile_h, cfg.tile_w), dtype=np.float32)
    masks = np.stack([mask[r : r + cfg.tile_h, c : c + cfg.tile_w] for r, c in origins]) \
        if origins else np.zeros((0, cfg.tile_h, cfg.tile_w), dtype=np.uint8)
    prov = np.array([[slice_index, r, c] for r, c in origins], dtype=np.int32).reshape(-1, 3)
    return TileSet(images=images.astype(np.float32, copy=False),
                   masks=masks.astype(np.uint8, copy=False),
                   provenance=prov, tile_h=cfg.tile_h, tile_w=cfg.tile_w)


def tile_volume(volume: Volume, masks: MaskVolume, slice_indices, cfg: TileConfig) -> TileSet:
    """Tiles of the given slices, in (slice, row, col) order."""
    parts = [tile_slice(volume.slice(i), masks.slice(i), cfg, slice_index=i)
             for i in sorted(slice_indices)]
    if not parts:
        return TileSet(images=np.zeros((0, cfg.tile_h, cfg.tile_w), dtype=np.float32),
                       masks=np.zeros((0, cfg.tile_h, cfg.tile_w), dtype=np.uint8),
                       provenance=np.zeros((0, 3), dtype=np.int32),
                       tile_h=cfg.tile_h, tile_w=cfg.tile_w)
    return TileSet(images=np.concatenate([p.images for p in parts]),
                   masks=np.concatenate([p.masks for p in parts]),
                   provenance=np.concatenate([p.provenance for p in parts]),
                   tile_h=cfg.tile_h, tile_w=cfg.tile_w)


# ----------------------------------------------------------- class merging

# the thin third interval is folded into the second; everything above shifts down
MERGE_LUT = np.array([0, 1, 2, 2, 3, 4, 5, 6], dtype=np.uint8)


def merge_classes(masks: MaskVolume) -> MaskVolume:
    if masks.num_classes != 8:
        raise ContractError(f"merge_classes expects 8 input classes, got {masks.num_classes}")
    if masks.data.size and masks.data.max() > 7:
        raise ContractError(f"mask value {int(masks.data.max())} out of range for 8 classes")
    return MaskVolume(data=MERGE_LUT[masks.data], num_classes=7)


# ------------------------------------------------------- synthetic generator


@dataclass
class SynthConfig:
    slices: int = 24
    height: int = 160
    width: int = 240
    num_classes: int = 7
    horizon_waviness: float = 6.0  # peak offset of each horizon, in pixels
    texture_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.slices < 1 or self.height < 2 * self.num_classes or self.width < 4:
            raise ConfigError("volume too small for the requested class count")


# per-band reflector look: (vertical period, amplitude, dc offset, noise,
# horizontal phase jitter). Bands alternate strong/weak, coarse/fine so the
# textures stay separable.
_BAND_STYLES = [
    (999.0, 0.05, -0.55, 0.03, 0.0),  # near-featureless top (water column)
    (10.0, 0.95, 0.25, 0.10, 0.35),
    (17.0, 0.80, -0.20, 0.05, 0.05),
    (7.0, 0.45, 0.45, 0.18, 0.60),
    (23.0, 0.30, -0.40, 0.06, 0.10),
    (12.0, 0.55, 0.05, 0.28, 0.90),
    (15.0, 0.90, 0.55, 0.05, 0.08),
    (9.0, 0.70, -0.05, 0.08, 0.15),
]


def _smooth_field(rng, slices: int, width: int, amplitude: float) -> np.ndarray:
    """Low-frequency surface over (slice, column), bounded by +-amplitude."""
    s = np.arange(slices)[:, None]
    w = np.arange(width)[None, :]
    out = np.zeros((slices, width))
    for _ in range(3):
        lam_w = rng.uniform(0.8, 3.0) * width
        lam_s = rng.uniform(2.0, 6.0) * max(slices, 2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (w / lam_w + s / lam_s) + phase)
    peak = np.abs(out).max()
    return out * (amplitude / peak) if peak > 0 else out


def generate_synthetic_volume(cfg: SynthConfig) -> tuple[Volume, MaskVolume]:
    """Layered-texture stand-in for a real annotated survey.

    num_classes - 1 smooth horizon surfaces drift gently across slices and
    columns; each band carries a distinct reflector texture (period,
    amplitude, noise). Labels are band indices, so along any column they are
    monotone non-decreasing.
    """
    rng = np.random.default_rng(cfg.texture_seed)
    s_count, h, w, c = cfg.slices, cfg.height, cfg.width, cfg.num_classes

    nominal = [h * (k + 1) / c for k in range(c - 1)]
    amp = cfg.horizon_waviness
    horizons = np.stack([nominal[k] + _smooth_field(rng, s_count, w, amp) for k in range(c - 1)])

    depth = np.arange(h, dtype=np.float64)[None, :, None]  # 1 x H x 1
    bounds = horizons[:, :, None, :]  # (c-1) x S x 1 x W
    stacked = np.concatenate(
        [np.zeros((1, s_count, 1, w)), bounds, np.full((1, s_count, 1, w), h)]
    )
    thickness = np.diff(stacked, axis=0)
    if thickness.min() < 2.0:
        raise ConfigError(
            f"band thickness fell to {thickness.min():.2f} px; lower horizon_waviness "
            f"or use fewer classes"
        )
    labels = (depth >= bounds).sum(axis=0).astype(np.uint8)  # S x H x W

    styles = [_BAND_STYLES[k % len(_BAND_STYLES)] for k in range(c)]
    top = np.concatenate([np.zeros((1, s_count, 1, w)), bounds])  # c x S x 1 x W

    signal = np.zeros((s_count, h, w))
    for k, (period, amplitude, dc, noise, jitter) in enumerate(styles):
        phase_wobble = _smooth_field(rng, s_count, w, jitter * np.pi)[:, None, :]
        rel_depth = depth - top[k]  # reflectors hang off the band's own roof
        tex = dc + amplitude * np.sin(2 * np.pi * rel_depth / period + phase_wobble)
        tex = tex + noise * rng.standard_normal((s_count, h, w))
        signal = np.where(labels == k, tex, signal)

    volume = Volume(
        data=(signal * 30000.0).astype(np.float32),
        meta={"synthetic": True, "num_classes": c, "seed": cfg.texture_seed},
    )
    return volume, MaskVolume(data=labels, num_classes=c)
