"""Scatter-image datasets: decoded frames in, labeled 2-D histograms out.

A decoded frame is N complex points; the classifier input is a grayscale
occupancy grid over the I/Q plane.  Max-normalization keeps a sparse
20-point frame at full contrast (every occupied bin of a collision-free
frame renders as 1.0), and out-of-range points clip to the nearest edge
bin, which for injected frames is itself a strong signature.

Datasets persist in a little-endian binary container (magic ``IGDS``)
with a trailing CRC32, so any single corrupted byte is detected on load.
"""

from __future__ import annotations

import dataclasses
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import signal_model as sm
from .errors import CorruptDatasetError, InvalidInputError
from .fileio import atomic_write_bytes

MAGIC = b"IGDS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RasterConfig:
    """Histogram grid: height x width bins over [-bound, bound]^2.

    Bins are half-open [low, high) with the top edge closed; points
    outside the range land in the nearest edge bin.
    """

    height: int = 32
    width: int = 32
    bound: float = 3.0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise InvalidInputError("grid must be at least 2x2")
        if not self.bound > 0:
            raise InvalidInputError("axis bound must be positive")


@dataclass(frozen=True, eq=False)
class ScatterImage:
    """One rasterized frame: pixels in [0,1], class label, source frame id."""

    pixels: np.ndarray
    label: int
    frame_id: int = 0

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        if self.label not in (sm.LEGITIMATE, sm.ADVERSARY):
            raise InvalidInputError(f"label must be 0 or 1, got {self.label!r}")
        if self.frame_id < 0:
            raise InvalidInputError("frame id must be nonnegative")

    def __eq__(self, other):
        if not isinstance(other, ScatterImage):
            return NotImplemented
        return (
            self.label == other.label
            and self.frame_id == other.frame_id
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Ordered scatter images plus the generation config snapshot."""

    images: tuple
    sim: sm.SimulationConfig
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_counts(self) -> tuple[int, int]:
        n_adv = sum(img.label == sm.ADVERSARY for img in self.images)
        return len(self.images) - n_adv, n_adv

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.sim == other.sim
            and self.raster == other.raster
            and len(self.images) == len(other.images)
            and all(a == b for a, b in zip(self.images, other.images))
        )

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack into (X, y): X is (n, H, W, 1) float64, y is (n,) int64."""
        if not self.images:
            h, w = self.raster.height, self.raster.width
            return np.zeros((0, h, w, 1)), np.zeros(0, dtype=np.int64)
        x = np.stack([img.pixels for img in self.images]).astype(np.float64)
        y = np.array([img.label for img in self.images], dtype=np.int64)
        return x[..., np.newaxis], y


def rasterize(frame: sm.IQFrame, cfg: RasterConfig, label: int = sm.LEGITIMATE, frame_id: int = 0) -> ScatterImage:
    """Bin a frame's I/Q points into the grid and max-normalize.

    Column index comes from the in-phase part, row index from the
    quadrature part (row 0 at Q = -bound).  Total pre-normalization bin
    mass equals the frame length.
    """
    if len(frame) == 0:
        raise InvalidInputError("cannot rasterize an empty frame")
    i_part = frame.samples.real
    q_part = frame.samples.imag
    cols = np.floor((i_part + cfg.bound) / (2.0 * cfg.bound) * cfg.width).astype(np.int64)
    rows = np.floor((q_part + cfg.bound) / (2.0 * cfg.bound) * cfg.height).astype(np.int64)
    np.clip(cols, 0, cfg.width - 1, out=cols)
    np.clip(rows, 0, cfg.height - 1, out=rows)
    counts = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    np.add.at(counts, (rows, cols), 1)
    pixels = counts.astype(np.float32) / np.float32(counts.max())
    return ScatterImage(pixels, label, frame_id)


def generate_dataset(
    sim: sm.SimulationConfig,
    raster: RasterConfig,
    per_class: int,
    seed: int | None = None,
    start_index: int = 0,
) -> LabeledDataset:
    """per_class legitimate + per_class adversary images, interleaved.

    Pair i holds the legitimate then the adversary image for keyed frame
    index ``start_index + i``, so the secret sequence changes every
    frame and disjoint index ranges yield disjoint, independently
    reproducible shards.
    """
    if per_class < 1:
        raise InvalidInputError("per_class must be >= 1")
    if seed is not None:
        sim = dataclasses.replace(sim, seed=seed)
    key = sm.derive_key(sim.seed)
    images = []
    for i in range(per_class):
        frame_index = start_index + i
        for label in (sm.LEGITIMATE, sm.ADVERSARY):
            rng = sm.make_frame_rng(sim.seed, label, frame_index)
            frame, _ = sm.synthesize_frame(label, key.at_frame(frame_index), sim, rng)
            images.append(rasterize(frame, raster, label, frame_id=len(images)))
    return LabeledDataset(tuple(images), sim, raster)


def _encode(ds: LabeledDataset) -> bytes:
    levels = ds.sim.dictionary.levels
    parts = [
        MAGIC,
        struct.pack(
            "<HHHI", FORMAT_VERSION, ds.raster.height, ds.raster.width, len(ds.images)
        ),
        struct.pack("<HH", ds.sim.n, len(levels)),
        struct.pack(f"<{len(levels)}d", *levels),
        struct.pack("<dQd", ds.sim.snr_db, ds.sim.seed, ds.raster.bound),
    ]
    for img in ds.images:
        if img.pixels.shape != (ds.raster.height, ds.raster.width):
            raise InvalidInputError("image grid does not match dataset raster config")
        parts.append(struct.pack("<B", img.label))
        parts.append(img.pixels.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds: LabeledDataset, path: str) -> int:
    """Serialize to path (atomic write); returns bytes written."""
    return atomic_write_bytes(path, _encode(ds))


def load_dataset(path: str) -> LabeledDataset:
    """Load and fully validate an IGDS file (checksum first, then parse)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 54:  # magic + fixed header + one dictionary level + CRC
        raise CorruptDatasetError(f"{path}: file too short ({len(blob)} bytes)")
    body, trailer = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) != stored_crc:
        raise CorruptDatasetError(f"{path}: checksum mismatch")
    if body[:4] != MAGIC:
        raise CorruptDatasetError(f"{path}: bad magic {body[:4]!r}")
    version, height, width, count = struct.unpack("<HHHI", body[4:14])
    if version != FORMAT_VERSION:
        raise CorruptDatasetError(f"{path}: unsupported format version {version}")
    n, n_levels = struct.unpack("<HH", body[14:18])
    offset = 18
    try:
        levels = struct.unpack_from(f"<{n_levels}d", body, offset)
        offset += 8 * n_levels
        snr_db, seed, bound = struct.unpack_from("<dQd", body, offset)
        offset += 24
    except struct.error as exc:
        raise CorruptDatasetError(f"{path}: truncated header") from exc
    record_size = 1 + 4 * height * width
    if len(body) - offset != count * record_size:
        raise CorruptDatasetError(
            f"{path}: expected {count} records of {record_size} bytes, "
            f"found {len(body) - offset} bytes"
        )
    sim = sm.SimulationConfig(
        n=n, dictionary=sm.EnergyDictionary(levels), snr_db=snr_db, seed=seed
    )
    raster = RasterConfig(height=height, width=width, bound=bound)
    images = []
    for rec in range(count):
        label = body[offset]
        offset += 1
        pixels = np.frombuffer(body, dtype="<f4", count=height * width, offset=offset)
        offset += 4 * height * width
        images.append(ScatterImage(pixels.reshape(height, width), label, frame_id=rec))
    return LabeledDataset(tuple(images), sim, raster)
