"""CT ingestion: Hounsfield-unit windowing, the on-disk dataset format and a
synthetic hemorrhage phantom generator used in place of real scan data.

Raw HU slices are standardized once via their rescale slope/intercept, then
converted to 3-channel pseudo-RGB via three fixed windows (brain, subdural,
soft tissue), each mapped linearly to [0, 1] with clamping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

LABEL_NAMES = ("any", "epidural", "intraparenchymal", "intraventricular",
               "subarachnoid", "subdural")
NUM_CLASSES = 6

MAGIC = b"SCPF"
VERSION = 1

# per-type bleed count distribution: P(0), P(1), P(2)
BLEED_COUNT_PROBS = (0.72, 0.20, 0.08)
BLEED_PREVALENCE = 1.0 - BLEED_COUNT_PROBS[0]

AIR_HU = -1000.0
SKULL_HU_RANGE = (250.0, 1000.0)
BRAIN_HU_RANGE = (20.0, 45.0)
BLEED_HU_RANGE = (50.0, 90.0)


class DatasetFormatError(ValueError):
    """Bad magic, version mismatch or truncated payload."""


@dataclass(frozen=True)
class HuWindow:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"degenerate window [{self.low}, {self.high}]")


BRAIN_WINDOW = HuWindow(40.0, 80.0)
SUBDURAL_WINDOW = HuWindow(80.0, 200.0)
SOFT_TISSUE_WINDOW = HuWindow(40.0, 380.0)
WINDOWS = (BRAIN_WINDOW, SUBDURAL_WINDOW, SOFT_TISSUE_WINDOW)


@dataclass
class HuSlice:
    values: np.ndarray                  # H x W raw or standardized HU
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    standardized: bool = False

    def standardize(self) -> "HuSlice":
        """Apply slope/intercept exactly once."""
        if self.standardized:
            return self
        return HuSlice(self.rescale_slope * self.values + self.rescale_intercept,
                       self.rescale_slope, self.rescale_intercept,
                       standardized=True)


@dataclass
class Sample:
    image: np.ndarray                   # H x W x 3 float32 in [0, 1]
    label: np.ndarray                   # 6 x uint8 in {0, 1}


def hu_window_channel(hu_slice: HuSlice, window: HuWindow) -> np.ndarray:
    """Map standardized HU linearly through `window` into [0, 1]."""
    if not hu_slice.standardized:
        raise ValueError("slice must be standardized before windowing")
    scaled = (hu_slice.values - window.low) / (window.high - window.low)
    return np.clip(scaled, 0.0, 1.0)


def stack_windows(hu_slice: HuSlice) -> np.ndarray:
    """Stack the brain/subdural/soft-tissue channels into pseudo-RGB."""
    channels = [hu_window_channel(hu_slice, w) for w in WINDOWS]
    return np.stack(channels, axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic phantom generation

def _disk(yy, xx, cy, cx, r) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _phantom_base(rng: np.random.Generator, size: int):
    """Skull ring + textured brain; returns (hu, brain_mask, skull geometry)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    outer_r = size * rng.uniform(0.42, 0.46)
    thickness = size * rng.uniform(0.05, 0.07)
    inner_r = outer_r - thickness

    hu = np.full((size, size), AIR_HU)
    skull = _disk(yy, xx, c, c, outer_r) & ~_disk(yy, xx, c, c, inner_r)
    hu[skull] = rng.uniform(*SKULL_HU_RANGE)

    brain = _disk(yy, xx, c, c, inner_r)
    texture = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 16.0)
    span = texture.max() - texture.min()
    if span > 0:
        texture = (texture - texture.min()) / span
    lo, hi = BRAIN_HU_RANGE
    hu[brain] = lo + (hi - lo) * texture[brain]
    return hu, brain, (yy, xx, c, inner_r)


def _paint_bleed(hu, brain, geom, kind: int, rng: np.random.Generator) -> None:
    """Inject one bleed of the given subtype (1..5) into the brain region."""
    yy, xx, c, inner_r = geom
    value = rng.uniform(*BLEED_HU_RANGE)
    size = hu.shape[0]
    if kind == 1:  # epidural: convex lens pressed against the inner skull
        theta = rng.uniform(0, 2 * np.pi)
        cy = c + inner_r * np.sin(theta)
        cx = c + inner_r * np.cos(theta)
        mask = _disk(yy, xx, cy, cx, size * rng.uniform(0.10, 0.16)) & brain
    elif kind == 5:  # subdural: thin crescent hugging the skull
        theta = rng.uniform(0, 2 * np.pi)
        span = rng.uniform(0.9, 1.6)
        rr = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
        ang = np.arctan2(yy - c, xx - c)
        dang = np.angle(np.exp(1j * (ang - theta)))
        band = (rr > inner_r - size * 0.05) & (rr <= inner_r)
        mask = band & (np.abs(dang) < span) & brain
    elif kind == 2:  # intraparenchymal: off-center blob
        theta = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.35, 0.65) * inner_r
        cy = c + rad * np.sin(theta)
        cx = c + rad * np.cos(theta)
        mask = _disk(yy, xx, cy, cx, size * rng.uniform(0.06, 0.11)) & brain
    elif kind == 3:  # intraventricular: small central blob
        cy = c + rng.uniform(-1.5, 1.5)
        cx = c + rng.uniform(-1.5, 1.5)
        mask = _disk(yy, xx, cy, cx, size * rng.uniform(0.04, 0.07)) & brain
    elif kind == 4:  # subarachnoid: thin curvilinear streaks
        mask = np.zeros_like(brain)
        for _ in range(rng.integers(2, 4)):
            theta = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.5, 0.9) * inner_r
            ang0 = rng.uniform(0, 2 * np.pi)
            arc = rng.uniform(0.6, 1.2)
            ts = np.linspace(ang0, ang0 + arc, size * 2)
            py = np.clip(np.round(c + rad * np.sin(ts)), 0, size - 1).astype(int)
            px = np.clip(np.round(c + rad * np.cos(ts)), 0, size - 1).astype(int)
            streak = np.zeros_like(brain)
            streak[py, px] = True
            streak |= np.roll(streak, 1, axis=0)
            mask |= streak
        mask &= brain
    else:
        raise ValueError(f"unknown bleed kind {kind}")
    hu[mask] = value


def synth_generate(seed: int, n: int, image_size: int = 64,
                   count_probs=BLEED_COUNT_PROBS) -> list[Sample]:
    """Deterministic phantom dataset; pure function of its arguments."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        hu, brain, geom = _phantom_base(rng, image_size)
        label = np.zeros(NUM_CLASSES, dtype=np.uint8)
        for kind in range(1, NUM_CLASSES):
            count = rng.choice(3, p=count_probs)
            for _ in range(count):
                _paint_bleed(hu, brain, geom, kind, rng)
            if count > 0:
                label[kind] = 1
        label[0] = 1 if label[1:].any() else 0
        hu_slice = HuSlice(hu, standardized=True)
        samples.append(Sample(stack_windows(hu_slice), label))
    return samples


# ---------------------------------------------------------------------------
# on-disk dataset format

_HEADER = struct.Struct("<4sIIIII")


def dataset_write(samples: list[Sample], path) -> None:
    if not samples:
        raise ValueError("cannot write an empty dataset")
    h, w, ch = samples[0].image.shape
    if ch != 3:
        raise DatasetFormatError("dataset images must have 3 channels")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(samples), h, w, ch))
        for s in samples:
            if s.image.shape != (h, w, ch):
                raise DatasetFormatError("inconsistent image shapes")
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            f.write(np.asarray(s.label, dtype=np.uint8).tobytes())


def dataset_read(path) -> list[Sample]:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise DatasetFormatError("truncated header")
        magic, version, n, h, w, ch = _HEADER.unpack(header)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DatasetFormatError(f"unsupported version {version}")
        if ch != 3:
            raise DatasetFormatError(f"unexpected channel count {ch}")
        payload = f.read()
    per_sample = h * w * ch * 4 + NUM_CLASSES
    if len(payload) != n * per_sample:
        raise DatasetFormatError(
            f"payload length {len(payload)} != {n} x {per_sample}")
    samples = []
    for i in range(n):
        chunk = payload[i * per_sample:(i + 1) * per_sample]
        image = np.frombuffer(chunk[:h * w * ch * 4], dtype="<f4")
        image = image.reshape(h, w, ch).copy()
        label = np.frombuffer(chunk[h * w * ch * 4:], dtype=np.uint8).copy()
        if not np.isin(label, (0, 1)).all():
            raise DatasetFormatError("labels must be 0/1 bytes")
        samples.append(Sample(image, label))
    return samples
