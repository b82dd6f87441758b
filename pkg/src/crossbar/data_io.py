"""Synthetic phantom data, P5 graymap IO, dataset manifests and subject folds."""
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .sampling import largest_component

MANIFEST_VERSION = 1


class PGMFormatError(ValueError):
    pass


class TruncatedDataError(PGMFormatError):
    pass


class NonBinaryMaskError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    image_size: tuple = (296, 296)
    diameter_range: tuple = (10.0, 90.0)
    background_intensity: float = 0.3
    contrast_range: tuple = (0.25, 0.4)
    noise_sigma: float = 0.03
    axis_ratio_range: tuple = (0.65, 1.0)
    boundary_perturbation: float = 0.06  # fraction of the local radius
    distractor_count: int = 2
    distractor_diameter_range: tuple = (6.0, 18.0)
    distractor_contrast_factor: tuple = (1.6, 2.0)  # times the tumor contrast
    background_variation: float = 0.04
    edge_blur: float = 0.6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.diameter_range
        if not 0 < lo <= hi <= min(self.image_size):
            raise ValueError(f"diameter range {self.diameter_range} does not fit image {self.image_size}")
        if min(self.contrast_range) < 0:
            raise ValueError("contrast must be >= 0")


def _perturbed_ellipse(shape, center, semi_major, semi_minor, angle, amp, rng):
    """Boolean support of an ellipse whose radius wobbles by a few low
    harmonics of relative amplitude ``amp``."""
    rows, cols = np.indices(shape, dtype=np.float64)
    dy, dx = rows - center[0], cols - center[1]
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    theta = np.arctan2(v, u)
    radius = semi_major * semi_minor / np.sqrt((semi_minor * np.cos(theta)) ** 2 + (semi_major * np.sin(theta)) ** 2)
    if amp > 0:
        wobble = np.zeros_like(theta)
        harmonics = np.arange(2, 6)
        weights = rng.uniform(0.3, 1.0, len(harmonics))
        weights /= weights.sum()
        for k, wk, ph in zip(harmonics, weights, rng.uniform(0, 2 * np.pi, len(harmonics))):
            wobble += wk * np.cos(k * theta + ph)
        radius = radius * (1 + amp * wobble)
    return np.hypot(u, v) <= radius


def _smooth_field(shape, rng, n_waves=4):
    rows, cols = np.indices(shape, dtype=np.float64)
    field_ = np.zeros(shape)
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.5, 2.0, 2) * 2 * np.pi / np.array(shape)
        field_ += np.cos(fy * rows + fx * cols + rng.uniform(0, 2 * np.pi))
    return field_ / n_waves


def generate_phantom(config, rng):
    """One synthetic slice: a perturbed-ellipse tumor, brighter distractor
    blobs outside it, smooth background variation and Gaussian noise.

    Returns ``(image, mask)``: float64 intensities min-max normalized to
    [0, 1] and the boolean tumor support.
    """
    h, w = config.image_size
    diameter = rng.uniform(*config.diameter_range)
    semi_major = diameter / 2
    semi_minor = semi_major * rng.uniform(*config.axis_ratio_range)
    angle = rng.uniform(0, np.pi)
    margin = semi_major * (1 + config.boundary_perturbation) + 2
    center = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))
    tumor = _perturbed_ellipse((h, w), center, semi_major, semi_minor, angle,
                               config.boundary_perturbation, rng)
    tumor = ndimage.binary_fill_holes(largest_component(tumor))
    contrast = rng.uniform(*config.contrast_range)

    clean = np.full((h, w), config.background_intensity, dtype=np.float64)
    if config.background_variation > 0:
        clean += config.background_variation * _smooth_field((h, w), rng)
    clean[tumor] += contrast

    keep_out = ndimage.binary_dilation(tumor, iterations=3)
    placed = 0
    for _ in range(50 * max(config.distractor_count, 1)):
        if placed >= config.distractor_count:
            break
        d = rng.uniform(*config.distractor_diameter_range)
        # land close to the tumor so distractors show up in its context window
        dist = semi_major + rng.uniform(4, 30) + d / 2
        phi = rng.uniform(0, 2 * np.pi)
        c = (center[0] + dist * math.sin(phi), center[1] + dist * math.cos(phi))
        if not (d / 2 + 1 <= c[0] < h - d / 2 - 1 and d / 2 + 1 <= c[1] < w - d / 2 - 1):
            continue
        blob = _perturbed_ellipse((h, w), c, d / 2, d / 2 * rng.uniform(0.6, 1.0),
                                  rng.uniform(0, np.pi), 0.0, rng)
        if not blob.any() or (blob & keep_out).any():
            continue
        clean[blob] = config.background_intensity + contrast * rng.uniform(*config.distractor_contrast_factor)
        keep_out |= ndimage.binary_dilation(blob, iterations=2)
        placed += 1

    if config.edge_blur > 0:
        clean = ndimage.gaussian_filter(clean, config.edge_blur, mode="nearest")
    image = clean + rng.normal(0.0, config.noise_sigma, (h, w)) if config.noise_sigma > 0 else clean
    return normalize(image), tumor


def normalize(image):
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


# --------------------------------------------------------------------------
# P5 portable graymap
# --------------------------------------------------------------------------

def _write_pgm(path, data):
    data = np.ascontiguousarray(data, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        fh.write(data.tobytes())


def _read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise PGMFormatError(f"{path}: bad magic {raw[:2]!r}, expected b'P5'")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedDataError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise PGMFormatError(f"{path}: bad header {tokens}") from exc
    if not 0 < maxval < 256:
        raise PGMFormatError(f"{path}: unsupported maxval {maxval}")
    payload = raw[pos:pos + width * height]
    if len(payload) < width * height:
        raise TruncatedDataError(f"{path}: expected {width * height} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width), maxval


def write_image(path, image):
    image = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    _write_pgm(path, np.floor(255 * image + 0.5).astype(np.uint8))


def read_image(path):
    data, maxval = _read_pgm(path)
    return data.astype(np.float64) / maxval


def write_mask(path, mask):
    _write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path):
    data, maxval = _read_pgm(path)
    bad = (data != 0) & (data != maxval)
    if bad.any():
        raise NonBinaryMaskError(f"{path}: non-binary mask (value {int(data[bad][0])})")
    return data == maxval


# --------------------------------------------------------------------------
# manifest + folds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    image_path: str
    mask_path: str
    fold: int

    @property
    def image_id(self):
        return os.path.splitext(os.path.basename(self.image_path))[0]


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    version: int = MANIFEST_VERSION
    base_dir: str = "."

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def fold(self, k):
        return [r for r in self.records if r.fold == k]

    def excluding_fold(self, k):
        return [r for r in self.records if r.fold != k]

    def subjects(self):
        return sorted({r.subject_id for r in self.records})

    def load_pair(self, record):
        image = normalize(read_image(self.resolve(record.image_path)))
        return image, read_mask(self.resolve(record.mask_path))


def save_manifest(manifest, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"#version {manifest.version}\n")
        for r in manifest.records:
            fh.write(f"{r.subject_id}\t{r.image_path}\t{r.mask_path}\t{r.fold}\n")


def load_manifest(path, check_paths=True):
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#version"):
        raise ValueError(f"{path}: missing '#version' header")
    version = int(lines[0].split()[1])
    if version != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {version}")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields, got {len(parts)}")
        records.append(ManifestRecord(parts[0], parts[1], parts[2], int(parts[3])))
    manifest = DatasetManifest(records, version, base)
    if check_paths:
        for r in records:
            for p in (r.image_path, r.mask_path):
                if not os.path.exists(manifest.resolve(p)):
                    raise FileNotFoundError(f"manifest {path}: missing file {p}")
    subject_folds = {}
    for r in records:
        if subject_folds.setdefault(r.subject_id, r.fold) != r.fold:
            raise ValueError(f"{path}: subject {r.subject_id} spans folds")
    return manifest


def make_folds(subject_ids, k=3, seed=0):
    """Seeded subject-level partition into ``k`` folds whose sizes differ by
    at most one. Returns ``{subject_id: fold}``."""
    subjects = sorted(set(subject_ids))
    if len(subjects) < k:
        raise ValueError(f"need at least {k} subjects for {k} folds, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return {subjects[j]: pos % k for pos, j in enumerate(order)}
