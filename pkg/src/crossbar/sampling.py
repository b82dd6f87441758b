"""Tumor region statistics, crossbar patch sampling and patch extraction.

Centers follow one convention everywhere: a patch of ``height x width``
centered at ``(r, c)`` spans rows ``r - height//2 .. r - height//2 + height - 1``
(and the same for columns), so for even dims the center sits at local index
``(height//2, width//2)``.
"""
import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

VERTICAL_DIMS = (100, 20)
HORIZONTAL_DIMS = (20, 100)


class Orientation(str, enum.Enum):
    vertical = "vertical"
    horizontal = "horizontal"

    @property
    def opposite(self):
        return Orientation.horizontal if self is Orientation.vertical else Orientation.vertical

    @property
    def default_dims(self):
        return VERTICAL_DIMS if self is Orientation.vertical else HORIZONTAL_DIMS


class Label(str, enum.Enum):
    tumor = "tumor"
    non_tumor = "non_tumor"
    unlabeled = "unlabeled"


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class TumorStats:
    centroid: tuple
    incircle_radius: float
    circumcircle_radius: float
    outer_radius: float
    area: int


@dataclass(frozen=True)
class SamplingParams:
    beta: float = 3.5
    tumor_fraction: float = 1 / 3
    arc_step: float = 3.0
    row_stride: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 0 < self.tumor_fraction <= 1:
            raise ValueError(f"tumor_fraction must be in (0, 1], got {self.tumor_fraction}")
        if not self.arc_step >= 1:
            raise ValueError(f"arc_step must be >= 1, got {self.arc_step}")
        if int(self.row_stride) < 1:
            raise ValueError(f"row_stride must be >= 1, got {self.row_stride}")

    def for_round(self, round_index, arc_step_factor=1.0):
        """Params for cascade round ``round_index`` (1-based): a fresh seed and
        an arc step scaled by ``arc_step_factor ** (round_index - 1)``."""
        step = max(1.0, self.arc_step * arc_step_factor ** (round_index - 1))
        seed = int(np.random.SeedSequence([self.seed, round_index]).generate_state(1)[0])
        return replace(self, arc_step=step, seed=seed)


@dataclass(frozen=True)
class PatchSpec:
    orientation: Orientation
    center: tuple
    height: int
    width: int
    label: Label = Label.unlabeled

    def __post_init__(self):
        o = Orientation(self.orientation)
        object.__setattr__(self, "orientation", o)
        object.__setattr__(self, "label", Label(self.label))
        if o is Orientation.vertical and not self.height > self.width:
            raise ValueError(f"vertical patch needs height > width, got {self.height}x{self.width}")
        if o is Orientation.horizontal and not self.width > self.height:
            raise ValueError(f"horizontal patch needs width > height, got {self.height}x{self.width}")

    @property
    def row_span(self):
        top = self.center[0] - self.height // 2
        return top, top + self.height - 1

    @property
    def col_span(self):
        left = self.center[1] - self.width // 2
        return left, left + self.width - 1


@dataclass(frozen=True)
class Patch:
    spec: PatchSpec
    pixels: np.ndarray


def make_spec(orientation, row, col, mask=None, dims=None):
    orientation = Orientation(orientation)
    h, w = dims or orientation.default_dims
    label = Label.unlabeled
    if mask is not None:
        label = Label.tumor if mask[row, col] else Label.non_tumor
    return PatchSpec(orientation, (int(row), int(col)), h, w, label)


def largest_component(mask):
    mask = np.asarray(mask, dtype=bool)
    lab, n = ndimage.label(mask)  # 4-connectivity in 2-D
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == np.argmax(sizes)


def region_stats(mask):
    """Centroid, incircle/circumcircle radii, sampling radius and area of the
    largest connected component of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyRegionError("empty region")
    comp = largest_component(mask)
    rows, cols = np.nonzero(comp)
    centroid = (float(rows.mean()), float(cols.mean()))
    # pixels outside the image count as background
    edt = ndimage.distance_transform_edt(np.pad(comp, 1))
    r = max(float(edt.max()), 1.0)
    far = float(np.sqrt(((rows - centroid[0]) ** 2 + (cols - centroid[1]) ** 2).max()))
    circum = max(far, r, 1.0)
    return TumorStats(centroid, r, circum, 1.5 * circum, int(comp.sum()))


def alpha(i, r, beta):
    if not r > 0:
        raise ValueError("invalid radius")
    return math.exp(-beta * i / (r / 2))


def ring_radii(stats, params):
    """Ring radii ``(1 - a_i) r + a_i R`` for ``i = 0 .. floor(r/2)``."""
    r = stats.incircle_radius
    big = stats.outer_radius
    return [(1 - a) * r + a * big
            for a in (alpha(i, r, params.beta) for i in range(int(math.floor(r / 2)) + 1))]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def basic_sample(image_dims, mask, orientation, params, dims=None):
    """Tumor-labeled centers on a random subset of the foreground plus
    non-tumor centers along concentric rings around the tumor centroid.

    Returns tumor specs first, then ring specs.
    """
    orientation = Orientation(orientation)
    mask = np.asarray(mask, dtype=bool)
    h, w = image_dims
    stats = region_stats(mask)
    rng = np.random.default_rng(params.seed)

    fg = np.argwhere(mask)
    n_tumor = min(len(fg), _round_half_up(params.tumor_fraction * len(fg)))
    pick = np.sort(rng.choice(len(fg), size=n_tumor, replace=False))
    specs = [make_spec(orientation, r, c, mask, dims) for r, c in fg[pick]]

    cr, cc = stats.centroid
    seen = set()
    for radius in ring_radii(stats, params):
        n_pts = max(1, _round_half_up(2 * math.pi * radius / params.arc_step))
        phase = rng.uniform(0, 2 * math.pi)
        theta = phase + 2 * math.pi * np.arange(n_pts) / n_pts
        rr = np.floor(cr + radius * np.sin(theta) + 0.5).astype(int)
        cc_ = np.floor(cc + radius * np.cos(theta) + 0.5).astype(int)
        for r, c in zip(rr, cc_):
            if not (0 <= r < h and 0 <= c < w) or mask[r, c] or (r, c) in seen:
                continue
            seen.add((r, c))
            specs.append(make_spec(orientation, r, c, mask, dims))
    return specs


def cover_centers(misregion, row_stride, image_dims=None):
    """Centers that blanket ``misregion``: three lines (first, center, last
    column of a tall patch, or rows of a wide one) stepped by ``row_stride``."""
    cr, cc = misregion.center
    top, _ = misregion.row_span
    left, _ = misregion.col_span
    h, w = misregion.height, misregion.width
    stride = int(row_stride)
    if misregion.orientation is Orientation.vertical:
        lines = (cc - w // 2, cc, cc + w // 2 - 1)
        steps = [top + k * stride for k in range(math.ceil(h / stride))]
        pts = [(r, c) for c in lines for r in steps]
    else:
        lines = (cr - h // 2, cr, cr + h // 2 - 1)
        steps = [left + k * stride for k in range(math.ceil(w / stride))]
        pts = [(r, c) for r in lines for c in steps]
    out = []
    seen = set()
    for p in pts:
        if p in seen:
            continue
        seen.add(p)
        if image_dims is not None and not (0 <= p[0] < image_dims[0] and 0 <= p[1] < image_dims[1]):
            continue
        out.append(p)
    return out


def cover_resample(misregion, mask, params, orientation=None):
    """Re-sample patches covering a mis-segmented patch footprint.

    By default the new patches take the opposite orientation (cross-feeding);
    pass ``orientation`` equal to the misregion's own to re-sample for
    self-improvement. Patch dims are the misregion's, transposed when the
    orientation flips.
    """
    target = misregion.orientation.opposite if orientation is None else Orientation(orientation)
    if target is misregion.orientation:
        dims = (misregion.height, misregion.width)
    else:
        dims = (misregion.width, misregion.height)
    mask = np.asarray(mask, dtype=bool)
    return [make_spec(target, r, c, mask, dims)
            for r, c in cover_centers(misregion, params.row_stride, mask.shape)]


def pad_for(image, dims):
    """Edge-replicate ``image`` so any in-image center has a full window.

    Returns the padded array and the ``(top, left)`` offsets.
    """
    h, w = dims
    pads = ((h // 2, h - h // 2 - 1), (w // 2, w - w // 2 - 1))
    return np.pad(image, pads, mode="edge"), (pads[0][0], pads[1][0])


def extract_patch(image, spec):
    image = np.asarray(image)
    r, c = spec.center
    if not (0 <= r < image.shape[0] and 0 <= c < image.shape[1]):
        raise IndexError(f"center out of bounds: {spec.center} for image {image.shape}")
    rows = np.clip(np.arange(spec.row_span[0], spec.row_span[1] + 1), 0, image.shape[0] - 1)
    cols = np.clip(np.arange(spec.col_span[0], spec.col_span[1] + 1), 0, image.shape[1] - 1)
    return Patch(spec, image[np.ix_(rows, cols)])


def extract_windows(image, centers, dims, dtype=np.float32):
    """Stack the edge-clamped ``dims`` windows at ``centers`` into an
    ``(n, h, w)`` array. Same pixels as :func:`extract_patch`, batched."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    h, w = dims
    if len(centers) and (centers.min() < 0 or np.any(centers.max(axis=0) >= image.shape)):
        raise IndexError("center out of bounds")
    padded, _ = pad_for(np.asarray(image, dtype=dtype), dims)
    win = np.lib.stride_tricks.sliding_window_view(padded, (h, w))
    # padded top-left of a centered window equals the center in image coords
    return win[centers[:, 0], centers[:, 1]].copy()


def specs_to_arrays(specs):
    """Centers ``(n, 2)`` and binary labels ``(n,)`` (1 = tumor)."""
    centers = np.array([s.center for s in specs], dtype=np.int64).reshape(-1, 2)
    labels = np.array([s.label is Label.tumor for s in specs], dtype=np.int64)
    return centers, labels


def write_specs_csv(specs, fh):
    fh.write("orientation,row,col,height,width,label\n")
    for s in specs:
        fh.write(f"{s.orientation.value},{s.center[0]},{s.center[1]},{s.height},{s.width},{s.label.value}\n")


def read_specs_csv(fh):
    lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "orientation,row,col,height,width,label":
        raise ValueError("bad PatchSpec CSV header")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        o, r, c, h, w, lab = line.split(",")
        out.append(PatchSpec(Orientation(o), (int(r), int(c)), int(h), int(w), Label(lab)))
    return out
