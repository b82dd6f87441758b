"""Cascaded co-training of the vertical and horizontal sub-models.

Round 1 trains V1 and H1 from scratch on basic-sampled patches. Each later
round evaluates the current pair on the training images, cover-resamples
every mis-classified patch in the opposite orientation and fine-tunes the
other sub-model on those patches plus a fresh basic sample.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import sampling, submodel
from .sampling import Orientation, SamplingParams
from .submodel import TrainConfig

log = logging.getLogger(__name__)

ORIENTATIONS = (Orientation.vertical, Orientation.horizontal)


@dataclass
class CascadeConfig:
    max_rounds: int = 3
    convergence_epsilon: float = 0.002
    sampling: SamplingParams = field(default_factory=SamplingParams)
    arc_step_factor: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune_epochs: Optional[int] = None  # None: same as train.max_epochs
    seed: int = 0
    resample_cap: int = 50_000
    max_train_patches: Optional[int] = None
    eval_locus: str = "centers"  # or "full": every pixel of every training image
    init_std: Optional[float] = None
    val_fraction: float = 0.1  # used only when the dataset has no validation images
    max_val_patches: Optional[int] = 3000
    last_weight: float = 1.5

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.eval_locus not in ("centers", "full"):
            raise ValueError(f"unknown eval_locus {self.eval_locus!r}")


@dataclass
class CascadeDataset:
    train_images: list
    train_masks: list
    val_images: list = field(default_factory=list)
    val_masks: list = field(default_factory=list)


@dataclass(frozen=True)
class MisRegion:
    orientation: Orientation
    spec: sampling.PatchSpec
    predicted: int
    truth: int
    image_index: int = 0


@dataclass
class RoundRecord:
    round: int
    orientation: Orientation
    train_error: float
    val_error: float


@dataclass
class CascadeEnsemble:
    vertical: list = field(default_factory=list)
    horizontal: list = field(default_factory=list)
    history: list = field(default_factory=list)
    last_weight: float = 1.5

    @property
    def models(self):
        return list(self.vertical) + list(self.horizontal)

    @property
    def names(self):
        return [f"vertical_{m.round_index}" for m in self.vertical] + \
               [f"horizontal_{m.round_index}" for m in self.horizontal]

    @property
    def weights(self):
        w = []
        for group in (self.vertical, self.horizontal):
            w += [1.0] * (len(group) - 1) + [self.last_weight] * (len(group) > 0)
        return w

    @property
    def rounds(self):
        return min(len(self.vertical), len(self.horizontal))


def _child_seed(*key):
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _orientation_code(o):
    return 0 if Orientation(o) is Orientation.vertical else 1


# ---------------------------------------------------------------- patch sets

def basic_specs(images, masks, orientation, params):
    """Basic-sample every image; per-image seeds derive from ``params.seed``."""
    return [sampling.basic_sample(img.shape, mk, orientation,
                                  replace(params, seed=_child_seed(params.seed, i)))
            for i, (img, mk) in enumerate(zip(images, masks))]


def _subsample(per_image, cap, seed):
    """Keep a seeded subset of at most ``cap`` specs across all images."""
    total = sum(len(s) for s in per_image)
    if cap is None or total <= cap:
        return per_image
    keep = np.zeros(total, dtype=bool)
    keep[np.random.default_rng(seed).choice(total, cap, replace=False)] = True
    out, pos = [], 0
    for specs in per_image:
        out.append([s for s, k in zip(specs, keep[pos:pos + len(specs)]) if k])
        pos += len(specs)
    return out


def collect_windows(images, per_image_specs, dims, dtype=np.float32):
    wins, labels = [], []
    for img, specs in zip(images, per_image_specs):
        if not specs:
            continue
        centers, lab = sampling.specs_to_arrays(specs)
        wins.append(sampling.extract_windows(img, centers, dims, dtype))
        labels.append(lab)
    if not wins:
        return np.empty((0,) + tuple(dims), dtype=dtype), np.empty(0, dtype=np.int64)
    return np.concatenate(wins), np.concatenate(labels)


# ---------------------------------------------------------------- evaluation

def evaluate_missegmentation(model, images, masks, eval_centers):
    """One :class:`MisRegion` per center whose predicted label differs from
    the mask. ``eval_centers[i]`` is an ``(n, 2)`` array for image ``i``."""
    orientation = Orientation(model.orientation)
    dims = getattr(model, "patch_shape", orientation.default_dims)
    out = []
    for i, (img, mk, centers) in enumerate(zip(images, masks, eval_centers)):
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        if len(centers) == 0:
            continue
        pred = np.asarray(model.predict_labels(img, centers)).astype(int)
        truth = np.asarray(mk, dtype=bool)[centers[:, 0], centers[:, 1]].astype(int)
        for k in np.nonzero(pred != truth)[0]:
            r, c = centers[k]
            spec = sampling.make_spec(orientation, r, c, mk, dims)
            out.append(MisRegion(orientation, spec, int(pred[k]), int(truth[k]), i))
    return out


def _eval_centers(images, per_image_specs, locus):
    if locus == "full":
        return [np.argwhere(np.ones(img.shape, dtype=bool)) for img in images]
    return [sampling.specs_to_arrays(specs)[0] for specs in per_image_specs]


def cover_specs(misregions, masks, params, orientation=None, cap=None, seed=0):
    """Cover-resample every misregion; grouped per image."""
    per_image = [[] for _ in masks]
    for mr in misregions:
        per_image[mr.image_index] += sampling.cover_resample(mr.spec, masks[mr.image_index], params, orientation)
    return _subsample(per_image, cap, seed)


# ---------------------------------------------------------------- training

@dataclass
class _Validation:
    windows: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


def _validation_set(dataset, orientation, config):
    if not dataset.val_images:
        return None
    params = replace(config.sampling, seed=_child_seed(config.seed, 7919, _orientation_code(orientation)))
    specs = basic_specs(dataset.val_images, dataset.val_masks, orientation, params)
    specs = _subsample(specs, config.max_val_patches, params.seed)
    return _Validation(*collect_windows(dataset.val_images, specs, orientation.default_dims))


def _split_off_validation(windows, labels, fraction, seed):
    n_val = int(round(fraction * len(labels)))
    if n_val == 0 or n_val >= len(labels):
        return windows, labels, _Validation()
    order = np.random.default_rng(seed).permutation(len(labels))
    v, t = order[:n_val], order[n_val:]
    return windows[t], labels[t], _Validation(windows[v], labels[v])


def _fit(model, windows, labels, val, config, finetune):
    cfg = config.train
    if finetune and config.finetune_epochs is not None:
        cfg = replace(cfg, max_epochs=config.finetune_epochs)
    if val is None:
        windows, labels, val = _split_off_validation(
            windows, labels, config.val_fraction,
            _child_seed(config.seed, 31, model.round_index, _orientation_code(model.orientation)))
    model, stats = submodel.train_epochs(model, windows, labels, val.windows, val.labels, cfg)
    # the restored best epoch was scored on this same validation set
    val_errors = [s.val_error for s in stats]
    val_error = float(min(val_errors) if cfg.restore_best else val_errors[-1])
    return model, stats, val_error


def train_initial(dataset, orientation, config, val=None, params=None):
    """V1 or H1: basic sampling on every training image, training from scratch."""
    orientation = Orientation(orientation)
    params = params or config.sampling.for_round(1, config.arc_step_factor)
    specs = basic_specs(dataset.train_images, dataset.train_masks, orientation, params)
    specs_fit = _subsample(specs, config.max_train_patches, _child_seed(params.seed, 1, _orientation_code(orientation)))
    windows, labels = collect_windows(dataset.train_images, specs_fit, orientation.default_dims)
    model = submodel.build(orientation, _child_seed(config.seed, _orientation_code(orientation)), config.init_std)
    model, stats, val_error = _fit(model, windows, labels, val, config, finetune=False)
    log.info("%s_1: %d patches, val_error %.4f", orientation.value, len(labels), val_error)
    return model, specs, RoundRecord(1, orientation, stats[-1].train_error, val_error)


def next_round(target, misregions, images, masks, round_index, config, val=None, resample_orientation=None):
    """Fine-tune a copy of ``target`` on cover-resampled misregions plus a
    fresh basic sample, producing the round ``round_index`` model.

    Misregions must come from the opposite orientation unless
    ``resample_orientation`` equals the target's (self-improvement).
    Returns ``(model, basic_specs_used, RoundRecord)``.
    """
    orientation = Orientation(target.orientation)
    if resample_orientation is None:
        bad = [m for m in misregions if m.orientation is orientation]
        if bad:
            raise ValueError(f"cross-feeding a {orientation.value} model needs "
                             f"{orientation.opposite.value} misregions")
    params = config.sampling.for_round(round_index, config.arc_step_factor)
    code = _orientation_code(orientation)
    resampled = cover_specs(misregions, masks, params, resample_orientation, config.resample_cap,
                            _child_seed(params.seed, 2, code))
    basic = basic_specs(images, masks, orientation, params)
    combined = [b + r for b, r in zip(basic, resampled)]
    combined = _subsample(combined, config.max_train_patches, _child_seed(params.seed, 3, code))
    windows, labels = collect_windows(images, combined, orientation.default_dims)
    if len(labels) == 0:
        raise ValueError("empty training set for fine-tuning")
    model = target.copy()
    model.round_index = round_index
    model, stats, val_error = _fit(model, windows, labels, val, config, finetune=True)
    log.info("%s_%d: %d patches (%d re-sampled), val_error %.4f", orientation.value, round_index,
             len(labels), sum(len(r) for r in resampled), val_error)
    return model, basic, RoundRecord(round_index, orientation, stats[-1].train_error, val_error)


def run_cascade(dataset, config=None):
    """Train V1..VT and H1..HT. Stops early once both orientations improve
    their validation error by less than ``convergence_epsilon`` in a round
    (never, if epsilon is 0)."""
    config = config or CascadeConfig()
    val = {o: _validation_set(dataset, o, config) for o in ORIENTATIONS}
    ens = CascadeEnsemble(last_weight=config.last_weight)
    current, specs = {}, {}
    for o in ORIENTATIONS:
        current[o], specs[o], rec = train_initial(dataset, o, config, val[o])
        ens.history.append(rec)
    ens.vertical.append(current[Orientation.vertical])
    ens.horizontal.append(current[Orientation.horizontal])
    last_err = {r.orientation: r.val_error for r in ens.history}

    for t in range(1, config.max_rounds):
        mis = {o: evaluate_missegmentation(current[o], dataset.train_images, dataset.train_masks,
                                           _eval_centers(dataset.train_images, specs[o], config.eval_locus))
               for o in ORIENTATIONS}
        nxt, recs = {}, {}
        for o in ORIENTATIONS:
            feed = mis[o.opposite]
            assert all(m.orientation is o.opposite for m in feed)
            log.info("round %d: %d %s misregions feed %s", t + 1, len(feed), o.opposite.value, o.value)
            nxt[o], specs[o], recs[o] = next_round(current[o], feed, dataset.train_images, dataset.train_masks,
                                                   t + 1, config, val[o])
        current = nxt
        ens.vertical.append(current[Orientation.vertical])
        ens.horizontal.append(current[Orientation.horizontal])
        ens.history += [recs[o] for o in ORIENTATIONS]
        gains = {o: last_err[o] - recs[o].val_error for o in ORIENTATIONS}
        last_err = {o: recs[o].val_error for o in ORIENTATIONS}
        if config.convergence_epsilon > 0 and all(g < config.convergence_epsilon for g in gains.values()):
            log.info("converged after round %d (gains %s)", t + 1, gains)
            break
    return ens


def run_self_improvement(dataset, orientation, iterations=10, config=None):
    """Fine-tune one sub-model repeatedly on its own cover-resampled errors
    (re-sampled in the same orientation) plus fresh basic samples.

    Returns ``(models, history)`` with one model and record per iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    config = config or CascadeConfig()
    orientation = Orientation(orientation)
    val = _validation_set(dataset, orientation, config)
    model, specs, rec = train_initial(dataset, orientation, config, val)
    models, history = [model], [rec]
    for it in range(2, iterations + 1):
        mis = evaluate_missegmentation(model, dataset.train_images, dataset.train_masks,
                                       _eval_centers(dataset.train_images, specs, config.eval_locus))
        model, specs, rec = next_round(model, mis, dataset.train_images, dataset.train_masks, it, config, val,
                                       resample_orientation=orientation)
        models.append(model)
        history.append(rec)
    return models, history


def write_history_csv(history, fh):
    fh.write("round,orientation,train_error,val_error\n")
    for r in history:
        fh.write(f"{r.round},{Orientation(r.orientation).value},{r.train_error!r},{r.val_error!r}\n")


def read_history_csv(fh):
    lines = fh.read().splitlines()
    if not lines or lines[0] != "round,orientation,train_error,val_error":
        raise ValueError("bad history CSV header")
    out = []
    for line in lines[1:]:
        if line:
            r, o, te, ve = line.split(",")
            out.append(RoundRecord(int(r), Orientation(o), float(te), float(ve)))
    return out
