"""Command-line entry point: ``crossbar {generate,train,segment,evaluate,inspect-sampling}``.

Settings come from three layers, later ones winning: built-in defaults, a
``key = value`` file given with ``--config``, and command-line flags. Every
command writes the merged settings to ``run.cfg`` in its output directory.
"""
import argparse
import dataclasses
import glob
import logging
import os
import re
import sys
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import __version__, cascade, data_io, inference, metrics, sampling, submodel
from .sampling import Orientation

log = logging.getLogger("crossbar")


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    # global
    seed: int = 0
    threads: Optional[int] = None
    out: str = "out"
    # generate
    subjects: int = 12
    images_per_subject: int = 5
    folds: int = 3
    image_size: int = 296
    diameter_min: float = 10.0
    diameter_max: float = 90.0
    noise_sigma: float = 0.03
    distractors: int = 2
    # data selection
    manifest: str = ""
    test_fold: int = 2
    val_fraction: float = 0.1
    # sampling
    beta: float = 3.5
    tumor_fraction: float = 1 / 3
    arc_step: float = 3.0
    row_stride: int = 3
    arc_step_factor: float = 1.0
    # training
    rounds: int = 3
    convergence_epsilon: float = 0.002
    learning_rate: float = 0.0005
    max_epochs: int = 20
    finetune_epochs: Optional[int] = None
    batch_size: int = 64
    dropout: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    patience: int = 3
    init_std: Optional[float] = None
    max_patches: Optional[int] = None
    max_val_patches: Optional[int] = 3000
    resample_cap: int = 50_000
    eval_locus: str = "centers"
    # segmentation / evaluation
    checkpoints: str = ""
    predictions: str = ""
    weights: Optional[str] = None
    stride: int = 1
    save_scores: bool = False
    per_model: bool = True
    largest_component: bool = False
    # inspect-sampling
    image: str = ""
    mask: str = ""


_OPTIONAL_TYPES = {"threads": int, "finetune_epochs": int, "init_std": float, "max_patches": int, "max_val_patches": int, "weights": str}


def _field_type(f):
    if f.name in _OPTIONAL_TYPES:
        return _OPTIONAL_TYPES[f.name]
    return type(f.default)


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(f, value):
    if value is None or (isinstance(value, str) and value.strip().lower() == "none"):
        return None
    kind = _field_type(f)
    if kind is bool:
        return _parse_bool(value)
    return kind(value)


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment. Keys may use dashes."""
    known = {f.name: f for f in fields(RunConfig)}
    out = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise CLIError(f"{path}:{n}: unknown setting {key!r}")
            out[key] = _coerce(known[key], value)
    return out


def write_config_file(config, path):
    with open(path, "w", newline="\n") as fh:
        for f in fields(RunConfig):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")


def merge_config(flag_values, config_path=None):
    values = {}
    if config_path:
        values.update(read_config_file(config_path))
    values.update(flag_values)
    return RunConfig(**values)


# ---------------------------------------------------------------- conversions

def sampling_params(cfg):
    return sampling.SamplingParams(cfg.beta, cfg.tumor_fraction, cfg.arc_step, cfg.row_stride, cfg.seed)


def train_config(cfg):
    return submodel.TrainConfig(learning_rate=cfg.learning_rate, max_epochs=cfg.max_epochs,
                                batch_size=cfg.batch_size, dropout_rate=cfg.dropout, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay, shuffle_seed=cfg.seed, patience=cfg.patience)


def cascade_config(cfg):
    return cascade.CascadeConfig(max_rounds=cfg.rounds, convergence_epsilon=cfg.convergence_epsilon,
                                 sampling=sampling_params(cfg), arc_step_factor=cfg.arc_step_factor,
                                 train=train_config(cfg), finetune_epochs=cfg.finetune_epochs, seed=cfg.seed,
                                 resample_cap=cfg.resample_cap, max_train_patches=cfg.max_patches, max_val_patches=cfg.max_val_patches,
                                 eval_locus=cfg.eval_locus, init_std=cfg.init_std, val_fraction=cfg.val_fraction)


def phantom_config(cfg):
    return data_io.PhantomConfig(image_size=(cfg.image_size, cfg.image_size),
                                 diameter_range=(cfg.diameter_min, cfg.diameter_max), noise_sigma=cfg.noise_sigma,
                                 distractor_count=cfg.distractors, seed=cfg.seed)


def parse_weights(text):
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CLIError(f"bad --weights {text!r}") from exc


# ---------------------------------------------------------------- commands

def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CLIError(f"output directory {path} is not writable")


def cmd_generate(cfg):
    folds = data_io.make_folds([f"s{i:03d}" for i in range(cfg.subjects)], cfg.folds, cfg.seed)
    _ensure_dir(cfg.out)
    for sub in ("images", "masks"):
        _ensure_dir(os.path.join(cfg.out, sub))
    pcfg = phantom_config(cfg)
    records = []
    subject_seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.subjects)
    for s, seq in enumerate(subject_seqs):
        sid = f"s{s:03d}"
        for k, img_seq in enumerate(seq.spawn(cfg.images_per_subject)):
            image, mask = data_io.generate_phantom(pcfg, np.random.default_rng(img_seq))
            name = f"{sid}_{k:02d}.pgm"
            data_io.write_image(os.path.join(cfg.out, "images", name), image)
            data_io.write_mask(os.path.join(cfg.out, "masks", name), mask)
            records.append(data_io.ManifestRecord(sid, f"images/{name}", f"masks/{name}", folds[sid]))
    data_io.save_manifest(data_io.DatasetManifest(records), os.path.join(cfg.out, "manifest.tsv"))
    write_config_file(cfg, os.path.join(cfg.out, "run.cfg"))
    print(f"wrote {len(records)} image/mask pairs for {cfg.subjects} subjects to {cfg.out}")
    return 0


def _load_manifest(cfg):
    if not cfg.manifest:
        raise CLIError("--manifest is required")
    return data_io.load_manifest(cfg.manifest)


def _split_validation(records, fraction, seed):
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 2 or fraction <= 0:
        return records, []
    n_val = max(1, int(round(fraction * len(subjects))))
    order = np.random.default_rng([seed, 17]).permutation(len(subjects))
    val_subjects = {subjects[i] for i in order[:n_val]}
    return [r for r in records if r.subject_id not in val_subjects], \
        [r for r in records if r.subject_id in val_subjects]


def cmd_train(cfg):
    manifest = _load_manifest(cfg)
    records = manifest.excluding_fold(cfg.test_fold)
    if not records:
        raise CLIError(f"no training records outside test fold {cfg.test_fold}")
    train_recs, val_recs = _split_validation(records, cfg.val_fraction, cfg.seed)
    pairs = [manifest.load_pair(r) for r in train_recs]
    vpairs = [manifest.load_pair(r) for r in val_recs]
    dataset = cascade.CascadeDataset([p[0] for p in pairs], [p[1] for p in pairs],
                                     [p[0] for p in vpairs], [p[1] for p in vpairs])
    log.info("training on %d images (%d validation)", len(pairs), len(vpairs))
    _ensure_dir(cfg.out)
    ens = cascade.run_cascade(dataset, cascade_config(cfg))
    for name, model in zip(ens.names, ens.models):
        submodel.save_checkpoint(model, os.path.join(cfg.out, f"{name}.ckpt"))
    with open(os.path.join(cfg.out, "history.csv"), "w", newline="\n") as fh:
        cascade.write_history_csv(ens.history, fh)
    write_config_file(cfg, os.path.join(cfg.out, "run.cfg"))
    print(f"wrote {len(ens.models)} checkpoints to {cfg.out}")
    return 0


_CKPT_RE = re.compile(r"^(vertical|horizontal)_(\d+)\.ckpt$")


def load_ensemble(directory):
    """Load ``{orientation}_{round}.ckpt`` files; both orientations must
    cover rounds 1..T."""
    if not os.path.isdir(directory):
        raise CLIError(f"checkpoint directory not found: {directory}")
    found = {}
    for path in glob.glob(os.path.join(directory, "*.ckpt")):
        m = _CKPT_RE.match(os.path.basename(path))
        if m:
            found[(m.group(1), int(m.group(2)))] = path
    if not found:
        raise CLIError(f"no checkpoints in {directory}")
    top = max(r for _, r in found)
    ens = cascade.CascadeEnsemble()
    for o in ("vertical", "horizontal"):
        for r in range(1, top + 1):
            path = found.get((o, r))
            if path is None:
                raise CLIError(f"missing checkpoint file: {os.path.join(directory, f'{o}_{r}.ckpt')}")
            try:
                model = submodel.load_checkpoint(path)
            except submodel.CheckpointError as exc:
                raise CLIError(f"incompatible checkpoint {path}: {exc}") from exc
            if model.orientation.value != o:
                raise CLIError(f"incompatible checkpoint {path}: header says {model.orientation.value}")
            getattr(ens, o).append(model)
    return ens


def cmd_segment(cfg):
    manifest = _load_manifest(cfg)
    ens = load_ensemble(cfg.checkpoints or cfg.out)
    weights = parse_weights(cfg.weights)
    if weights is not None and len(weights) != len(ens.models):
        raise CLIError(f"--weights has {len(weights)} values for {len(ens.models)} sub-models")
    vote = inference.VoteConfig(stride=cfg.stride, weights=weights, keep_largest_component=cfg.largest_component)
    _ensure_dir(os.path.join(cfg.out, "pred"))
    records = manifest.fold(cfg.test_fold)
    for n, rec in enumerate(records, 1):
        image, _ = manifest.load_pair(rec)
        res = inference.segment_ensemble(ens, image, vote)
        data_io.write_mask(os.path.join(cfg.out, "pred", f"{rec.image_id}.pgm"), res.mask)
        if cfg.per_model:
            for name, vmask in zip(ens.names, res.votes):
                d = os.path.join(cfg.out, "per_model", name)
                os.makedirs(d, exist_ok=True)
                data_io.write_mask(os.path.join(d, f"{rec.image_id}.pgm"), vmask)
        if cfg.save_scores:
            os.makedirs(os.path.join(cfg.out, "scores"), exist_ok=True)
            submodel.save_grid(os.path.join(cfg.out, "scores", f"{rec.image_id}.grid"), res.score)
        log.info("segmented %s (%d/%d)", rec.image_id, n, len(records))
    write_config_file(cfg, os.path.join(cfg.out, "run.cfg"))
    print(f"wrote {len(records)} predicted masks to {os.path.join(cfg.out, 'pred')}")
    return 0


def _score_dir(manifest, records, pred_dir, errors):
    out = []
    for rec in records:
        truth = data_io.read_mask(manifest.resolve(rec.mask_path))
        path = os.path.join(pred_dir, f"{rec.image_id}.pgm")
        try:
            pred = data_io.read_mask(path)
            out.append(metrics.evaluate(pred, truth, rec.image_id))
        except (OSError, ValueError) as exc:
            errors.append(f"{rec.image_id}: {exc}")
    return out


def cmd_evaluate(cfg):
    manifest = _load_manifest(cfg)
    pred_root = cfg.predictions or cfg.out
    records = manifest.fold(cfg.test_fold)
    errors = []
    recs = _score_dir(manifest, records, os.path.join(pred_root, "pred"), errors)
    _ensure_dir(cfg.out)
    with open(os.path.join(cfg.out, "metrics.csv"), "w", newline="\n") as fh:
        metrics.write_metrics_csv(recs, fh)
    if recs:
        summary = metrics.summarize(recs)
        with open(os.path.join(cfg.out, "summary.csv"), "w", newline="\n") as fh:
            fh.write("metric,mean\n")
            for k, v in summary["means"].items():
                fh.write(f"{k},{v!r}\n")
        with open(os.path.join(cfg.out, "dr_hist.csv"), "w", newline="\n") as fh:
            metrics.write_histogram_csv(summary["dr_histogram"], fh)
        print(" ".join(f"{k}={v:.4f}" for k, v in summary["means"].items()))
    per_model_root = os.path.join(pred_root, "per_model")
    if os.path.isdir(per_model_root):
        rows = []
        for name in sorted(os.listdir(per_model_root), key=_model_sort_key):
            sub = _score_dir(manifest, records, os.path.join(per_model_root, name), errors)
            if sub:
                rows.append((name, metrics.summarize(sub)["means"]))
        if recs:
            rows.append(("ensemble", metrics.summarize(recs)["means"]))
        with open(os.path.join(cfg.out, "per_model.csv"), "w", newline="\n") as fh:
            fh.write("model,dr,tpf,hd,cd\n")
            for name, m in rows:
                fh.write(f"{name},{m['dr']!r},{m['tpf']!r},{m['hd']!r},{m['cd']!r}\n")
    write_config_file(cfg, os.path.join(cfg.out, "run.cfg"))
    for e in errors:
        print(f"crossbar: error: {e}", file=sys.stderr)
    return 1 if errors else 0


def _model_sort_key(name):
    m = re.match(r"^(vertical|horizontal)_(\d+)$", name)
    return (0 if m.group(1) == "vertical" else 1, int(m.group(2))) if m else (2, name)


def cmd_inspect_sampling(cfg):
    if not cfg.image or not cfg.mask:
        raise CLIError("--image and --mask are required")
    image = data_io.normalize(data_io.read_image(cfg.image))
    mask = data_io.read_mask(cfg.mask)
    if image.shape != mask.shape:
        raise CLIError(f"image {image.shape} and mask {mask.shape} differ in size")
    if not mask.any():
        raise CLIError("mask has no foreground")
    params = sampling_params(cfg)
    stats = sampling.region_stats(mask)
    _ensure_dir(cfg.out)
    center = tuple(int(round(x)) for x in stats.centroid)
    for o in Orientation:
        specs = sampling.basic_sample(image.shape, mask, o, params)
        with open(os.path.join(cfg.out, f"basic_{o.value}.csv"), "w", newline="\n") as fh:
            sampling.write_specs_csv(specs, fh)
        cover = sampling.cover_resample(sampling.make_spec(o, *center, mask), mask, params)
        with open(os.path.join(cfg.out, f"cover_{o.value}.csv"), "w", newline="\n") as fh:
            sampling.write_specs_csv(cover, fh)
    with open(os.path.join(cfg.out, "rings.csv"), "w", newline="\n") as fh:
        fh.write("index,radius\n")
        for i, rad in enumerate(sampling.ring_radii(stats, params)):
            fh.write(f"{i},{rad!r}\n")
    write_config_file(cfg, os.path.join(cfg.out, "run.cfg"))
    print(f"centroid=({stats.centroid[0]:.3f},{stats.centroid[1]:.3f}) incircle={stats.incircle_radius:.3f} "
          f"circumcircle={stats.circumcircle_radius:.3f} outer={stats.outer_radius:.3f} area={stats.area}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "inspect-sampling": cmd_inspect_sampling,
}

_FLAGS = {
    "generate": ["subjects", "images_per_subject", "folds", "image_size", "diameter_min", "diameter_max", "noise_sigma", "distractors"],
    "train": ["manifest", "test_fold", "val_fraction", "beta", "tumor_fraction", "arc_step", "row_stride",
              "arc_step_factor", "rounds", "convergence_epsilon", "learning_rate", "max_epochs", "finetune_epochs",
              "batch_size", "dropout", "momentum", "weight_decay", "patience", "init_std", "max_patches", "max_val_patches",
              "resample_cap", "eval_locus"],
    "segment": ["manifest", "test_fold", "checkpoints", "weights", "stride", "save_scores", "per_model",
                "largest_component"],
    "evaluate": ["manifest", "test_fold", "predictions"],
    "inspect-sampling": ["image", "mask", "beta", "tumor_fraction", "arc_step", "row_stride"],
}


def _add_flag(parser, f):
    flag = "--" + f.name.replace("_", "-")
    kind = _field_type(f)
    if kind is bool:
        parser.add_argument(flag, type=_parse_bool, nargs="?", const=True, default=argparse.SUPPRESS,
                            metavar="BOOL")
    else:
        parser.add_argument(flag, type=kind, default=argparse.SUPPRESS, help=f"default: {f.default}")


def build_parser():
    by_name = {f.name: f for f in fields(RunConfig)}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value settings file")
    for name in ("seed", "threads", "out"):
        _add_flag(common, by_name[name])
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="crossbar", parents=[common],
                                     description="Crossbar patch CNN cascade for binary segmentation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in _FLAGS.items():
        p = sub.add_parser(cmd, parents=[common])
        for name in names:
            _add_flag(p, by_name[name])
    return parser


def main(argv=None):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    verbose = args.pop("verbose", 0)
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = merge_config(args, config_path)
    except (CLIError, OSError, ValueError, TypeError) as exc:
        print(f"crossbar: error: {exc}", file=sys.stderr)
        return 2
    try:
        if cfg.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(cfg.threads):
                return COMMANDS[command](cfg)
        return COMMANDS[command](cfg)
    except (CLIError, OSError, ValueError) as exc:
        print(f"crossbar: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
