"""Run configuration and the end-to-end stages behind the command line.

Every stage reads its inputs from files written by an earlier stage and
writes its own artifacts, so stages can be run one at a time or chained
by :func:`repro`. All randomness descends from ``RunConfig.seed``.

Directory layout under ``out_dir``::

    masks/<image_id>.pgm          PCA masks (also the training annotations)
    spectra.csv                   representative spectra of both classes
    models/                       model files, grid CSVs, training logs
    predictions/<model_id>/       prediction PGMs plus manifest.json
    reports/                      pixel and object report CSVs
"""
from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import detect, metrics, pca, sampling, softplsda, synth, unet
from .hypercube import (BandSet, ClassMask, Hypercube,
                        dark_background_mask, load_cube, load_mask, parse_envi_header,
                        restrict_bands, save_cube, save_mask)
from .preprocess import PRESETS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("synth", "augment", "unet_init", "unet_train")
BAND_CHOICES = ("full", "selection1", "selection2", "model")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class SynthConfig:
    backgrounds: tuple = synth.VEGETAL_BACKGROUNDS
    groups: tuple = synth.GROUP_TAGS
    height: int = 64
    width: int = 64
    n_blobs: int = 4
    noise_sigma: float = 0.01


@dataclass
class MaskConfig:
    threshold: float = 0.3
    probe_nm: float = 1000.0
    preprocess: str = "snv"
    n_pc: int = 3
    pc_index: int = 0
    polarity: str = "auto"


@dataclass
class SampleConfig:
    n_per_class: int = 200
    n_pc: int = 3
    alpha: float = 0.999
    train_groups: tuple = sampling.TRAIN_GROUPS
    test_groups: tuple = sampling.TEST_GROUPS
    n_folds: int = 3


@dataclass
class PlsdaConfig:
    preprocess: tuple = ("snv",)
    lv_min: int = 1
    lv_max: int = 10
    k_grid: tuple = softplsda.DEFAULT_K_GRID
    alpha: float = 0.999


@dataclass
class UnetConfig:
    # desk-scale network; the module default is 64 filters over 3 levels
    base_filters: int = 8
    depth: int = 2
    n_augment: int = 10
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 8
    batch_size: int = 4
    clip_norm: float = 5.0
    bands: str = "full"
    tile: int = 0


@dataclass
class EvaluateConfig:
    min_pixels: int = 50
    iou: float = 0.25
    truth: str = "synthetic"          # "synthetic" or "mask"


@dataclass
class RunConfig:
    seed: int = 0
    corpus_dir: str = "corpus"
    out_dir: str = "out"
    models: tuple = ("softplsda", "s-softplsda", "unet:full", "unet:selection2")
    synth: SynthConfig = field(default_factory=SynthConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    plsda: PlsdaConfig = field(default_factory=PlsdaConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def __post_init__(self):
        self.validate()

    @property
    def corpus(self) -> Path:
        return Path(self.corpus_dir)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def stage_seed(self, stage: str) -> int:
        """Child seed of ``stage``, spawned from the root seed."""
        children = np.random.SeedSequence(self.seed).spawn(len(STAGES))
        return int(children[STAGES.index(stage)].generate_state(1)[0])

    def validate(self) -> None:
        def frac(name, v):
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")

        def pos(name, v):
            if not v >= 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")

        frac("mask.threshold", self.mask.threshold)
        frac("sample.alpha", self.sample.alpha)
        frac("plsda.alpha", self.plsda.alpha)
        frac("evaluate.iou", self.evaluate.iou)
        for name, v in (("sample.n_per_class", self.sample.n_per_class),
                        ("sample.n_folds", self.sample.n_folds - 1),
                        ("evaluate.min_pixels", self.evaluate.min_pixels),
                        ("unet.base_filters", self.unet.base_filters),
                        ("unet.depth", self.unet.depth),
                        ("unet.batch_size", self.unet.batch_size),
                        ("plsda.lv_min", self.plsda.lv_min)):
            pos(name, v)
        if self.plsda.lv_max < self.plsda.lv_min:
            raise ConfigError("plsda.lv_max is below plsda.lv_min")
        if not self.unet.lr > 0:
            raise ConfigError("unet.lr must be positive")
        if self.synth.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be >= 0")
        for p in self.plsda.preprocess:
            if p not in PRESETS:
                raise ConfigError(f"unknown preprocessing preset {p!r}; "
                                  f"choose from {', '.join(PRESETS)}")
        if self.mask.preprocess not in PRESETS:
            raise ConfigError(f"unknown preprocessing preset {self.mask.preprocess!r}")
        if self.mask.polarity not in ("auto", "above", "below"):
            raise ConfigError("mask.polarity must be auto, above or below")
        if self.evaluate.truth not in ("synthetic", "mask"):
            raise ConfigError("evaluate.truth must be 'synthetic' or 'mask'")
        for b in self.synth.backgrounds:
            if b not in synth.BACKGROUND_LIBRARY:
                raise ConfigError(f"unknown background {b!r}")
        for g in (*self.synth.groups, *self.sample.train_groups, *self.sample.test_groups):
            if g not in sampling.GROUPS:
                raise ConfigError(f"unknown group tag {g!r}")
        for m in self.models:
            parse_model_name(m)


_SECTIONS = {"synth": SynthConfig, "mask": MaskConfig, "sample": SampleConfig,
             "plsda": PlsdaConfig, "unet": UnetConfig, "evaluate": EvaluateConfig}


def _coerce(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown key {where}.{k}")
        default = known[k].default
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{where}.{k} must be a list")
            v = tuple(v)
        elif isinstance(default, bool) or default is None:
            pass
        elif isinstance(default, int) and not isinstance(v, int):
            raise ConfigError(f"{where}.{k} must be an integer")
        elif isinstance(default, float):
            if not isinstance(v, (int, float)):
                raise ConfigError(f"{where}.{k} must be a number")
            v = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{where}.{k} must be a string")
        out[k] = v
    return out


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    top = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            section = d.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            top[name] = cls(**_coerce(cls, section, name))
    plain = {f.name: f.default for f in fields(RunConfig) if f.name not in _SECTIONS}
    coerced = {}
    for k, v in d.items():
        if k not in plain:
            raise ConfigError(f"unknown top-level key {k!r}")
        default = plain[k]
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{k} must be a list")
            v = tuple(v)
        elif isinstance(default, int) and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{k} must be an integer")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{k} must be a string")
        coerced[k] = v
    return RunConfig(**coerced, **top)


def load_config(path=None, **overrides) -> RunConfig:
    """RunConfig from a TOML file (defaults when ``path`` is None).

    ``overrides`` replace top-level keys (seed, corpus_dir, out_dir) after
    the file is read.
    """
    d = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    d.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(d)


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)

    def lists(v):
        if isinstance(v, dict):
            return {k: lists(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return [lists(x) for x in v]
        return v
    return lists(d)


# ------------------------------------------------------------------ models

def parse_model_name(name: str) -> tuple[str, str]:
    """``"softplsda"``, ``"s-softplsda"`` or ``"unet:<bands>"`` -> (kind, bands)."""
    if name in ("softplsda", "s-softplsda"):
        return name, "full" if name == "softplsda" else "model"
    if name.startswith("unet:"):
        bands = name.split(":", 1)[1]
        if not bands or (bands not in BAND_CHOICES and not bands.startswith("file=")):
            raise ConfigError(f"unknown band choice {bands!r} in model {name!r}")
        return "unet", bands
    raise ConfigError(f"unknown model {name!r}")


def model_id(kind: str, bands: str) -> str:
    if kind != "unet":
        return kind
    return "unet-" + (Path(bands[5:]).stem if bands.startswith("file=") else bands)


# ------------------------------------------------------------------ corpus

def cube_paths(corpus_dir) -> list[Path]:
    d = Path(corpus_dir) / "cubes"
    paths = sorted(p.with_suffix("") for p in d.glob("*.hdr"))
    if not paths:
        raise FileNotFoundError(f"no cubes under {d}")
    return paths


def truth_path(corpus_dir, image_id: str) -> Path:
    return Path(corpus_dir) / "truth" / f"{image_id}.pgm"


def mask_path(out_dir, image_id: str) -> Path:
    return Path(out_dir) / "masks" / f"{image_id}.pgm"


def exclusion_for(hc: Hypercube, cfg: RunConfig) -> ClassMask:
    return dark_background_mask(hc, cfg.mask.threshold, cfg.mask.probe_nm)


def run_synth(cfg: RunConfig) -> list[Path]:
    s = cfg.synth
    specs = synth.corpus_specs(cfg.stage_seed("synth"), s.backgrounds, s.groups,
                               height=s.height, width=s.width, n_blobs=s.n_blobs,
                               noise_sigma=s.noise_sigma)
    written = []
    for spec in specs:
        hc, truth = synth.generate_scene(spec)
        written.append(save_cube(hc, cfg.corpus / "cubes" / spec.image_id))
        save_mask(truth, truth_path(cfg.corpus, spec.image_id))
    log.info("synth: %d scenes in %s", len(written), cfg.corpus)
    return written


def run_mask(cfg: RunConfig) -> list[Path]:
    m = cfg.mask
    written = []
    for p in cube_paths(cfg.corpus):
        hc = load_cube(p)
        mask = pca.mask_by_score(hc, exclusion_for(hc, cfg), PRESETS[m.preprocess], m.n_pc,
                                 m.pc_index, polarity=m.polarity)
        written.append(save_mask(mask, mask_path(cfg.out, hc.image_id)))
    log.info("mask: %d masks", len(written))
    return written


def _annotated(cfg: RunConfig):
    for p in cube_paths(cfg.corpus):
        hc = load_cube(p)
        mp = mask_path(cfg.out, hc.image_id)
        if not mp.is_file():
            raise FileNotFoundError(f"mask for {hc.image_id!r} not found; run `mask` first")
        yield hc, load_mask(mp)


def run_sample(cfg: RunConfig) -> Path:
    s = cfg.sample
    table = sampling.assemble_table(list(_annotated(cfg)), s.n_per_class, s.n_pc, s.alpha)
    path = sampling.write_table_csv(table, cfg.out / "spectra.csv")
    log.info("sample: %d spectra", len(table))
    return path


def _train_table(cfg: RunConfig):
    p = cfg.out / "spectra.csv"
    if not p.is_file():
        raise FileNotFoundError(f"{p} not found; run `sample` first")
    table = sampling.read_table_csv(p)
    train, _ = sampling.split_by_group(table, cfg.sample.train_groups, cfg.sample.test_groups)
    if len(train) == 0:
        raise ConfigError("no training spectra in the configured train groups")
    return train


def run_train_plsda(cfg: RunConfig, sparse: bool) -> Path:
    train = _train_table(cfg)
    pc = cfg.plsda
    specs = [PRESETS[name] for name in pc.preprocess]
    folds = sampling.venetian_blinds(len(train), cfg.sample.n_folds)
    grid, model = softplsda.grid_search(
        train, folds, specs, range(pc.lv_min, pc.lv_max + 1),
        pc.k_grid if sparse else None, pc.alpha)
    name = "s-softplsda" if sparse else "softplsda"
    d = cfg.out / "models"
    grid.write_csv(d / f"{name}_grid.csv")
    softplsda.write_regression_vector(model, d / f"{name}_coefficients.csv")
    path = softplsda.save_model(model, d / f"{name}.json")
    c = grid.chosen
    log.info("train %s: %s, %d LV, %d variables/LV, CV EFF %s", name, c["preprocess"],
             c["n_lv"], c["k_per_lv"], metrics.pct(c["stats"]["EFF"]))
    return path


def resolve_bands(choice: str, wavelengths, out_dir=None) -> BandSet | None:
    """Band set for a choice: full (None), a preset, the s-Soft PLS-DA
    model's selection, or ``file=<path>`` with one index per line."""
    if choice == "full":
        return None
    if choice == "selection1":
        return softplsda.selection_1(wavelengths)
    if choice == "selection2":
        return softplsda.selection_2(wavelengths)
    if choice == "model":
        p = Path(out_dir or ".") / "models" / "s-softplsda.json"
        if not p.is_file():
            raise FileNotFoundError(f"{p} not found; train splsda first")
        return softplsda.selected_bands(softplsda.load_model(p))
    if choice.startswith("file="):
        return read_bands(choice[5:])
    if Path(choice).is_file():
        return read_bands(choice)
    raise ConfigError(f"unknown band choice {choice!r}")


def write_bands(bands: BandSet, wavelengths, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "wavelength_nm"])
        for i in bands.indices:
            w.writerow([i, f"{wavelengths[i]:g}"])
    return p


def read_bands(path) -> BandSet:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"band file not found: {p}")
    idx = []
    for line in p.read_text().splitlines():
        head = line.split(",")[0].strip()
        if head and head != "index":
            try:
                idx.append(int(head))
            except ValueError:
                raise ConfigError(f"{p}: bad band index {head!r}") from None
    if not idx:
        raise ConfigError(f"{p}: no band indices")
    return BandSet(tuple(idx))


def run_train_unet(cfg: RunConfig, bands: str | None = None) -> Path:
    uc = cfg.unet
    choice = bands or uc.bands
    train_groups = set(cfg.sample.train_groups)
    pairs = [(hc, m) for hc, m in _annotated(cfg) if hc.meta.get("group") in train_groups]
    if not pairs:
        raise ConfigError("no training images in the configured train groups")
    bs = resolve_bands(choice, pairs[0][0].wavelengths, cfg.out)
    if bs is not None:
        pairs = [(restrict_bands(hc, bs), m) for hc, m in pairs]
    dataset = unet.augment_dataset(pairs, uc.n_augment, cfg.stage_seed("augment"))
    spec = unet.UNetSpec(pairs[0][0].n_bands, uc.base_filters, uc.depth)
    model = unet.build_unet(spec, cfg.stage_seed("unet_init"))
    if bs is not None:
        model = replace(model, bands=bs.indices)
    tc = unet.TrainConfig(uc.lr, uc.momentum, uc.epochs, uc.batch_size,
                          cfg.stage_seed("unet_train"), None, uc.clip_norm)
    model = unet.train(model, dataset, tc,
                       progress=lambda e, l, a: log.info("unet epoch %d loss %.4f acc %.4f", e, l, a))
    mid = model_id("unet", choice)
    d = cfg.out / "models"
    unet.write_training_log(model, d / f"{mid}_log.csv")
    return unet.save_model(model, d / f"{mid}.bin")


# -------------------------------------------------------------- prediction

def load_any_model(path):
    """A Soft PLS-DA JSON model or a U-Net binary model."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model not found: {p}")
    with p.open("rb") as fh:
        head = fh.read(len(unet.MAGIC))
    if head == unet.MAGIC:
        return unet.load_model(p)
    try:
        return softplsda.load_model(p)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ConfigError(f"{p}: not a model file") from None


def _model_meta(model, path) -> tuple[str, str]:
    stem = Path(path).stem
    if isinstance(model, unet.UNetModel):
        return stem, "full" if model.bands is None else stem.split("-", 1)[-1]
    sparse = bool(model.pls.sparsity)
    return stem, f"{len(softplsda.selected_bands(model))} vars" if sparse else "full"


def predict_one(model, hc: Hypercube, cfg: RunConfig, mid: str = ""):
    excl = exclusion_for(hc, cfg)
    if isinstance(model, unet.UNetModel):
        x = hc if model.bands is None else restrict_bands(hc, model.bands)
        return unet.predict_image(model, x, excl, cfg.unet.tile or None, mid or "unet")
    return softplsda.predict_image(model, hc, excl, model_id=mid or "softplsda")


def run_predict(cfg: RunConfig, model_path, cubes=None) -> Path:
    """Prediction PGMs for ``cubes`` (default: the test-group cubes)."""
    model = load_any_model(model_path)
    mid, bands = _model_meta(model, model_path)
    if cubes is None:
        test = set(cfg.sample.test_groups)
        cubes = [p for p in cube_paths(cfg.corpus) if _group_of(p) in test]
    outdir = cfg.out / "predictions" / mid
    manifest = {"model": mid, "bands": bands, "images": {}}
    for p in cubes:
        hc = load_cube(p)
        pred = predict_one(model, hc, cfg, mid)
        pred.save(outdir / f"{hc.image_id}.pgm")
        manifest["images"][hc.image_id] = hc.meta.get("background", "")
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    log.info("predict %s: %d images", mid, len(cubes))
    return outdir


def _group_of(cube_path) -> str:
    header = parse_envi_header(Path(cube_path).with_suffix(".hdr").read_text())
    return header.get("group", "")


# -------------------------------------------------------------- evaluation

def _truth_for(cfg: RunConfig, image_id: str, truth_dir=None) -> ClassMask:
    if truth_dir is not None:
        p = Path(truth_dir) / f"{image_id}.pgm"
    elif cfg.evaluate.truth == "synthetic":
        p = truth_path(cfg.corpus, image_id)
    else:
        p = mask_path(cfg.out, image_id)
    if not p.is_file():
        raise FileNotFoundError(f"ground truth for {image_id!r} not found at {p}")
    return load_mask(p)


def run_evaluate(cfg: RunConfig, level: str, prediction_dirs=None, truth_dir=None,
                 name: str | None = None) -> metrics.DetectionReport:
    """Report over every prediction directory; also written to reports/."""
    if level not in ("pixel", "object"):
        raise ConfigError(f"level must be pixel or object, got {level!r}")
    if prediction_dirs is None:
        root = cfg.out / "predictions"
        prediction_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not prediction_dirs:
        raise FileNotFoundError("no prediction directories to evaluate")
    results, matches = [], []
    for d in prediction_dirs:
        d = Path(d)
        mf = d / "manifest.json"
        if not mf.is_file():
            raise FileNotFoundError(f"{mf} not found")
        manifest = json.loads(mf.read_text())
        for image_id in sorted(manifest["images"]):
            pred = detect.PredictionImage.load(d / f"{image_id}.pgm", image_id, manifest["model"])
            truth = _truth_for(cfg, image_id, truth_dir)
            if level == "pixel":
                counts = metrics.pixel_confusion(pred, truth)
            else:
                m = detect.evaluate_objects(pred, truth, cfg.evaluate.min_pixels, cfg.evaluate.iou)
                matches.append(m)
                counts = metrics.object_confusion(m)
            results.append({"model": manifest["model"], "bands": manifest["bands"],
                            "background": manifest["images"][image_id], "counts": counts})
    rep = metrics.report(results, level=level)
    out = cfg.out / "reports"
    rep.write_csv(out / f"{name or level}.csv")
    if matches:
        detect.write_matches_csv(matches, out / f"{name or level}_matches.csv")
    return rep


# ------------------------------------------------------------------- repro

def repro(cfg: RunConfig) -> dict:
    """Synthetic corpus to reports in one go; returns the report paths."""
    run_synth(cfg)
    run_mask(cfg)
    run_sample(cfg)
    kinds = [parse_model_name(m) for m in cfg.models]
    paths = []
    if any(k == "softplsda" for k, _ in kinds):
        paths.append(run_train_plsda(cfg, sparse=False))
    if any(k == "s-softplsda" for k, _ in kinds) or any(b == "model" for k, b in kinds if k == "unet"):
        p = run_train_plsda(cfg, sparse=True)
        if any(k == "s-softplsda" for k, _ in kinds):
            paths.append(p)
    for k, b in kinds:
        if k == "unet":
            paths.append(run_train_unet(cfg, b))
    for p in paths:
        run_predict(cfg, p)
    pixel = run_evaluate(cfg, "pixel")
    obj = run_evaluate(cfg, "object")
    return {"pixel": cfg.out / "reports" / "pixel.csv",
            "object": cfg.out / "reports" / "object.csv",
            "pixel_report": pixel, "object_report": obj}
