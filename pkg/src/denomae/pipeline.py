"""Dataset generation, pretraining, fine-tuning and the evaluation protocols."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import rng as _rng
from .constellation import DecayConfig, GridSpec, render_rgb, write_ppm
from .model import (
    MODALITIES,
    ConfigError,
    ConfigMismatchError,
    DenoMAE,
    DenoMAEConfig,
    batch_plans,
    denoise,
    patchify,
    pretrain_loss,
)
from .modulation import SCHEME_NAMES, BasebandSignal, apply_awgn, get_scheme, modulate, resample_to_base, signal_to_image
from .numerics import Tape, adam_step, adamw_step, dtnsr, no_grad, ops

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

# Reference values reported for the full-scale model; carried as metadata only.
REFERENCE_SNR_ACCURACY = {-10.0: 77.50, 10.0: 84.30}
REFERENCE_ABLATION_ACCURACY = (81.30, 81.90, 83.20, 83.30, 83.50)
ABLATION_SUBSETS: tuple[tuple[str, ...], ...] = (
    ("clean_constellation",),
    ("noisy_constellation", "clean_constellation"),
    ("noisy_constellation", "clean_constellation", "clean_signal"),
    ("noisy_constellation", "clean_constellation", "noisy_signal", "clean_signal"),
    MODALITIES,
)
WELL_SEPARATED = ("bpsk", "qpsk", "16qam", "4fsk")
# Sample counts per split for each preset; the held-out size at full scale is our choice.
SPLIT_SIZES = {
    "desk": {"pretrain": 512, "train": 256, "test": 128},
    "full": {"pretrain": 10_000, "train": 1_000, "test": 1_000},
}


def default_samples(preset: str, split: str) -> int:
    sizes = SPLIT_SIZES[preset]
    return sizes.get(split, sizes["pretrain"])


class DataError(ValueError):
    pass


class NumericAbort(FloatingPointError):
    pass


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class GenerationConfig:
    n_samples: int = 512
    schemes: tuple[str, ...] = SCHEME_NAMES
    snr_min: float = -10.0
    snr_max: float = 10.0
    snr_values: tuple[float, ...] | None = None
    image_side: int = 32
    extent: float = 3.5
    alphas: tuple[float, float, float] = (20.0, 40.0, 80.0)
    clip_policy: str = "clamp"
    seed: int = 0
    split: str = "pretrain"

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(s.lower() for s in self.schemes))
        if self.snr_values is not None:
            object.__setattr__(self, "snr_values", tuple(float(v) for v in self.snr_values))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.n_samples <= 0:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        if not self.schemes:
            raise ConfigError("empty scheme list")
        for s in self.schemes:
            get_scheme(s)
        if self.snr_values is None and self.snr_min > self.snr_max:
            raise ConfigError(f"snr_min {self.snr_min} exceeds snr_max {self.snr_max}")
        if self.snr_values is not None and not self.snr_values:
            raise ConfigError("empty snr_values")
        GridSpec(self.extent, self.image_side, self.clip_policy)
        DecayConfig(self.alphas)

    @classmethod
    def full(cls, **kw) -> "GenerationConfig":
        return cls(**{"n_samples": 10_000, "image_side": 224, **kw})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schemes"] = list(self.schemes)
        d["alphas"] = list(self.alphas)
        d["snr_values"] = None if self.snr_values is None else list(self.snr_values)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenerationConfig":
        d = dict(d)
        d["schemes"] = tuple(d.get("schemes", SCHEME_NAMES))
        if d.get("snr_values") is not None:
            d["snr_values"] = tuple(d["snr_values"])
        if "alphas" in d:
            d["alphas"] = tuple(d["alphas"])
        return cls(**d)


@dataclass(frozen=True)
class OptimConfig:
    name: str = "adamw"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def step(self, params) -> None:
        if self.name == "adamw":
            adamw_step(params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)
        elif self.name == "adam":
            adam_step(params, self.lr, self.beta1, self.beta2, self.eps)
        else:
            raise ConfigError(f"unknown optimizer {self.name!r}")


@dataclass(frozen=True)
class RunConfig:
    model: DenoMAEConfig = field(default_factory=DenoMAEConfig.desk)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int | None = None
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")

    @classmethod
    def full_pretrain(cls, **kw) -> "RunConfig":
        return cls(**{"model": DenoMAEConfig.full(), "optimizer": OptimConfig("adamw", 1e-4),
                      "epochs": 100, "batch_size": 64, **kw})

    @classmethod
    def full_finetune(cls, **kw) -> "RunConfig":
        return cls(**{"model": DenoMAEConfig.full(), "optimizer": OptimConfig("adam", 1e-4, weight_decay=0.0),
                      "epochs": 150, "batch_size": 32, **kw})

    @classmethod
    def desk_pretrain(cls, **kw) -> "RunConfig":
        return cls(**{"model": DenoMAEConfig.desk(), "optimizer": OptimConfig("adamw", 1e-3),
                      "epochs": 20, "batch_size": 32, **kw})

    @classmethod
    def desk_finetune(cls, **kw) -> "RunConfig":
        return cls(**{"model": DenoMAEConfig.desk(), "optimizer": OptimConfig("adam", 5e-4, weight_decay=0.0),
                      "epochs": 15, "batch_size": 32, **kw})

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optimizer": dataclasses.asdict(self.optimizer),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "max_steps": self.max_steps,
            "freeze_encoder": self.freeze_encoder,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = DenoMAEConfig.from_dict(d["model"])
        if "optimizer" in d:
            d["optimizer"] = OptimConfig(**d["optimizer"])
        return cls(**d)


# ------------------------------------------------------------------ samples


def make_sample(scheme: str, snr_db: float, seed: int, side: int = 32, grid: GridSpec | None = None,
                decay: DecayConfig | None = None) -> dict[str, np.ndarray]:
    """All five aligned modality images [3, side, side] for one draw."""
    grid = grid or GridSpec(resolution=side)
    decay = decay or DecayConfig()
    base = resample_to_base(modulate(scheme, seed=seed))
    # Decimation filtering can shave a little power; the plane is scaled for unit power.
    x = base.samples / math.sqrt(base.power)
    draw = apply_awgn(BasebandSignal(x, base.scheme, seed), snr_db, seed)
    return {
        "noisy_constellation": render_rgb(draw.noisy.samples, grid, decay),
        "clean_constellation": render_rgb(draw.clean.samples, grid, decay),
        "noisy_signal": signal_to_image(draw.noisy.samples.real, side),
        "clean_signal": signal_to_image(draw.clean.samples.real, side),
        "noise": signal_to_image(draw.noise.real, side),
    }


@dataclass
class Dataset:
    """In-memory samples; ``images`` is [K, 5, 3, H, W] in canonical modality order."""

    ids: list[str]
    labels: list[str]
    snr_db: np.ndarray
    seeds: list[int]
    images: np.ndarray
    split: str = "pretrain"

    def __len__(self) -> int:
        return len(self.ids)

    def modality_images(self, modalities: Sequence[str]) -> np.ndarray:
        idx = [MODALITIES.index(m) for m in modalities]
        return self.images[:, idx]

    def label_indices(self, classes: Sequence[str]) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(classes)}
        bad = sorted({lab for lab in self.labels if lab not in lookup})
        if bad:
            raise DataError(f"labels {bad} outside class set {list(classes)}")
        return np.array([lookup[lab] for lab in self.labels], dtype=np.int64)

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = list(index)
        return Dataset([self.ids[i] for i in index], [self.labels[i] for i in index],
                       self.snr_db[index], [self.seeds[i] for i in index], self.images[index], self.split)


def _record_plan(cfg: GenerationConfig) -> list[tuple[str, str, float, int]]:
    rows = []
    for i in range(cfg.n_samples):
        gen = _rng.stream(cfg.seed, cfg.split, "record", i)
        scheme = cfg.schemes[int(gen.integers(len(cfg.schemes)))]
        if cfg.snr_values is not None:
            snr = cfg.snr_values[int(gen.integers(len(cfg.snr_values)))]
        else:
            snr = float(gen.uniform(cfg.snr_min, cfg.snr_max))
        snr = round(snr, 6)
        rows.append((f"{cfg.split}-{i:06d}", scheme, snr, _rng.derive_seed(cfg.seed, cfg.split, "sample", i)))
    return rows


def _workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("DENOMAE_THREADS")
    return max(1, int(env)) if env else 1


def generate_arrays(cfg: GenerationConfig, workers: int | None = None) -> Dataset:
    """Generate a dataset in memory (no files)."""
    rows = _record_plan(cfg)
    grid = GridSpec(cfg.extent, cfg.image_side, cfg.clip_policy)
    decay = DecayConfig(cfg.alphas)

    def one(row):
        _, scheme, snr, seed = row
        sample = make_sample(scheme, snr, seed, cfg.image_side, grid, decay)
        return np.stack([sample[m] for m in MODALITIES])

    n = _workers(workers)
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            images = list(pool.map(one, rows))
    else:
        images = [one(r) for r in rows]
    return Dataset([r[0] for r in rows], [r[1] for r in rows], np.array([r[2] for r in rows]),
                   [r[3] for r in rows], np.stack(images).astype(np.float32), cfg.split)


@dataclass
class DatasetManifest:
    version: int
    split: str
    generation: dict
    records: list[dict]
    root: Path | None = None

    def write(self, path: str | os.PathLike) -> None:
        header = {"kind": "header", "version": self.version, "split": self.split, "generation": self.generation}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        if not lines:
            raise DataError(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.get("kind") != "header" or header.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}: missing or unsupported manifest header")
        records = [json.loads(line) for line in lines[1:] if line.strip()]
        ids = [r["sample_id"] for r in records]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate sample ids")
        return cls(header["version"], header["split"], header["generation"], records, path.parent)

    def load(self, verify: bool = True) -> Dataset:
        images = []
        for rec in self.records:
            mods = []
            for m in MODALITIES:
                f = self.root / rec["files"][m]
                try:
                    mods.append(dtnsr.load(f))
                except (OSError, dtnsr.TensorFormatError) as exc:
                    raise DataError(f"{f}: {exc}") from None
            images.append(np.stack(mods))
        return Dataset([r["sample_id"] for r in self.records], [r["label"] for r in self.records],
                       np.array([r["snr_db"] for r in self.records], dtype=np.float64),
                       [int(r["seed"]) for r in self.records], np.stack(images), self.split)


def generate_dataset(cfg: GenerationConfig, out_dir: str | os.PathLike, workers: int | None = None,
                     overwrite: bool = False) -> DatasetManifest:
    """Generate samples, write five DTNSR tensors each plus ``manifest.jsonl``."""
    out = Path(out_dir)
    if (out / MANIFEST_NAME).exists() and not overwrite:
        raise FileExistsError(f"{out / MANIFEST_NAME} exists")
    data = generate_arrays(cfg, workers)
    records = []
    for i, sid in enumerate(data.ids):
        folder = Path("tensors") / sid
        (out / folder).mkdir(parents=True, exist_ok=True)
        files = {}
        for j, m in enumerate(MODALITIES):
            rel = folder / f"{m}.dtnsr"
            dtnsr.save(out / rel, data.images[i, j])
            files[m] = rel.as_posix()
        records.append({"sample_id": sid, "label": data.labels[i], "snr_db": float(data.snr_db[i]),
                        "seed": data.seeds[i], "files": files})
    manifest = DatasetManifest(MANIFEST_VERSION, cfg.split, cfg.to_dict(), records, out)
    manifest.write(out / MANIFEST_NAME)
    return manifest


def assert_disjoint(a: Dataset, b: Dataset) -> None:
    """Refuse train/test pairs that share sample ids or seeds."""
    if set(a.ids) & set(b.ids) or set(a.seeds) & set(b.seeds):
        raise DataError(f"splits {a.split!r} and {b.split!r} overlap")


# ------------------------------------------------------------------ metrics


class MetricsLog:
    """Append-only JSON-lines log with monotone step numbers."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, **record) -> None:
        step = record.get("step")
        last = next((r["step"] for r in reversed(self.records) if "step" in r), None)
        if step is not None and last is not None and step < last:
            raise ValueError(f"step {step} after {last}")
        record["time"] = time.time()
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]

    def without_time(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "time"} for r in self.records]


# ---------------------------------------------------------------- training


@dataclass
class PretrainResult:
    model: DenoMAE
    metrics: MetricsLog
    checkpoint: Path | None
    steps: int


def _batches(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = _rng.stream(seed, "perm", epoch).permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


def pretrain(data: Dataset, run: RunConfig, out_dir: str | os.PathLike | None = None,
             resume: str | os.PathLike | None = None, metrics: MetricsLog | None = None) -> PretrainResult:
    """Masked multimodal pretraining with AdamW (or the configured optimizer).

    Every step's batch order, masks and parameter updates derive from
    ``run.seed`` and the step counter, so a run resumed from a checkpoint
    matches the uninterrupted run bit for bit.
    """
    if data.split != "pretrain":
        raise DataError(f"pretraining needs the pretrain split, got {data.split!r}")
    cfg = run.model
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics = metrics or MetricsLog(out / "metrics.jsonl" if out else None)
    start = 0
    if resume is not None:
        model, state = ckpt.load(resume)
        if model.config != cfg:
            raise ConfigMismatchError("checkpoint config does not match run config")
        start = int(state.get("step", 0))
    else:
        model = DenoMAE(cfg, seed=run.seed)

    images = data.modality_images(cfg.modalities)
    patches = np.stack([patchify(images[:, j], cfg.patch_size) for j in range(cfg.n_modalities)], axis=1)
    steps_per_epoch = math.ceil(len(data) / run.batch_size)
    total = run.epochs * steps_per_epoch
    if run.max_steps is not None:
        total = min(total, run.max_steps)
    params = model.parameters()
    ckpt_path = None

    step = start
    while step < total:
        epoch, pos = divmod(step, steps_per_epoch)
        idx = _batches(len(data), run.batch_size, run.seed, epoch)[pos]
        xb = [patches[idx, j] for j in range(cfg.n_modalities)]
        plans = batch_plans(cfg, len(idx), _rng.stream(run.seed, "mask", step))
        try:
            with Tape() as tape:
                preds = model.forward_pretrain(xb, plans)
                loss, parts = pretrain_loss(preds, xb, plans, cfg.modality_weights)
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError("non-finite loss")
            model.zero_grad()
            tape.backward(loss)
        except FloatingPointError as exc:
            bad = {data.ids[i]: data.seeds[i] for i in idx}
            metrics.append(kind="abort", step=step, reason=str(exc), samples=bad)
            raise NumericAbort(f"step {step}: {exc}; batch samples/seeds {bad}") from exc
        run.optimizer.step(params)
        step += 1
        metrics.append(kind="train", step=step, epoch=epoch, loss=float(loss.data),
                       losses=dict(zip(cfg.modalities, parts)), seed=run.seed)
        if out and run.checkpoint_every and step % run.checkpoint_every == 0:
            ckpt.save(out / f"step{step:07d}.dmae", model, {"step": step, "kind": "pretrain"})
    if out:
        ckpt_path = out / "pretrain.dmae"
        ckpt.save(ckpt_path, model, {"step": step, "kind": "pretrain"})
    return PretrainResult(model, metrics, ckpt_path, step)


@dataclass
class FinetuneResult:
    model: DenoMAE
    metrics: MetricsLog
    classes: tuple[str, ...]
    test_accuracy: float
    history: list[dict]
    checkpoint: Path | None = None


def predict(model: DenoMAE, images: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(np.argmax(model.forward_classify(images[i:i + batch]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: DenoMAE, data: Dataset, classes: Sequence[str]) -> float:
    """Percentage of correct predictions on noisy-constellation images."""
    if len(data) == 0:
        raise DataError("empty evaluation set")
    y = data.label_indices(classes)
    pred = predict(model, data.modality_images(["noisy_constellation"])[:, 0])
    return 100.0 * float(np.mean(pred == y))


def classifier_from(pretrained: DenoMAE | None, run: RunConfig, n_classes: int) -> DenoMAE:
    """Fresh model with the run's classifier head; encoder copied when pretrained."""
    base = pretrained.config if pretrained is not None else run.model
    cls_cfg = dataclasses.replace(run.model.classifier, n_classes=n_classes)
    cfg = dataclasses.replace(base, classifier=cls_cfg)
    model = DenoMAE(cfg, seed=run.seed)
    if pretrained is not None:
        m = model.classify_modality
        ckpt.copy_params(pretrained, model, (f"embed.{m}.", "enc."))
    return model


def finetune(train: Dataset, test: Dataset, run: RunConfig, pretrained: DenoMAE | None,
             classes: Sequence[str], out_dir: str | os.PathLike | None = None,
             metrics: MetricsLog | None = None) -> FinetuneResult:
    """Supervised training of encoder + head on noisy constellations (Adam, cross-entropy).

    ``pretrained=None`` is the from-scratch baseline: identical protocol,
    random initialisation.
    """
    assert_disjoint(train, test)
    classes = tuple(classes)
    y_train = train.label_indices(classes)
    test.label_indices(classes)
    model = classifier_from(pretrained, run, len(classes))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics = metrics or MetricsLog(out / "metrics.jsonl" if out else None)
    m = model.classify_modality
    prefixes = ("head.",) if run.freeze_encoder else (f"embed.{m}.", "enc.", "head.")
    params = model.parameters(prefixes)
    x_train = train.modality_images(["noisy_constellation"])[:, 0]
    history = []
    step = 0
    for epoch in range(run.epochs):
        correct = 0
        for idx in _batches(len(train), run.batch_size, run.seed, epoch):
            with Tape() as tape:
                logits = model.forward_classify(x_train[idx], training=True,
                                                rng=_rng.stream(run.seed, "dropout", step))
                loss = ops.cross_entropy(logits, y_train[idx])
            model.zero_grad()
            tape.backward(loss)
            run.optimizer.step(params)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y_train[idx]))
            step += 1
            metrics.append(kind="train", step=step, epoch=epoch, loss=float(loss.data), seed=run.seed)
        row = {"epoch": epoch, "train_accuracy": 100.0 * correct / len(train),
               "test_accuracy": accuracy(model, test, classes)}
        history.append(row)
        metrics.append(kind="epoch", step=step, **row)
        if run.max_steps is not None and step >= run.max_steps:
            break
    path = None
    if out:
        path = out / "classifier.dmae"
        ckpt.save(path, model, {"step": step, "kind": "classifier", "classes": list(classes)})
    return FinetuneResult(model, metrics, classes, history[-1]["test_accuracy"], history, path)


# -------------------------------------------------------------- evaluation


def write_tsv(path: str | os.PathLike, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r.get(c)) for c in columns) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def evaluate_snr_sweep(model: DenoMAE, classes: Sequence[str], snrs: Iterable[float], n_per_snr: int = 128,
                       gen: GenerationConfig | None = None, seed: int = 1_000_003,
                       exclude: Sequence[Dataset] = (), out_path: str | os.PathLike | None = None) -> list[dict]:
    """Accuracy on a freshly generated test set per SNR (seeds disjoint from ``exclude``)."""
    gen = gen or GenerationConfig(schemes=tuple(classes))
    rows = []
    for snr in snrs:
        cfg = dataclasses.replace(gen, n_samples=n_per_snr, snr_values=(float(snr),), seed=seed,
                                  split=f"sweep{float(snr):+.1f}")
        test = generate_arrays(cfg)
        if len(test) == 0:
            raise DataError(f"empty test set at {snr} dB")
        for other in exclude:
            assert_disjoint(other, test)
        rows.append({"snr_db": float(snr), "accuracy": accuracy(model, test, classes), "n": len(test),
                     "reference_accuracy": REFERENCE_SNR_ACCURACY.get(float(snr))})
    if out_path:
        write_tsv(out_path, rows, ["snr_db", "accuracy", "n", "reference_accuracy"])
    return rows


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def evaluate_extrapolation(model: DenoMAE, snrs: Iterable[float], n: int = 64, gen: GenerationConfig | None = None,
                           seed: int = 2_000_003, train_snr_min: float = -10.0, input_mask_ratio: float = 0.0,
                           out_dir: str | os.PathLike | None = None, n_images: int = 3) -> list[dict]:
    """Denoise fresh samples at SNRs below the training range.

    Noisy constellation and noisy signal are visible; every clean modality
    and the noise modality are fully masked. Reports the mean MSE of the
    denoised and of the raw noisy constellation against the clean one, and
    the fraction of samples where denoising helps.
    """
    if "clean_constellation" not in model.config.modalities:
        raise ConfigError("model has no clean-constellation decoder")
    gen = gen or GenerationConfig()
    visible = [m for m in ("noisy_constellation", "noisy_signal") if m in model.config.modalities]
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    for snr in snrs:
        if snr >= train_snr_min:
            raise ValueError(f"{snr} dB is inside the training range (>= {train_snr_min} dB)")
        cfg = dataclasses.replace(gen, n_samples=n, snr_values=(float(snr),), seed=seed,
                                  split=f"extrap{float(snr):+.1f}")
        data = generate_arrays(cfg)
        inputs = {m: data.modality_images([m])[:, 0] for m in visible}
        recon = denoise(model, inputs, {m: input_mask_ratio for m in visible},
                        seed=_rng.derive_seed(seed, "denoise", int(round(-snr * 10))))
        clean = data.modality_images(["clean_constellation"])[:, 0]
        noisy = data.modality_images(["noisy_constellation"])[:, 0]
        den = recon["clean_constellation"]
        d_mse = np.array([mse(den[i], clean[i]) for i in range(len(data))])
        n_mse = np.array([mse(noisy[i], clean[i]) for i in range(len(data))])
        rows.append({"snr_db": float(snr), "mse_denoised": float(d_mse.mean()), "mse_noisy": float(n_mse.mean()),
                     "improved_fraction": float(np.mean(d_mse < n_mse)), "n": len(data),
                     "per_sample_denoised": d_mse, "per_sample_noisy": n_mse})
        if out:
            for i in range(min(n_images, len(data))):
                trip = np.concatenate([noisy[i], np.clip(den[i], 0, 1), clean[i]], axis=2)
                write_ppm(out / f"snr{float(snr):+.1f}_sample{i}.ppm", trip)
    if out:
        write_tsv(out / "extrapolation.tsv", rows, ["snr_db", "mse_denoised", "mse_noisy", "improved_fraction", "n"])
    return rows


def run_modality_ablation(pretrain_data: Dataset, train: Dataset, test: Dataset, pretrain_run: RunConfig,
                          finetune_run: RunConfig, classes: Sequence[str],
                          subsets: Sequence[Sequence[str]] = ABLATION_SUBSETS,
                          out_path: str | os.PathLike | None = None) -> list[dict]:
    """Pretrain + fine-tune once per nested modality subset."""
    for small, big in zip(subsets, subsets[1:]):
        if not set(small) < set(big):
            raise ConfigError(f"ablation subsets must be strictly nested: {small} vs {big}")
    rows = []
    for i, subset in enumerate(subsets):
        cfg = dataclasses.replace(pretrain_run.model, modalities=tuple(subset), modality_weights=None)
        pre = pretrain(pretrain_data, dataclasses.replace(pretrain_run, model=cfg))
        ft = finetune(train, test, dataclasses.replace(finetune_run, model=cfg), pre.model, classes)
        ref = REFERENCE_ABLATION_ACCURACY[i] if len(subsets) == len(ABLATION_SUBSETS) else None
        rows.append({"modalities": "+".join(subset), "n_modalities": len(subset),
                     "accuracy": ft.test_accuracy, "reference_accuracy": ref})
        log.info("ablation %s: %.2f%%", "+".join(subset), ft.test_accuracy)
    if out_path:
        write_tsv(out_path, rows, ["modalities", "n_modalities", "accuracy", "reference_accuracy"])
    return rows
