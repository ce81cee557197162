"""DenoMAE: multimodal masked autoencoder with noise as its own modality.

Data flow for one pretraining batch (B samples, n modalities, N patches):

    image_m --patchify--> [B, N, P] --embed_modality--> [B, N, D]
        --gather visible--> [B, k, D] --encode_modality (shared)--> H_m
        --project_to_shared--> Z_m = LN(H_m W_m + b_m)
    Z = concat_m(Z_m)  --decode_all-->  per-modality patch predictions [B, N, P]

The decoder sees every position of every modality: Z's visible tokens plus
one learned mask token per hidden patch, each carrying its modality's
positional and modality embeddings. The reconstruction loss is computed on
masked patches only.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import rng as _rng
from .numerics import ops
from .numerics.tensor import Parameter, Tensor

MODALITIES: tuple[str, ...] = (
    "noisy_constellation",
    "clean_constellation",
    "noisy_signal",
    "clean_signal",
    "noise",
)


class ConfigError(ValueError):
    pass


class ConfigMismatchError(ConfigError):
    """A checkpoint was built with a different model config than requested."""


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 512
    dropout: float = 0.5
    n_classes: int = 10


@dataclass(frozen=True)
class DenoMAEConfig:
    modalities: tuple[str, ...] = MODALITIES
    image_side: int = 224
    channels: int = 3
    patch_size: int = 16
    d_model: int = 768
    encoder_layers: int = 12
    decoder_layers: int = 4
    heads: int = 12
    mask_ratio: float = 0.75
    modality_weights: tuple[float, ...] | None = None
    mlp_ratio: int = 4
    shared_mask: bool = False
    init_std: float = 0.02
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        mods = tuple(self.modalities)
        object.__setattr__(self, "modalities", mods)
        unknown = [m for m in mods if m not in MODALITIES]
        if not mods or unknown or len(set(mods)) != len(mods):
            raise ConfigError(f"invalid modality list {mods}")
        if self.image_side % self.patch_size:
            raise ConfigError(f"image side {self.image_side} not divisible by patch size {self.patch_size}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        w = self.modality_weights
        w = tuple(1.0 for _ in mods) if w is None else tuple(float(x) for x in w)
        if len(w) != len(mods) or any(x <= 0 for x in w):
            raise ConfigError(f"need one positive weight per modality, got {w}")
        object.__setattr__(self, "modality_weights", w)
        if isinstance(self.classifier, dict):
            object.__setattr__(self, "classifier", ClassifierConfig(**self.classifier))

    @classmethod
    def full(cls, **overrides) -> "DenoMAEConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "DenoMAEConfig":
        base = dict(image_side=32, patch_size=8, d_model=64, encoder_layers=2,
                    decoder_layers=1, heads=4)
        base.update(overrides)
        return cls(**base)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def n_masked(self) -> int:
        return masked_count(self.n_patches, self.mask_ratio)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        d["modality_weights"] = list(self.modality_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DenoMAEConfig":
        d = dict(d)
        d["modalities"] = tuple(d.get("modalities", MODALITIES))
        if d.get("modality_weights") is not None:
            d["modality_weights"] = tuple(d["modality_weights"])
        d["classifier"] = ClassifierConfig(**d.get("classifier", {}))
        return cls(**d)


# ----------------------------------------------------------------- patches


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """[C, H, W] -> [N, C*p*p] (or batched [B, C, H, W] -> [B, N, C*p*p]).

    Patches are numbered row-major over the patch grid; each patch vector is
    its C x p x p block flattened channel-major.
    """
    x = np.asarray(x)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    b, c, h, w = x.shape
    if h != w or h % p:
        raise ValueError(f"image {h}x{w} cannot be cut into {p}x{p} patches")
    g = h // p
    out = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, p: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    batched = patches.ndim == 3
    if not batched:
        patches = patches[None]
    b, n, _ = patches.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    out = patches.reshape(b, g, g, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(b, channels, g * p, g * p)
    return out if batched else out[0]


# ------------------------------------------------------------------ masking


def masked_count(n: int, ratio: float) -> int:
    # The tiny slack absorbs binary rounding in products like 0.29 * 100.
    return int(math.floor(ratio * n + 1e-9))


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray

    @property
    def n(self) -> int:
        return self.visible.size + self.masked.size


def sample_mask(n: int, ratio: float, seed: int | np.random.Generator) -> MaskPlan:
    """Uniformly random masked subset of size floor(ratio * n)."""
    if n < 2:
        raise ValueError(f"need at least 2 patches to mask, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    return _plan(n, masked_count(n, ratio), seed)


def _plan(n: int, n_masked: int, seed: int | np.random.Generator) -> MaskPlan:
    gen = seed if isinstance(seed, np.random.Generator) else _rng.stream(seed, "mask")
    perm = gen.permutation(n)
    return MaskPlan(np.sort(perm[n_masked:]), np.sort(perm[:n_masked]))


@dataclass(frozen=True)
class BatchPlan:
    """Stacked plans for one modality: visible [B, k], masked [B, N - k]."""

    visible: np.ndarray
    masked: np.ndarray

    @classmethod
    def stack(cls, plans: Sequence[MaskPlan]) -> "BatchPlan":
        sizes = {p.visible.size for p in plans}
        if len(sizes) != 1:
            raise ValueError("plans in a batch must share the visible count")
        return cls(np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans]))

    @property
    def batch(self) -> int:
        return self.visible.shape[0]

    @property
    def n_visible(self) -> int:
        return self.visible.shape[1]

    @property
    def n_masked(self) -> int:
        return self.masked.shape[1]

    @property
    def restore(self) -> np.ndarray:
        """Index that reorders [visible; masked] tokens back to patch order."""
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")


def batch_plans(config: DenoMAEConfig, batch: int, gen: np.random.Generator) -> list[BatchPlan]:
    """Independent (or, with ``shared_mask``, shared) plans for every modality."""
    n, k = config.n_patches, config.n_masked
    if config.shared_mask:
        one = BatchPlan.stack([_plan(n, k, gen) for _ in range(batch)])
        return [one] * config.n_modalities
    return [BatchPlan.stack([_plan(n, k, gen) for _ in range(batch)]) for _ in config.modalities]


# ------------------------------------------------------------------- params


def _init_params(cfg: DenoMAEConfig, seed: int) -> dict[str, Parameter]:
    d, p, n = cfg.d_model, cfg.patch_dim, cfg.n_patches
    hid = cfg.mlp_ratio * d
    shapes: list[tuple[str, tuple[int, ...], str]] = []

    def lin(name, fan_in, fan_out, bias=True, kind="normal"):
        shapes.append((f"{name}.w", (fan_in, fan_out), kind))
        if bias:
            shapes.append((f"{name}.b", (fan_out,), "zeros"))

    def norm(name):
        shapes.append((f"{name}.g", (d,), "ones"))
        shapes.append((f"{name}.b", (d,), "zeros"))

    def block(prefix):
        norm(f"{prefix}.ln1")
        lin(f"{prefix}.attn.qkv", d, 3 * d, kind="xavier")
        lin(f"{prefix}.attn.out", d, d)
        norm(f"{prefix}.ln2")
        lin(f"{prefix}.mlp.fc1", d, hid, kind="xavier")
        lin(f"{prefix}.mlp.fc2", hid, d, kind="xavier")

    for m in cfg.modalities:
        lin(f"embed.{m}.proj", p, d, bias=False)
        shapes.append((f"embed.{m}.pos", (n, d), "normal"))
        shapes.append((f"embed.{m}.modality", (d,), "normal"))
    for i in range(cfg.encoder_layers):
        block(f"enc.{i}")
    norm("enc.norm")
    for m in cfg.modalities:
        lin(f"shared.{m}.proj", d, d)
        norm(f"shared.{m}.ln")
    shapes.append(("mask_token", (d,), "normal"))
    for i in range(cfg.decoder_layers):
        block(f"dec.{i}")
    if cfg.decoder_layers:
        norm("dec.norm")
    for m in cfg.modalities:
        lin(f"out.{m}", d, p)
    lin("head.fc1", d, cfg.classifier.hidden)
    lin("head.fc2", cfg.classifier.hidden, cfg.classifier.n_classes)

    params = {}
    for name, shape, kind in shapes:
        if kind == "zeros":
            v = np.zeros(shape)
        elif kind == "ones":
            v = np.ones(shape)
        elif kind == "xavier":
            # qkv and MLP weights: a 0.02 normal leaves these too small to fit quickly
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            v = _rng.stream(seed, "init", name).uniform(-lim, lim, size=shape)
        else:
            gen = _rng.stream(seed, "init", name)
            v = cfg.init_std * stats.truncnorm.rvs(-2.0, 2.0, size=shape, random_state=gen)
        params[name] = Parameter(v, name=name)
    return params


# -------------------------------------------------------------------- model


class DenoMAE:
    """Parameters plus the forward passes. Holds no training state beyond the
    per-parameter Adam moments."""

    def __init__(self, config: DenoMAEConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Parameter] = _init_params(config, seed)

    def parameters(self, prefix: str | Sequence[str] | None = None) -> list[Parameter]:
        if prefix is None:
            return list(self.params.values())
        prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
        return [p for k, p in self.params.items() if k.startswith(prefixes)]

    def encoder_parameters(self) -> list[Parameter]:
        return self.parameters("enc.")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def modality_index(self, name: str) -> int:
        try:
            return self.config.modalities.index(name)
        except ValueError:
            raise ConfigError(f"modality {name!r} not in {self.config.modalities}") from None

    @property
    def classify_modality(self) -> str:
        mods = self.config.modalities
        return "noisy_constellation" if "noisy_constellation" in mods else mods[0]

    # -- building blocks ---------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        y = ops.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return ops.add(y, b) if b is not None else y

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return ops.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, x: Tensor, name: str) -> Tensor:
        b, t, d = x.shape
        h = self.config.heads
        dh = d // h
        qkv = ops.reshape(self._linear(x, f"{name}.qkv"), (b, t, 3, h, dh))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, h, T, dh]
        q = ops.slice_(qkv, (0,))
        k = ops.slice_(qkv, (1,))
        v = ops.slice_(qkv, (2,))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        mixed = ops.matmul(ops.softmax(scores, axis=-1), v)  # [B, h, T, dh]
        mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        return self._linear(mixed, f"{name}.out")

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        x = ops.add(x, self._attention(self._norm(x, f"{prefix}.ln1"), f"{prefix}.attn"))
        hid = ops.gelu(self._linear(self._norm(x, f"{prefix}.ln2"), f"{prefix}.mlp.fc1"))
        return ops.add(x, self._linear(hid, f"{prefix}.mlp.fc2"))

    # -- published operations ----------------------------------------------

    def embed_modality(self, patches, modality: int) -> Tensor:
        """Linear patch projection + positional + modality embedding: [.., N, D]."""
        if not 0 <= modality < self.config.n_modalities:
            raise ConfigError(f"modality id {modality} out of range for {self.config.n_modalities} modalities")
        m = self.config.modalities[modality]
        x = ops.matmul(ops.as_tensor(patches), self.params[f"embed.{m}.proj.w"])
        x = ops.add(x, self.params[f"embed.{m}.pos"])
        return ops.add(x, self.params[f"embed.{m}.modality"])

    def encode_modality(self, tokens: Tensor) -> Tensor:
        """Shared encoder over a batch of visible-token sequences [B, k, D]."""
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise ValueError(f"encoder needs a non-empty [B, k, D] token batch, got {list(tokens.shape)}")
        x = tokens
        for i in range(self.config.encoder_layers):
            x = self._block(x, f"enc.{i}")
        return self._norm(x, "enc.norm")

    def project_to_shared(self, encoded: Sequence[Tensor | None]) -> tuple[Tensor | None, list[Tensor | None]]:
        """Z_m = LN(H_m W_m + b_m); Z concatenates the Z_m token-wise in modality order.

        ``None`` marks a modality with no visible tokens.
        """
        if len(encoded) != self.config.n_modalities:
            raise ConfigError(f"expected {self.config.n_modalities} encoded modalities, got {len(encoded)}")
        blocks: list[Tensor | None] = []
        for m, h in zip(self.config.modalities, encoded):
            if h is None:
                blocks.append(None)
                continue
            blocks.append(self._norm(self._linear(h, f"shared.{m}.proj"), f"shared.{m}.ln"))
        present = [z for z in blocks if z is not None]
        z = ops.concat(present, axis=1) if present else None
        return z, blocks

    def decode_all(self, z_blocks: Sequence[Tensor | None], plans: Sequence[BatchPlan]) -> list[Tensor]:
        """Joint decoder over all n*N positions, then per-modality output projections.

        Returns patch-space predictions [B, N, C*p*p] for every modality.
        """
        cfg = self.config
        n = cfg.n_patches
        if len(z_blocks) != cfg.n_modalities or len(plans) != cfg.n_modalities:
            raise ValueError("need one latent block and one plan per modality")
        seqs = []
        for m, (zm, plan) in zip(cfg.modalities, zip(z_blocks, plans)):
            b = plan.batch
            expected = plan.n_visible
            got = 0 if zm is None else zm.shape[1]
            if got != expected or plan.n_visible + plan.n_masked != n:
                raise ValueError(f"{m}: latent has {got} tokens but plan has {expected} visible of {n}")
            parts = [] if zm is None else [zm]
            if plan.n_masked:
                parts.append(ops.broadcast_to(self.params["mask_token"], (b, plan.n_masked, cfg.d_model)))
            seq = ops.concat(parts, axis=1) if len(parts) > 1 else parts[0]
            seq = ops.gather(seq, plan.restore)
            seq = ops.add(ops.add(seq, self.params[f"embed.{m}.pos"]), self.params[f"embed.{m}.modality"])
            seqs.append(seq)
        x = ops.concat(seqs, axis=1) if len(seqs) > 1 else seqs[0]
        for i in range(cfg.decoder_layers):
            x = self._block(x, f"dec.{i}")
        if cfg.decoder_layers:
            x = self._norm(x, "dec.norm")
        outs = []
        for j, m in enumerate(cfg.modalities):
            tok = ops.slice_(x, (slice(None), slice(j * n, (j + 1) * n)))
            outs.append(self._linear(tok, f"out.{m}"))
        return outs

    def forward_pretrain(self, patches: Sequence[np.ndarray], plans: Sequence[BatchPlan]) -> list[Tensor]:
        """Masked reconstruction of every modality from patch arrays [B, N, P]."""
        cfg = self.config
        visible = []
        for j, (x, plan) in enumerate(zip(patches, plans)):
            if plan.n_visible == 0:
                visible.append(None)
                continue
            visible.append(ops.gather(self.embed_modality(x, j), plan.visible))
        encoded: list[Tensor | None] = [None] * cfg.n_modalities
        # Modalities with equal visible counts share one encoder call along the
        # batch axis; sequences never attend across modalities either way.
        groups: dict[int, list[int]] = {}
        for j, v in enumerate(visible):
            if v is not None:
                groups.setdefault(v.shape[1], []).append(j)
        for idx in groups.values():
            b = visible[idx[0]].shape[0]
            stacked = ops.concat([visible[j] for j in idx], axis=0) if len(idx) > 1 else visible[idx[0]]
            h = self.encode_modality(stacked)
            for pos, j in enumerate(idx):
                encoded[j] = ops.slice_(h, (slice(pos * b, (pos + 1) * b),)) if len(idx) > 1 else h
        _, blocks = self.project_to_shared(encoded)
        return self.decode_all(blocks, plans)

    def forward_classify(self, images: np.ndarray, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
        """Logits [B, classes] for noisy-constellation images [B, C, H, W]: H(G(E(X)))."""
        cfg = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
            raise ConfigError(f"image shape {list(images.shape[1:])} does not match config "
                              f"{[cfg.channels, cfg.image_side, cfg.image_side]}")
        tokens = self.embed_modality(patchify(images, cfg.patch_size),
                                     self.modality_index(self.classify_modality))
        pooled = ops.mean(self.encode_modality(tokens), axis=1)
        hid = ops.gelu(self._linear(pooled, "head.fc1"))
        hid = ops.dropout(hid, cfg.classifier.dropout, rng, training)
        return self._linear(hid, "head.fc2")


def pretrain_loss(preds: Sequence[Tensor], targets: Sequence[np.ndarray], plans: Sequence[BatchPlan],
                  weights: Sequence[float]) -> tuple[Tensor, list[float]]:
    """Weighted sum of per-modality MSE over masked patches only.

    Each term is the mean over all masked-patch pixels in the batch. Returns
    the total (differentiable) and the per-modality values.
    """
    total = None
    parts = []
    for pred, tgt, plan, w in zip(preds, targets, plans, weights):
        if plan.n_masked == 0:
            raise ValueError("loss needs at least one masked patch per modality")
        b, n, p = pred.shape
        sel = np.zeros((b, n, 1), dtype=np.float32)
        sel[np.arange(b)[:, None], plan.masked] = 1.0
        diff = ops.sub(pred, np.asarray(tgt, dtype=np.float32))
        sq = ops.mul(ops.mul(diff, diff), sel)
        lm = ops.scale(ops.sum_(sq), 1.0 / (b * plan.n_masked * p))
        parts.append(float(lm.data))
        term = ops.scale(lm, w)
        total = term if total is None else ops.add(total, term)
    return total, parts


def denoise(model: DenoMAE, inputs: Mapping[str, np.ndarray], visibility: Mapping[str, float] | None = None,
            seed: int = 0) -> dict[str, np.ndarray]:
    """Reconstruct every modality from whatever is visible.

    ``inputs`` maps modality name to an image [C, H, W] or batch [B, C, H, W];
    absent modalities are fully masked. ``visibility`` gives the fraction of
    patches to hide per provided modality (default 0, i.e. fully visible).
    Returns decoder outputs as images for all modalities.
    """
    from .numerics.tensor import no_grad

    cfg = model.config
    visibility = dict(visibility or {})
    unknown = set(inputs) - set(cfg.modalities)
    if unknown:
        raise ConfigError(f"unknown modalities {sorted(unknown)}")
    first = np.asarray(next(iter(inputs.values()))) if inputs else None
    batched = first is not None and first.ndim == 4
    b = first.shape[0] if batched else 1
    n = cfg.n_patches
    gen = _rng.stream(seed, "denoise")
    patches, plans = [], []
    for m in cfg.modalities:
        ratio = visibility.get(m, 0.0) if m in inputs else 1.0
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"visibility override for {m} must lie in [0, 1], got {ratio}")
        k = masked_count(n, ratio) if ratio < 1.0 else n
        plans.append(BatchPlan.stack([_plan(n, k, gen) for _ in range(b)]))
        if m in inputs:
            x = np.asarray(inputs[m], dtype=np.float32)
            patches.append(patchify(x if batched else x[None], cfg.patch_size))
        else:
            patches.append(np.zeros((b, n, cfg.patch_dim), dtype=np.float32))
    if all(p.n_visible == 0 for p in plans):
        raise ValueError("every modality is fully masked; nothing to condition on")
    with no_grad():
        outs = model.forward_pretrain(patches, plans)
    result = {}
    for m, o in zip(cfg.modalities, outs):
        img = unpatchify(o.data, cfg.patch_size, cfg.channels)
        result[m] = img if batched else img[0]
    return result
