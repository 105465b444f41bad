"""ViT classifier (patchify, patch/positional embedding, class token, encoder
stack, MLP head) plus a small convolutional baseline for comparison runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor, load_tensors, save_tensors
from .transformer import EncoderBlockParams, encoder_block, truncated_normal

NUM_CLASSES = 5


@dataclass(frozen=True)
class ViTConfig:
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    patch_size: int = 16
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 256
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def num_patches(self) -> int:
        h, w = self.image_size
        return (h * w) // (self.patch_size * self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ViTParams:
    patch_projection: Tensor          # (P*P*C, d_model), the single matrix E
    class_token: Tensor               # (1, d_model)
    positional_embedding: Tensor      # (N+1, d_model)
    blocks: list[EncoderBlockParams]
    head_norm_gain: Tensor
    head_norm_bias: Tensor
    head_weight: Tensor               # (d_model, num_classes)
    head_bias: Tensor

    @classmethod
    def init(cls, config: ViTConfig, seed: int) -> "ViTParams":
        rng = np.random.default_rng(seed)
        d = config.d_model
        return cls(
            patch_projection=Tensor.param(truncated_normal(rng, (config.patch_dim, d))),
            class_token=Tensor.param(np.zeros((1, d))),
            positional_embedding=Tensor.param(
                truncated_normal(rng, (config.num_patches + 1, d))),
            blocks=[EncoderBlockParams.init(d, config.heads, config.mlp_dim, rng)
                    for _ in range(config.depth)],
            head_norm_gain=Tensor.param(np.ones(d)),
            head_norm_bias=Tensor.param(np.zeros(d)),
            head_weight=Tensor.param(truncated_normal(rng, (d, config.num_classes))),
            head_bias=Tensor.param(np.zeros(config.num_classes)),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("patch_projection", self.patch_projection),
               ("class_token", self.class_token),
               ("positional_embedding", self.positional_embedding)]
        for i, blk in enumerate(self.blocks):
            out += blk.named_parameters(f"blocks.{i}.")
        out += [("head_norm_gain", self.head_norm_gain),
                ("head_norm_bias", self.head_norm_bias),
                ("head_weight", self.head_weight),
                ("head_bias", self.head_bias)]
        return out


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (H, W, C) into N = HW/P^2 rows in raster order; each row is the
    row-major flattening of one P x P x C patch."""
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image dims {(h, w)} not divisible by patch size {p}")
    return (image.reshape(h // p, p, w // p, p, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape((h // p) * (w // p), p * p * c))


def unpatchify(patches: np.ndarray, image_size: tuple[int, int],
               patch_size: int, channels: int) -> np.ndarray:
    """Inverse of ``patchify``; exact bijection."""
    h, w = image_size
    p = patch_size
    return (patches.reshape(h // p, w // p, p, p, channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(h, w, channels))


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image dims {(h, w)} not divisible by patch size {p}")
    return (images.reshape(b, h // p, p, w // p, p, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, (h // p) * (w // p), p * p * c))


def embed_sequence(tape: Tape, patches: Tensor, params: ViTParams) -> Tensor:
    """Project patches with E, prepend the class token, add positions.

    ``patches`` is (N, patch_dim) or (B, N, patch_dim); output has N+1 rows
    per sequence with the class token at row 0.
    """
    projected = tape.matmul(patches, params.patch_projection)
    if patches.ndim == 3:
        cls = tape.expand_leading(params.class_token, patches.shape[0])
    else:
        cls = params.class_token
    seq = tape.concat([cls, projected], axis=-2)
    return tape.add(seq, params.positional_embedding)


def _vit_logits(tape: Tape, patches: Tensor, params: ViTParams,
                capture: list | None = None) -> Tensor:
    x = embed_sequence(tape, patches, params)
    for blk in params.blocks:
        x = encoder_block(tape, x, blk, capture=capture)
    cls = tape.narrow(x, -2, 0, 1)
    cls = tape.layer_norm(cls, params.head_norm_gain, params.head_norm_bias)
    return tape.add(tape.matmul(cls, params.head_weight), params.head_bias)


def vit_forward(tape: Tape, image: np.ndarray, params: ViTParams, config: ViTConfig,
                capture: list | None = None) -> Tensor:
    """Classify one (H, W, C) image; returns unnormalized logits (num_classes,)."""
    if image.shape != (*config.image_size, config.channels):
        raise ShapeError(f"image shape {image.shape} does not match config "
                         f"{(*config.image_size, config.channels)}")
    patches = Tensor(patchify(image, config.patch_size))
    logits = _vit_logits(tape, patches, params, capture=capture)
    return tape.reshape(logits, (config.num_classes,))


def vit_forward_batch(tape: Tape, images: np.ndarray, params: ViTParams,
                      config: ViTConfig, capture: list | None = None) -> Tensor:
    """Batched forward: (B, H, W, C) -> logits (B, num_classes)."""
    patches = Tensor(patchify_batch(images, config.patch_size))
    logits = _vit_logits(tape, patches, params, capture=capture)
    return tape.reshape(logits, (images.shape[0], config.num_classes))


# -- convolutional baseline ------------------------------------------------


@dataclass(frozen=True)
class CnnBaselineConfig:
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    conv_widths: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    pool_size: int = 2
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        h, w = self.image_size
        factor = self.pool_size ** len(self.conv_widths)
        if h % factor or w % factor:
            raise ConfigError(f"image size {self.image_size} not divisible by "
                              f"total pooling factor {factor}")

    @property
    def feature_dim(self) -> int:
        h, w = self.image_size
        factor = self.pool_size ** len(self.conv_widths)
        return (h // factor) * (w // factor) * self.conv_widths[-1]


@dataclass
class CnnParams:
    kernels: list[Tensor]
    conv_biases: list[Tensor]
    head_weight: Tensor
    head_bias: Tensor

    @classmethod
    def init(cls, config: CnnBaselineConfig, seed: int) -> "CnnParams":
        rng = np.random.default_rng(seed)
        kernels, biases = [], []
        cin = config.channels
        k = config.kernel_size
        for cout in config.conv_widths:
            # He-style scale: ReLU stages need fan-in-aware init to train.
            std = np.sqrt(2.0 / (k * k * cin))
            kernels.append(Tensor.param(truncated_normal(rng, (k, k, cin, cout), std=std)))
            biases.append(Tensor.param(np.zeros(cout)))
            cin = cout
        return cls(
            kernels=kernels,
            conv_biases=biases,
            head_weight=Tensor.param(truncated_normal(rng, (config.feature_dim,
                                                            config.num_classes))),
            head_bias=Tensor.param(np.zeros(config.num_classes)),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (kern, bias) in enumerate(zip(self.kernels, self.conv_biases)):
            out += [(f"conv.{i}.kernel", kern), (f"conv.{i}.bias", bias)]
        out += [("head_weight", self.head_weight), ("head_bias", self.head_bias)]
        return out


def cnn_forward_batch(tape: Tape, images: np.ndarray, params: CnnParams,
                      config: CnnBaselineConfig) -> Tensor:
    """Conv-pool stack then linear head; logits (B, num_classes)."""
    x = Tensor(np.ascontiguousarray(images))
    for kern, bias in zip(params.kernels, params.conv_biases):
        x = tape.maxpool2d(tape.relu(tape.conv2d(x, kern, bias)), config.pool_size)
    flat = tape.reshape(x, (images.shape[0], config.feature_dim))
    return tape.add(tape.matmul(flat, params.head_weight), params.head_bias)


def cnn_forward(tape: Tape, image: np.ndarray, params: CnnParams,
                config: CnnBaselineConfig) -> Tensor:
    if image.shape != (*config.image_size, config.channels):
        raise ShapeError(f"image shape {image.shape} does not match config "
                         f"{(*config.image_size, config.channels)}")
    logits = cnn_forward_batch(tape, image[None], params, config)
    return tape.reshape(logits, (config.num_classes,))


def predict(logits) -> int:
    """Argmax class index; ties break toward the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(data))


# -- checkpoints -------------------------------------------------------------

MODEL_KINDS = ("vit16", "vit32", "cnn")


def config_for_kind(kind: str, num_classes: int = NUM_CLASSES):
    if kind == "vit16":
        return ViTConfig(patch_size=16, num_classes=num_classes)
    if kind == "vit32":
        return ViTConfig(patch_size=32, num_classes=num_classes)
    if kind == "cnn":
        return CnnBaselineConfig(num_classes=num_classes)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def init_params(kind: str, config, seed: int):
    if kind in ("vit16", "vit32"):
        return ViTParams.init(config, seed)
    return CnnParams.init(config, seed)


def save_model(path, kind: str, params, config, extra_tensors=()) -> None:
    """Binary checkpoint plus a key=value sidecar describing the config."""
    path = Path(path)
    save_tensors(path, list(params.named_parameters()) + list(extra_tensors))
    lines = [f"model_kind={kind}"]
    if isinstance(config, ViTConfig):
        lines += [
            f"image_size={config.image_size[0]}x{config.image_size[1]}",
            f"patch_size={config.patch_size}",
            f"d_model={config.d_model}",
            f"depth={config.depth}",
            f"heads={config.heads}",
            f"mlp_dim={config.mlp_dim}",
            f"num_classes={config.num_classes}",
        ]
    else:
        lines += [
            f"image_size={config.image_size[0]}x{config.image_size[1]}",
            f"conv_widths={','.join(str(w) for w in config.conv_widths)}",
            f"kernel_size={config.kernel_size}",
            f"pool_size={config.pool_size}",
            f"num_classes={config.num_classes}",
        ]
    path.with_suffix(".config.txt").write_text("\n".join(lines) + "\n")


def load_model(path):
    """Returns (kind, params, config, extra) from a checkpoint + sidecar."""
    path = Path(path)
    sidecar = path.with_suffix(".config.txt")
    if not path.exists() or not sidecar.exists():
        raise ConfigError(f"checkpoint {path} or its config sidecar is missing")
    kv = {}
    for line in sidecar.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    kind = kv["model_kind"]
    h, _, w = kv["image_size"].partition("x")
    if kind in ("vit16", "vit32"):
        config = ViTConfig(
            image_size=(int(h), int(w)),
            patch_size=int(kv["patch_size"]),
            d_model=int(kv["d_model"]),
            depth=int(kv["depth"]),
            heads=int(kv["heads"]),
            mlp_dim=int(kv["mlp_dim"]),
            num_classes=int(kv["num_classes"]),
        )
        params = ViTParams.init(config, seed=0)
    elif kind == "cnn":
        config = CnnBaselineConfig(
            image_size=(int(h), int(w)),
            conv_widths=tuple(int(x) for x in kv["conv_widths"].split(",")),
            kernel_size=int(kv["kernel_size"]),
            pool_size=int(kv["pool_size"]),
            num_classes=int(kv["num_classes"]),
        )
        params = CnnParams.init(config, seed=0)
    else:
        raise ConfigError(f"unknown model kind {kind!r} in {sidecar}")
    tensors = load_tensors(path)
    extra = {}
    named = dict(params.named_parameters())
    for name, arr in tensors.items():
        if name in named:
            if named[name].shape != arr.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                  f"expected {named[name].shape}")
            named[name].data = arr
        else:
            extra[name] = arr
    missing = set(named) - set(tensors)
    if missing:
        raise ConfigError(f"checkpoint {path} missing tensors: {sorted(missing)}")
    return kind, params, config, extra
