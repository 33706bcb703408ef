"""Toy architecture zoo: TinyCNN (BatchNorm or GroupNorm), TinyViT and an MLP.

Parameters live in an ordered ``dict[str, Tensor]``; BatchNorm running
statistics live separately in ``buffers`` and are not counted as parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor, broadcast_to, concat
from .tensor import functional as F

ARCHS = ("tiny-cnn", "tiny-vit", "mlp")

# Reporting constants for the full-size models (millions of parameters).
# They are documentation only and are never derived from code.
REFERENCE_PARAM_COUNTS_M = {"ViT(S)": 21.7, "ResNet(50)": 23.5}


class ModelSpecError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid model spec: " + "; ".join(violations))


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "tiny-vit"
    image_size: int = 16
    channels: int = 1
    num_classes: int = 10
    # tiny-cnn
    norm: str = "batch"
    groups: int = 8
    widths: tuple[int, ...] = (48, 96, 192)
    # tiny-vit
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    # mlp
    hidden: tuple[int, ...] = (128,)

    def violations(self) -> list[str]:
        errs = []
        if self.arch not in ARCHS:
            errs.append(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.image_size < 1 or self.channels < 1:
            errs.append("image_size and channels must be >= 1")
        if self.num_classes < 2:
            errs.append("num_classes must be >= 2")
        if self.arch == "tiny-vit":
            if self.patch_size < 1 or self.image_size % self.patch_size != 0:
                errs.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
            if self.heads < 1 or self.embed_dim % self.heads != 0:
                errs.append(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
            if self.depth < 0 or self.mlp_ratio < 1:
                errs.append("depth must be >= 0 and mlp_ratio >= 1")
        elif self.arch == "tiny-cnn":
            if self.norm not in ("batch", "group"):
                errs.append(f"norm must be 'batch' or 'group', got {self.norm!r}")
            if len(self.widths) != 3 or min(self.widths, default=0) < 1:
                errs.append("tiny-cnn needs exactly three positive widths")
            elif self.norm == "group" and any(w % self.groups for w in self.widths):
                errs.append(f"widths {self.widths} not divisible by groups {self.groups}")
            if self.image_size < 8:
                errs.append("tiny-cnn needs image_size >= 8 (three 2x2 pools)")
        elif self.arch == "mlp":
            if any(h < 1 for h in self.hidden):
                errs.append("mlp hidden widths must be positive")
        return errs

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _init_params(spec: ModelSpec, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    p: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    zeros = lambda *s: np.zeros(s, dtype=np.float32)  # noqa: E731
    ones = lambda *s: np.ones(s, dtype=np.float32)  # noqa: E731

    if spec.arch == "tiny-vit":
        d, c, ps = spec.embed_dim, spec.channels, spec.patch_size
        hidden = d * spec.mlp_ratio
        p["patch_embed.weight"] = _trunc_normal(rng, (ps * ps * c, d))
        p["patch_embed.bias"] = zeros(d)
        p["cls_token"] = _trunc_normal(rng, (1, 1, d))
        p["pos_embed"] = _trunc_normal(rng, (spec.num_patches + 1, d))
        for i in range(spec.depth):
            b = f"blocks.{i}"
            p[f"{b}.norm1.weight"], p[f"{b}.norm1.bias"] = ones(d), zeros(d)
            p[f"{b}.attn.qkv.weight"], p[f"{b}.attn.qkv.bias"] = _trunc_normal(rng, (d, 3 * d)), zeros(3 * d)
            p[f"{b}.attn.proj.weight"], p[f"{b}.attn.proj.bias"] = _trunc_normal(rng, (d, d)), zeros(d)
            p[f"{b}.norm2.weight"], p[f"{b}.norm2.bias"] = ones(d), zeros(d)
            p[f"{b}.mlp.fc1.weight"], p[f"{b}.mlp.fc1.bias"] = _trunc_normal(rng, (d, hidden)), zeros(hidden)
            p[f"{b}.mlp.fc2.weight"], p[f"{b}.mlp.fc2.bias"] = _trunc_normal(rng, (hidden, d)), zeros(d)
        p["norm.weight"], p["norm.bias"] = ones(d), zeros(d)
        p["head.weight"], p["head.bias"] = _trunc_normal(rng, (d, spec.num_classes)), zeros(spec.num_classes)

    elif spec.arch == "tiny-cnn":
        c_in = spec.channels
        for i, width in enumerate(spec.widths):
            p[f"conv{i}.weight"] = _kaiming_uniform(rng, (width, c_in, 3, 3), c_in * 9)
            p[f"norm{i}.weight"], p[f"norm{i}.bias"] = ones(width), zeros(width)
            if spec.norm == "batch":
                buffers[f"norm{i}.running_mean"] = zeros(width)
                buffers[f"norm{i}.running_var"] = ones(width)
            c_in = width
        side = spec.image_size // 8
        flat = spec.widths[-1] * side * side
        bound = 1.0 / np.sqrt(flat)
        p["head.weight"] = rng.uniform(-bound, bound, (flat, spec.num_classes)).astype(np.float32)
        p["head.bias"] = zeros(spec.num_classes)

    else:
        fan_in = spec.channels * spec.image_size**2
        for i, width in enumerate(spec.hidden):
            p[f"fc{i}.weight"] = _kaiming_uniform(rng, (fan_in, width), fan_in)
            p[f"fc{i}.bias"] = zeros(width)
            fan_in = width
        bound = 1.0 / np.sqrt(fan_in)
        p["head.weight"] = rng.uniform(-bound, bound, (fan_in, spec.num_classes)).astype(np.float32)
        p["head.bias"] = zeros(spec.num_classes)

    return p, buffers


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = True

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copy of parameters followed by buffers, as float32 arrays."""
        state = {k: t.data.copy() for k, t in self.params.items()}
        state.update({k: b.copy() for k, b in self.buffers.items()})
        return state

    def param_state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
            t.grad = None
        for k in self.buffers:
            self.buffers[k] = np.asarray(state[k], dtype=np.float32).copy()

    @classmethod
    def from_state(cls, spec: ModelSpec, state: Mapping[str, np.ndarray]) -> "Model":
        model = build_model(spec, seed=0, _skip_init=True)
        model.load_state_dict(state)
        return model


def build_model(spec: ModelSpec, seed: int = 0, *, _skip_init: bool = False) -> Model:
    """Instantiate ``spec`` with parameters drawn from ``seed``."""
    errs = spec.violations()
    if errs:
        raise ModelSpecError(errs)
    if _skip_init:
        # shapes only; values are overwritten by load_state_dict
        params, buffers = _init_params(spec, np.random.default_rng(0))
    else:
        params, buffers = _init_params(spec, np.random.default_rng(seed))
    return Model(spec, {k: Tensor(v, requires_grad=True) for k, v in params.items()}, buffers)


def param_count(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def vit_patchify(images: Tensor, patch: int) -> Tensor:
    """[B, C, H, W] -> [B, N, P*P*C]; patches row-major, each flattened channel-major."""
    if images.ndim != 4:
        raise ValueError(f"vit_patchify expects [B, C, H, W], got {images.shape}")
    b, c, h, w = images.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def vit_unpatchify(patches: np.ndarray, channels: int, image_size: int, patch: int) -> np.ndarray:
    """Inverse of :func:`vit_patchify` on plain arrays."""
    b = patches.shape[0]
    g = image_size // patch
    x = patches.reshape(b, g, g, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, image_size, image_size)


def vit_embed(model: Model, x: Tensor) -> Tensor:
    """Token stream before the first block: [cls; patches @ E] + positional."""
    p, spec = model.params, model.spec
    tokens = F.linear(vit_patchify(x, spec.patch_size), p["patch_embed.weight"], p["patch_embed.bias"])
    b = x.shape[0]
    cls = broadcast_to(p["cls_token"], (b, 1, spec.embed_dim))
    tokens = concat([cls, tokens], axis=1)
    pos = F.embedding(p["pos_embed"], np.arange(spec.num_patches + 1))
    return tokens + pos


def vit_encode(model: Model, x: Tensor) -> Tensor:
    """Token stream after all transformer blocks (before the final norm)."""
    p, spec = model.params, model.spec
    z = vit_embed(model, x)
    for i in range(spec.depth):
        b = f"blocks.{i}"
        h = F.layer_norm(z, p[f"{b}.norm1.weight"], p[f"{b}.norm1.bias"])
        z = z + F.multi_head_attention(
            h, p[f"{b}.attn.qkv.weight"], p[f"{b}.attn.qkv.bias"],
            p[f"{b}.attn.proj.weight"], p[f"{b}.attn.proj.bias"], spec.heads,
        )
        h = F.layer_norm(z, p[f"{b}.norm2.weight"], p[f"{b}.norm2.bias"])
        h = F.gelu(F.linear(h, p[f"{b}.mlp.fc1.weight"], p[f"{b}.mlp.fc1.bias"]))
        z = z + F.linear(h, p[f"{b}.mlp.fc2.weight"], p[f"{b}.mlp.fc2.bias"])
    return z


def _vit_forward(model: Model, x: Tensor) -> Tensor:
    p = model.params
    z = F.layer_norm(vit_encode(model, x), p["norm.weight"], p["norm.bias"])
    return F.linear(z[:, 0], p["head.weight"], p["head.bias"])


def _cnn_forward(model: Model, x: Tensor) -> Tensor:
    p, spec = model.params, model.spec
    h = x
    for i in range(len(spec.widths)):
        h = F.conv2d(h, p[f"conv{i}.weight"], None, stride=1, padding=1)
        if spec.norm == "batch":
            h = F.batch_norm(
                h, p[f"norm{i}.weight"], p[f"norm{i}.bias"],
                model.buffers[f"norm{i}.running_mean"], model.buffers[f"norm{i}.running_var"],
                training=model.training,
            )
        else:
            h = F.group_norm(h, spec.groups, p[f"norm{i}.weight"], p[f"norm{i}.bias"])
        h = F.max_pool2d(F.relu(h), 2)
    h = h.reshape(h.shape[0], -1)
    return F.linear(h, p["head.weight"], p["head.bias"])


def _mlp_forward(model: Model, x: Tensor) -> Tensor:
    p, spec = model.params, model.spec
    h = x.reshape(x.shape[0], -1)
    for i in range(len(spec.hidden)):
        h = F.relu(F.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
    return F.linear(h, p["head.weight"], p["head.bias"])


_FORWARDS = {"tiny-vit": _vit_forward, "tiny-cnn": _cnn_forward, "mlp": _mlp_forward}


def forward(model: Model, batch: Tensor) -> Tensor:
    spec = model.spec
    expected = (spec.channels, spec.image_size, spec.image_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected or batch.shape[0] < 1:
        raise ValueError(f"batch shape {batch.shape} does not match [B>=1, {expected[0]}, {expected[1]}, {expected[2]}]")
    if spec.arch == "tiny-cnn" and spec.norm == "batch" and model.training and batch.shape[0] < 2:
        raise ValueError("train-mode BatchNorm needs batch size >= 2")
    return _FORWARDS[spec.arch](model, batch)
