"""Encoder, transformation decoder, cosine classifier heads, checkpoints.

One parameter set backs everything: convolutional encoder stages, a
two-layer decoder head that regresses the applied transform from the
concatenated embeddings of an original and a transformed image, and
bias-free cosine classifier heads for base and novel classes. Novel heads
can be imprinted from support features. Checkpoints are a directory of raw
little-endian float32 arrays plus a JSON manifest.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegeneratePrototypeError,
    DimensionError,
    StateError,
)
from .rng import make_rng
from .tensor import (
    Tensor,
    concat,
    conv2d,
    l2_normalize,
    l2_normalize_or_zero,
    matmul,
    maxpool2d,
    mul,
    relu,
    tmean,
    transpose,
)

CHECKPOINT_FORMAT = 1
TRANSFORM_DIM = 8  # four corner displacements, (dx, dy) each


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    input_size: int = 32
    stages: tuple = ((64, 3, 1), (64, 3, 1), (64, 3, 1), (64, 3, 1))  # (filters, kernel, stride)
    feature_dim: int = 64

    def __post_init__(self):
        object.__setattr__(
            self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages)
        )
        if self.feature_dim <= 0:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if not self.stages:
            raise ConfigError("encoder needs at least one stage")
        if self.stages[-1][0] != self.feature_dim:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must equal the last stage's "
                f"filter count {self.stages[-1][0]} (global average pooling)"
            )
        self.spatial_sizes()

    def spatial_sizes(self):
        """Spatial size after each stage (conv with pad k//2, then 2x2 pool)."""
        size = self.input_size
        sizes = []
        for i, (_, k, stride) in enumerate(self.stages):
            size = (size + 2 * (k // 2) - k) // stride + 1
            if size < 2 or size % 2:
                raise ConfigError(
                    f"stage {i} leaves spatial size {size}; pooling needs an even size >= 2"
                )
            size //= 2
            sizes.append(size)
        return sizes


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class FlatModel:
    """Shared encoder + transform decoder + cosine classifier heads.

    The same encoder weights serve both branches of the decoding task:
    encoding an image and its transformed counterpart are two calls into
    one parameter set. Classifier heads have no bias; their logits are a
    learnable positive scale times the cosine between the normalized
    feature and each normalized weight row.
    """

    def __init__(self, encoder, n_base, n_novel=None, scale_init=0.5, seed=0):
        if n_base < 2:
            raise ConfigError(f"need at least 2 base classes, got {n_base}")
        if scale_init <= 0:
            raise ConfigError(f"scale_init must be positive, got {scale_init}")
        self.encoder = encoder
        self.n_base = int(n_base)
        self.scale_init = float(scale_init)
        self.seed = int(seed)
        rng = make_rng(seed, "init")

        d = encoder.feature_dim
        params = {}
        c_in = encoder.input_channels
        for i, (filters, k, _) in enumerate(encoder.stages):
            params[f"enc.stage{i}.weight"] = Tensor(
                kaiming_uniform(rng, (filters, c_in, k, k), c_in * k * k),
                requires_grad=True,
            )
            params[f"enc.stage{i}.bias"] = Tensor(
                np.zeros((filters, 1, 1), dtype=np.float32), requires_grad=True
            )
            c_in = filters
        params["dec.fc1.weight"] = Tensor(
            kaiming_uniform(rng, (2 * d, d), 2 * d), requires_grad=True
        )
        params["dec.fc1.bias"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        # zero-initialized final layer: decoding loss starts at the target variance
        params["dec.fc2.weight"] = Tensor(
            np.zeros((d, TRANSFORM_DIM), dtype=np.float32), requires_grad=True
        )
        params["dec.fc2.bias"] = Tensor(
            np.zeros(TRANSFORM_DIM, dtype=np.float32), requires_grad=True
        )
        base = kaiming_uniform(rng, (n_base, d), d)
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        params["cls.base.weight"] = Tensor(base, requires_grad=True)
        params["cls.scale"] = Tensor(
            np.array([scale_init], dtype=np.float32), requires_grad=True
        )
        if n_novel is not None:
            novel = kaiming_uniform(rng, (n_novel, d), d)
            novel /= np.linalg.norm(novel, axis=1, keepdims=True)
            params["cls.novel.weight"] = Tensor(novel, requires_grad=True)
        self.params = params

    # -- parameter access ---------------------------------------------------

    @property
    def n_novel(self):
        w = self.params.get("cls.novel.weight")
        return None if w is None else w.data.shape[0]

    def parameters(self, prefixes=None):
        """Named parameters, optionally filtered by name prefix."""
        if prefixes is None:
            return dict(self.params)
        return {
            n: p for n, p in self.params.items()
            if any(n.startswith(pre) for pre in prefixes)
        }

    def clone(self):
        out = FlatModel.__new__(FlatModel)
        out.encoder = self.encoder
        out.n_base = self.n_base
        out.scale_init = self.scale_init
        out.seed = self.seed
        out.params = {
            n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()
        }
        return out

    def astype(self, dtype):
        """Cast copy, used for float64 gradient checking."""
        out = self.clone()
        for p in out.params.values():
            p.data = p.data.astype(dtype)
        return out

    def post_step(self):
        """Restore cosine-head invariants after an optimizer step."""
        for name in ("cls.base.weight", "cls.novel.weight"):
            w = self.params.get(name)
            if w is None:
                continue
            norms = np.linalg.norm(w.data, axis=1, keepdims=True)
            if np.any(norms < 1e-8):
                raise ContractError(f"{name} has a collapsed row; cannot renormalize")
            w.data = w.data / norms
        s = self.params["cls.scale"]
        s.data = np.maximum(s.data, np.asarray(1e-3, dtype=s.data.dtype))

    # -- forward passes -----------------------------------------------------

    def encode(self, batch):
        """Conv stages with ReLU and 2x2 max pooling, then global average pooling."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        expected = (self.encoder.input_channels, self.encoder.input_size,
                    self.encoder.input_size)
        if x.data.ndim != 4 or x.data.shape[1:] != expected:
            raise DimensionError(
                f"encoder expects Bx{expected}, got {x.data.shape}"
            )
        for i, (_, k, stride) in enumerate(self.encoder.stages):
            x = conv2d(x, self.params[f"enc.stage{i}.weight"], stride=stride, pad=k // 2)
            x = x + self.params[f"enc.stage{i}.bias"]
            x = relu(x)
            x = maxpool2d(x, 2)
        return tmean(x, axis=(2, 3))

    def decode_transform(self, f_orig, f_trans):
        """Predict the transform from (original, transformed) embeddings.

        Concatenation order matters and is fixed: original first.
        """
        if f_orig.data.shape != f_trans.data.shape:
            raise DimensionError(
                f"feature shapes differ: {f_orig.data.shape} vs {f_trans.data.shape}"
            )
        h = concat([f_orig, f_trans], axis=1)
        h = matmul(h, self.params["dec.fc1.weight"]) + self.params["dec.fc1.bias"]
        h = relu(h)
        return matmul(h, self.params["dec.fc2.weight"]) + self.params["dec.fc2.bias"]

    def head_weight(self, head):
        if head == "base":
            return self.params["cls.base.weight"]
        if head == "novel":
            w = self.params.get("cls.novel.weight")
            if w is None:
                raise StateError("no novel classifier head: imprint or finetune first")
            return w
        if head == "joint":
            w = self.params.get("cls.novel.weight")
            if w is None:
                raise StateError("joint head needs a novel classifier; imprint first")
            return concat([self.params["cls.base.weight"], w], axis=0)
        raise ConfigError(f"unknown head '{head}' (expected base, novel, or joint)")

    def classify(self, features, head="base"):
        """Scaled cosine logits; `joint` stacks base rows before novel rows.

        A zero-norm feature row carries no direction: it gets zero cosines
        against every class instead of a degenerate-vector error.
        """
        f = features if isinstance(features, Tensor) else Tensor(features)
        w = self.head_weight(head)
        if f.data.ndim != 2 or f.data.shape[1] != w.data.shape[1]:
            raise DimensionError(
                f"features {f.data.shape} do not match head dim {w.data.shape[1]}"
            )
        logits = matmul(l2_normalize_or_zero(f, axis=1),
                        transpose(l2_normalize(w, axis=1)))
        return mul(logits, self.params["cls.scale"])

    # -- imprinting -----------------------------------------------------------

    def imprint(self, class_features):
        """Set each novel row to the renormalized mean of normalized supports."""
        rows = []
        for c, feats in enumerate(class_features):
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] < 1:
                raise ContractError(f"class {c}: need a (K, d) feature array")
            norms = np.linalg.norm(feats, axis=1, keepdims=True)
            if np.any(norms <= 1e-12):
                raise DegeneratePrototypeError(
                    f"class {c} has a support feature with near-zero norm"
                )
            mean = (feats / norms).mean(axis=0)
            mnorm = np.linalg.norm(mean)
            if mnorm <= 1e-12:
                raise DegeneratePrototypeError(
                    f"class {c}: support features cancel out; prototype is degenerate"
                )
            rows.append((mean / mnorm).astype(np.float32))
        self.params["cls.novel.weight"] = Tensor(np.stack(rows), requires_grad=True)

    def drop_novel_head(self):
        self.params.pop("cls.novel.weight", None)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + one raw little-endian float32 file per array

def _array_filename(name):
    return name.replace("/", "__") + ".f32"


def save_checkpoint(model, path, epoch=0, extra_arrays=None, extra_state=None):
    arrays = {name: p.data for name, p in model.params.items()}
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise ContractError(f"extra arrays collide with parameters: {overlap}")
        arrays.update(extra_arrays)
    os.makedirs(path, exist_ok=True)
    adir = os.path.join(path, "arrays")
    os.makedirs(adir, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "encoder": asdict(model.encoder),
        "n_base": model.n_base,
        "n_novel": model.n_novel,
        "scale_init": model.scale_init,
        "seed": model.seed,
        "epoch": int(epoch),
        "arrays": {name: list(a.shape) for name, a in arrays.items()},
        "state": extra_state or {},
    }
    for name, a in arrays.items():
        with open(os.path.join(adir, _array_filename(name)), "wb") as f:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class Checkpoint:
    model: FlatModel
    epoch: int
    extra_arrays: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


def load_checkpoint(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')}"
        )
    enc = EncoderConfig(**manifest["encoder"])
    model = FlatModel(
        enc,
        n_base=manifest["n_base"],
        n_novel=manifest["n_novel"],
        scale_init=manifest["scale_init"],
        seed=manifest["seed"],
    )
    extra = {}
    for name, shape in manifest["arrays"].items():
        apath = os.path.join(path, "arrays", _array_filename(name))
        try:
            with open(apath, "rb") as f:
                raw = f.read()
        except OSError as exc:
            raise CheckpointError(f"missing checkpoint array {apath}") from exc
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise CheckpointError(
                f"array {name}: file has {len(raw)} bytes, manifest shape {shape} "
                f"needs {expected}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if name in model.params:
            if tuple(arr.shape) != model.params[name].data.shape:
                raise CheckpointError(
                    f"array {name}: shape {arr.shape} does not match model "
                    f"{model.params[name].data.shape}"
                )
            model.params[name].data = arr
        else:
            extra[name] = arr
    missing = set(model.params) - set(manifest["arrays"])
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)}")
    return Checkpoint(
        model=model,
        epoch=manifest["epoch"],
        extra_arrays=extra,
        state=manifest.get("state", {}),
        manifest=manifest,
    )
