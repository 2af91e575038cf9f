"""Dense matrices, linear-layer stacks, and the on-disk tensor container.

The container is a JSON manifest plus one raw little-endian float64 blob per
tensor, stored side by side in a directory::

    out/model.json
    out/model.000.bin
    out/model.001.bin

Every blob is listed in the manifest with its shape, dtype and SHA-256
digest; loading verifies all three.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ChecksumError, ContainerError, DimensionError, MissingTensorError
from .report import dumps_json

FORMAT_NAME = "sparsesched-container"
FORMAT_VERSION = 1
DTYPE = "<f8"
ACTIVATIONS = ("identity", "relu")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return `a` as a finite, C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return m


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def apply_activation(y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return y
    if activation == "relu":
        return np.maximum(y, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class Layer:
    name: str
    weight: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name!r}: unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", _frozen(as_matrix(self.weight, self.name)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    @property
    def n_params(self) -> int:
        return int(self.weight.size)


@dataclass(frozen=True)
class LinearModel:
    """Ordered stack of linear layers, ``y = act(W x)`` per layer."""

    layers: tuple[Layer, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise DimensionError(
                    f"dimension chain broken: {prev.name!r} outputs {prev.shape[0]} "
                    f"but {nxt.name!r} expects {nxt.shape[1]}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> Layer:
        return self.layers[i]

    def with_weights(self, weights: Sequence[np.ndarray], metadata=None) -> "LinearModel":
        """Copy of this model with replaced weight matrices (same names, activations)."""
        if len(weights) != len(self.layers):
            raise DimensionError("one weight matrix per layer is required")
        layers = []
        for layer, w in zip(self.layers, weights):
            if np.shape(w) != layer.shape:
                raise DimensionError(f"{layer.name!r}: shape {np.shape(w)} != {layer.shape}")
            layers.append(Layer(layer.name, w, layer.activation))
        return LinearModel(tuple(layers), self.metadata if metadata is None else metadata)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = apply_activation(layer.weight @ x, layer.activation)
        return x

    def layer_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Inputs seen by each layer when `x` is fed through the dense stack."""
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = apply_activation(layer.weight @ x, layer.activation)
        return inputs


@dataclass(frozen=True)
class CalibrationSet:
    """Calibration inputs, one sample per column (input_dim x N)."""

    x0: np.ndarray

    def __post_init__(self):
        x = as_matrix(self.x0, "x0")
        if x.shape[1] < 1:
            raise ValueError("calibration set needs at least one sample")
        object.__setattr__(self, "x0", _frozen(x))

    @property
    def n_samples(self) -> int:
        return self.x0.shape[1]


# --------------------------------------------------------------------------
# container IO


def _manifest_path(path, default_name: str) -> Path:
    p = Path(path)
    if p.suffix == ".json":
        return p
    return p / default_name


def _write_blob(directory: Path, filename: str, array: np.ndarray) -> dict:
    data = np.ascontiguousarray(array, dtype=DTYPE).tobytes()
    (directory / filename).write_bytes(data)
    return {
        "shape": list(array.shape),
        "dtype": DTYPE,
        "file": filename,
        "nbytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def _read_blob(directory: Path, entry: Mapping[str, Any], name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        filename = entry["file"]
        dtype = entry.get("dtype", DTYPE)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"tensor {name!r}: malformed manifest entry") from exc
    if dtype != DTYPE:
        raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype!r}")
    blob = directory / filename
    if not blob.is_file():
        raise MissingTensorError(f"missing tensor {name!r}: {blob} not found")
    data = blob.read_bytes()
    digest = entry.get("sha256")
    if digest is not None and hashlib.sha256(data).hexdigest() != digest:
        raise ChecksumError(f"checksum mismatch for tensor {name!r} ({blob})")
    expected = int(np.prod(shape)) * 8
    if len(data) != expected:
        raise ContainerError(f"tensor {name!r}: {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=DTYPE).reshape(shape).astype(np.float64)


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(dumps_json(manifest))


def _read_manifest(path: Path, kind: str) -> dict:
    if not path.is_file():
        raise ContainerError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("kind") != kind:
        raise ContainerError(f"{path}: not a {kind} container")
    return manifest


def save_model(model: LinearModel, path, extra: Mapping[str, Any] | None = None) -> Path:
    """Write `model` as ``<dir>/model.json`` plus one blob per layer.

    `path` may be a directory or an explicit ``*.json`` manifest path.
    `extra` is merged into each layer entry by name (used for quantization
    grids).
    """
    manifest_path = _manifest_path(path, "model.json")
    directory = manifest_path.parent
    directory.mkdir(parents=True, exist_ok=True)
    stem = manifest_path.stem
    layers = []
    for i, layer in enumerate(model.layers):
        entry = {"name": layer.name, "activation": layer.activation}
        entry["tensor"] = _write_blob(directory, f"{stem}.{i:03d}.bin", layer.weight)
        if extra and layer.name in extra:
            entry.update(extra[layer.name])
        layers.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": "model",
        "metadata": dict(model.metadata),
        "layers": layers,
    }
    _write_manifest(manifest_path, manifest)
    return manifest_path


def load_model(path) -> LinearModel:
    manifest_path = _manifest_path(path, "model.json")
    manifest = _read_manifest(manifest_path, "model")
    layers = []
    for entry in manifest.get("layers", []):
        name = entry.get("name")
        if name is None or "tensor" not in entry:
            raise ContainerError(f"{manifest_path}: layer entry without name/tensor")
        weight = _read_blob(manifest_path.parent, entry["tensor"], name)
        layers.append(Layer(name, weight, entry.get("activation", "identity")))
    return LinearModel(tuple(layers), manifest.get("metadata", {}))


def save_calibration(calib: CalibrationSet, path, metadata: Mapping[str, Any] | None = None) -> Path:
    manifest_path = _manifest_path(path, "calib.json")
    directory = manifest_path.parent
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": "calibration",
        "metadata": dict(metadata or {}),
        "tensors": [{"name": "x0", "tensor": _write_blob(directory, f"{manifest_path.stem}.x0.bin", calib.x0)}],
    }
    _write_manifest(manifest_path, manifest)
    return manifest_path


def load_calibration(path) -> CalibrationSet:
    manifest_path = _manifest_path(path, "calib.json")
    manifest = _read_manifest(manifest_path, "calibration")
    for entry in manifest.get("tensors", []):
        if entry.get("name") == "x0":
            return CalibrationSet(_read_blob(manifest_path.parent, entry["tensor"], "x0"))
    raise MissingTensorError(f"missing tensor 'x0' in {manifest_path}")


# --------------------------------------------------------------------------
# synthetic models

# Log-amplitude decay of the calibration input spectrum at heterogeneity 1.
INPUT_DECAY = 4.0
# Largest per-layer alignment exponent at heterogeneity 1.
MAX_ALIGNMENT = 2.0


def _random_orthogonal(rng: np.random.Generator, d_out: int, d_in: int | None = None) -> np.ndarray:
    """Haar-random matrix with orthonormal rows or columns (whichever fits)."""
    d_in = d_out if d_in is None else d_in
    n = max(d_out, d_in)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return q[:d_out, :d_in]


def _spectral_shaping(rng: np.random.Generator, d: int, decay: float) -> np.ndarray:
    """Symmetric PSD matrix with eigenvalues exp(-decay * t), t in [0, 1]."""
    if decay == 0.0 or d == 1:
        return np.eye(d)
    s = np.exp(-decay * np.linspace(0.0, 1.0, d))
    s *= np.sqrt(d / np.sum(s**2))
    u = _random_orthogonal(rng, d)
    return (u * s) @ u.T


def _covariance_power(x: np.ndarray, power: float) -> np.ndarray:
    """``C^power`` for the normalized second-moment matrix of `x` (mean eigenvalue 1)."""
    e, v = np.linalg.eigh(x @ x.T / x.shape[1])
    e = np.clip(e, 0.0, None)
    mean = e.mean()
    if mean == 0.0:
        return np.eye(x.shape[0])
    return (v * (e / mean) ** power) @ v.T


def gen_synthetic_model(
    n_layers: int,
    dims: Sequence[int],
    heterogeneity: float,
    seed: int,
    n_samples: int = 256,
    activation: str = "identity",
) -> tuple[LinearModel, CalibrationSet]:
    """Random layer stack plus calibration inputs for desk-scale experiments.

    ``dims`` has ``n_layers + 1`` entries; layer ``l`` maps ``dims[l]`` to
    ``dims[l + 1]``.  Hidden layers use `activation`, the last layer is
    linear.  The result is a pure function of the arguments.

    Every layer starts from a Haar-random orthogonal matrix ``Q_l``.  With
    ``heterogeneity == 0`` that is all: inputs are i.i.d. Gaussian and every
    layer sees a rotated copy of the same white signal, so no layer is
    easier to prune than another.

    With ``heterogeneity = h > 0`` the calibration inputs get a decaying
    spectrum (log-amplitude decay ``h * INPUT_DECAY``) and each layer becomes
    ``Q_l @ C_l^(g_l / 2)``, where ``C_l`` is the second-moment matrix of the
    layer's calibration input and ``g_l ~ U(0, h * MAX_ALIGNMENT)``.  Larger
    ``g_l`` concentrates a layer's weights on the dominant input directions,
    which makes its inputs more redundant from the layer's point of view and
    its weights cheaper to prune.  Each layer is rescaled so its output has
    unit mean square on the calibration inputs.
    """
    dims = [int(d) for d in dims]
    if not dims:
        raise ValueError("dims must not be empty")
    if len(dims) != n_layers + 1:
        raise DimensionError(f"dims must have n_layers + 1 = {n_layers + 1} entries, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise DimensionError("all dims must be >= 1")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError("heterogeneity must lie in [0, 1]")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")

    root = np.random.SeedSequence(seed)
    input_seq, *layer_seqs = root.spawn(n_layers + 1)

    rng = np.random.default_rng(input_seq)
    z = rng.standard_normal((dims[0], n_samples))
    x0 = _spectral_shaping(rng, dims[0], heterogeneity * INPUT_DECAY) @ z if heterogeneity > 0 else z

    x = x0
    layers = []
    for l, seq in enumerate(layer_seqs):
        rng = np.random.default_rng(seq)
        d_in, d_out = dims[l], dims[l + 1]
        w = _random_orthogonal(rng, d_out, d_in)
        if heterogeneity > 0:
            align = heterogeneity * MAX_ALIGNMENT * rng.uniform()
            w = w @ _covariance_power(x, align / 2)
        act = activation if l < n_layers - 1 else "identity"
        y = apply_activation(w @ x, act)
        rms = np.sqrt(np.mean(y**2))
        if rms > 0:
            w = w / rms
            y = y / rms
        layers.append(Layer(f"layer{l:02d}", w, act))
        x = y

    metadata = {
        "generator": "gen_synthetic_model",
        "n_layers": n_layers,
        "dims": dims,
        "heterogeneity": heterogeneity,
        "seed": seed,
        "n_samples": n_samples,
        "activation": activation,
    }
    return LinearModel(tuple(layers), metadata), CalibrationSet(x0)
