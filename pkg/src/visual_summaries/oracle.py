"""Classifier adapter.

Every later stage talks to the network only through :class:`Oracle`:
softmax scores, the gradient of one class score with respect to the input
pixels, and named intermediate feature vectors.  Images are ``H x W x C``
float arrays in ``[0, 1]``; resizing and normalization happen inside the
adapter so that perturbed images are re-scored exactly like the originals.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch import nn


class OracleError(RuntimeError):
    pass


def check_image(image) -> np.ndarray:
    """Validate and return an ``H x W x C`` float64 image."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected an H x W x C image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


@dataclass
class ModelManifest:
    architecture: str
    labels: list[str]
    input_size: tuple[int, int]
    channels: int = 3
    mean: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    std: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    feature_layers: dict[str, int] = field(default_factory=dict)
    weights: str | None = None
    options: dict = field(default_factory=dict)
    path: Path | None = None

    @classmethod
    def load(cls, path) -> "ModelManifest":
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        raw["input_size"] = tuple(raw["input_size"])
        return cls(**raw, path=path)

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "labels": list(self.labels),
            "input_size": list(self.input_size),
            "channels": self.channels,
            "mean": list(self.mean),
            "std": list(self.std),
            "feature_layers": dict(self.feature_layers),
            "weights": self.weights,
            "options": dict(self.options),
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def weights_path(self) -> Path | None:
        if self.weights is None:
            return None
        p = Path(self.weights)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    def fingerprint(self) -> str:
        """Stable text identifying the model (manifest + weight bytes)."""
        import hashlib

        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        wp = self.weights_path()
        if wp is not None and wp.exists():
            h.update(wp.read_bytes())
        return h.hexdigest()


class TinyConvNet(nn.Module):
    """Small convnet used for desk-scale experiments and tests.

    ``forward`` returns a dict of named activations; ``"logits"`` is the
    pre-softmax output, ``"fc1"`` the first fully connected layer (after
    ReLU) and ``"pool"`` the globally pooled convolutional features.
    """

    def __init__(self, num_classes: int, width: int = 16, hidden: int = 32, channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, width, 5, padding=2)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.fc1 = nn.Linear(2 * width, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.conv3(h))
        pool = torch.amax(h, dim=(2, 3))
        fc1 = F.relu(self.fc1(pool))
        logits = self.fc2(fc1)
        return {"pool": pool, "fc1": fc1, "logits": logits}


ARCHITECTURES = {"tiny_convnet": TinyConvNet}


def build_model(manifest: ModelManifest) -> nn.Module:
    try:
        ctor = ARCHITECTURES[manifest.architecture]
    except KeyError:
        raise OracleError(f"unknown architecture {manifest.architecture!r}") from None
    return ctor(num_classes=len(manifest.labels), channels=manifest.channels, **manifest.options)


class Oracle:
    """Interface shared by all classifier adapters."""

    labels: Sequence[str]
    feature_layers: dict[str, int]

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def logits(self, image) -> np.ndarray:
        raise NotImplementedError

    def classify(self, image) -> np.ndarray:
        return softmax(self.logits(image))

    def class_score_gradient(self, image, class_id: int, space: str = "softmax") -> np.ndarray:
        raise NotImplementedError

    def features(self, image, layer: str) -> np.ndarray:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return type(self).__name__

    def _check_class(self, class_id: int) -> int:
        if not 0 <= int(class_id) < self.num_classes:
            raise OracleError(f"class id {class_id} out of range [0, {self.num_classes})")
        return int(class_id)

    def _check_layer(self, layer: str) -> str:
        if layer not in self.feature_layers:
            raise OracleError(f"unknown feature layer {layer!r}; available: {sorted(self.feature_layers)}")
        return layer


class ConstantOracle(Oracle):
    """Stub whose output ignores the input entirely."""

    def __init__(self, scores, feature_length: int = 4):
        scores = np.asarray(scores, dtype=np.float64)
        with np.errstate(divide="ignore"):
            self._logits = np.log(scores / scores.sum())
        self.labels = [f"class{i}" for i in range(len(scores))]
        self.feature_layers = {"fc1": feature_length}

    def logits(self, image) -> np.ndarray:
        check_image(image)
        return self._logits.copy()

    def class_score_gradient(self, image, class_id: int, space: str = "softmax") -> np.ndarray:
        self._check_class(class_id)
        return np.zeros_like(check_image(image))

    def features(self, image, layer: str) -> np.ndarray:
        self._check_layer(layer)
        check_image(image)
        return np.zeros(self.feature_layers[layer])


class TorchOracle(Oracle):
    """Adapter over a torch module returning a dict of named activations.

    ``precision=64`` runs the network in float64, which is what the
    finite-difference checks need.
    """

    def __init__(self, model: nn.Module, manifest: ModelManifest, precision: int = 32):
        if model is None:
            raise OracleError("model not loaded")
        self.dtype = torch.float64 if precision == 64 else torch.float32
        self.model = model.to(self.dtype).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.manifest = manifest
        self.labels = list(manifest.labels)
        self.feature_layers = dict(manifest.feature_layers)
        c = manifest.channels
        self._mean = torch.tensor(manifest.mean[:c], dtype=self.dtype).view(1, c, 1, 1)
        self._std = torch.tensor(manifest.std[:c], dtype=self.dtype).view(1, c, 1, 1)

    @classmethod
    def from_manifest(cls, path, precision: int = 32) -> "TorchOracle":
        manifest = ModelManifest.load(path)
        model = build_model(manifest)
        wp = manifest.weights_path()
        if wp is None or not wp.exists():
            raise OracleError(f"weight file not found: {wp}")
        state = torch.load(wp, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        return cls(model, manifest, precision=precision)

    def fingerprint(self) -> str:
        return self.manifest.fingerprint()

    def _prepare(self, image, requires_grad: bool = False):
        arr = check_image(image)
        if arr.shape[2] != self.manifest.channels:
            raise OracleError(
                f"image has {arr.shape[2]} channels, model expects {self.manifest.channels}"
            )
        x = torch.tensor(arr, dtype=self.dtype).permute(2, 0, 1).unsqueeze(0)
        x.requires_grad_(requires_grad)
        h, w = self.manifest.input_size
        z = x
        if z.shape[2:] != (h, w):
            z = F.interpolate(z, size=(h, w), mode="bilinear", align_corners=False)
        z = (z - self._mean) / self._std
        if z.shape[1:] != (self.manifest.channels, h, w):
            raise OracleError(f"shape mismatch after adaptation: {tuple(z.shape)}")
        return x, z

    def _forward(self, image, requires_grad: bool = False):
        x, z = self._prepare(image, requires_grad)
        with torch.set_grad_enabled(requires_grad):
            out = self.model(z)
        return x, out

    def logits(self, image) -> np.ndarray:
        _, out = self._forward(image)
        return out["logits"][0].detach().to(torch.float64).numpy()

    def classify_batch(self, images) -> np.ndarray:
        return np.stack([self.classify(im) for im in images])

    def class_score_gradient(self, image, class_id: int, space: str = "softmax") -> np.ndarray:
        class_id = self._check_class(class_id)
        x, out = self._forward(image, requires_grad=True)
        logits = out["logits"][0]
        if space == "softmax":
            score = torch.softmax(logits, dim=0)[class_id]
        elif space == "logit":
            score = logits[class_id]
        else:
            raise ValueError(f"unknown score space {space!r}")
        (grad,) = torch.autograd.grad(score, x)
        return grad[0].permute(1, 2, 0).to(torch.float64).numpy()

    def features(self, image, layer: str) -> np.ndarray:
        layer = self._check_layer(layer)
        _, out = self._forward(image)
        vec = out[layer][0].detach().to(torch.float64).numpy().ravel()
        if vec.shape[0] != self.feature_layers[layer]:
            raise OracleError(
                f"layer {layer!r} produced {vec.shape[0]} values, manifest declares {self.feature_layers[layer]}"
            )
        return vec
