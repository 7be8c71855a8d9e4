"""Embedding backends.

Two providers implement the same three-method surface: ``class_names``,
``text_features`` returning a (d, n_prompts) matrix, and
``image_features`` returning a (d, n_items) matrix plus labels.  The
fake provider is pure numpy and deterministic, so the export pipeline
can be exercised without model weights; the CLIP provider wraps the
real model and raises a structured error when its stack is missing.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DatasetUnavailable, ModelUnavailable
from .templates import DEFAULT_TEMPLATES

CIFAR10_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)


def _seed_from(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class FakeClipProvider:
    """Deterministic stand-in backend for pipeline tests.

    Text features are unit vectors drawn from a generator seeded by a
    hash of the prompt, so the same prompt always maps to the same
    direction.  Image features cluster around each class's averaged
    default-prompt direction with isotropic noise, which keeps the
    export near-separable for nearest-prototype inference at small
    noise levels.
    """

    def __init__(self, dim: int = 32, n_per_class: int = 50, noise: float = 0.1, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be at least 2")
        if n_per_class < 1:
            raise ValueError("n_per_class must be positive")
        if not 0.0 <= noise < 10.0:
            raise ValueError("noise out of range")
        self.dim = int(dim)
        self.n_per_class = int(n_per_class)
        self.noise = float(noise)
        self.seed = int(seed)

    def class_names(self, dataset: str) -> tuple[str, ...]:
        return CIFAR10_CLASSES

    def text_features(self, prompts, device: str = "cpu") -> np.ndarray:
        cols = []
        for prompt in prompts:
            rng = np.random.default_rng(_seed_from(prompt) ^ self.seed)
            v = rng.standard_normal(self.dim)
            cols.append(v / np.linalg.norm(v))
        return np.stack(cols, axis=1)

    def image_features(self, dataset: str, device: str = "cpu"):
        names = self.class_names(dataset)
        anchors = []
        for name in names:
            per_prompt = self.text_features([t.format(name) for t in DEFAULT_TEMPLATES])
            mean = per_prompt.mean(axis=1)
            anchors.append(mean / np.linalg.norm(mean))
        anchors = np.stack(anchors, axis=1)
        rng = np.random.default_rng(_seed_from(dataset) ^ self.seed ^ 0x5EED)
        k = len(names)
        n = k * self.n_per_class
        labels = np.repeat(np.arange(k), self.n_per_class)
        feats = anchors[:, labels] + self.noise * rng.standard_normal((self.dim, n))
        order = rng.permutation(n)
        return feats[:, order], labels[order].astype(np.int64)


class ClipProvider:
    """Real CLIP backend via torch and open_clip, loaded lazily."""

    def __init__(self, model: str = "ViT-B-32", pretrained: str = "openai"):
        self.model_name = model
        self.pretrained = pretrained
        self._stack = None

    def _load(self, device: str):
        if self._stack is not None:
            return self._stack
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise ModelUnavailable(
                "CLIP backend needs torch and open-clip-torch installed"
            ) from exc
        try:
            model, _, preprocess = open_clip.create_model_and_transforms(
                self.model_name, pretrained=self.pretrained
            )
            tokenizer = open_clip.get_tokenizer(self.model_name)
        except Exception as exc:
            raise ModelUnavailable(
                f"could not load {self.model_name} ({self.pretrained}): {exc}"
            ) from exc
        model.eval().to(device)
        self._stack = (torch, model, preprocess, tokenizer)
        return self._stack

    def class_names(self, dataset: str) -> tuple[str, ...]:
        if dataset.startswith("cifar10"):
            return CIFAR10_CLASSES
        raise DatasetUnavailable(f"no class list for dataset {dataset!r}")

    def text_features(self, prompts, device: str = "cpu") -> np.ndarray:
        torch, model, _, tokenizer = self._load(device)
        with torch.no_grad():
            tokens = tokenizer(list(prompts)).to(device)
            feats = model.encode_text(tokens)
        return feats.float().cpu().numpy().T.astype(np.float64)

    def image_features(self, dataset: str, device: str = "cpu"):
        if not dataset.startswith("cifar10"):
            raise DatasetUnavailable(f"unsupported dataset {dataset!r}")
        torch, model, preprocess, _ = self._load(device)
        try:
            from torchvision.datasets import CIFAR10
        except ImportError as exc:
            raise DatasetUnavailable("torchvision is not installed") from exc
        import os

        root = os.environ.get("EXPORT_CLIP_DATA", os.path.expanduser("~/.cache/export_clip"))
        train = dataset.endswith("-train")
        try:
            ds = CIFAR10(root=root, train=train, download=False, transform=preprocess)
        except RuntimeError as exc:
            raise DatasetUnavailable(f"CIFAR-10 not found under {root}: {exc}") from exc
        loader = torch.utils.data.DataLoader(ds, batch_size=256, num_workers=0)
        chunks = []
        labels = []
        with torch.no_grad():
            for images, target in loader:
                feats = model.encode_image(images.to(device))
                chunks.append(feats.float().cpu().numpy())
                labels.append(target.numpy())
        items = np.concatenate(chunks, axis=0).T.astype(np.float64)
        return items, np.concatenate(labels).astype(np.int64)
