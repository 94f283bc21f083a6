"""Task data: the adding problem, the copy-memory task, and IDX-format
digit image sets (plus a synthetic stand-in generator for offline work).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class LossKind(str, Enum):
    MSE = "mse"
    XENT = "xent"


@dataclass
class Batch:
    """inputs is (T, n_in, B); targets depend on the task: float (B,) for
    adding, int class ids (T, B) for copy, int class ids (B,) for images."""
    inputs: np.ndarray
    targets: np.ndarray
    loss: LossKind


def gen_adding(rng: Rng, batch: int, steps: int, placement: str = "halves") -> Batch:
    """Adding problem: channel 0 holds U(0,1) values, channel 1 marks two
    positions with 1; the target is the sum of the two marked values.

    placement "halves" puts one marker in each half of the sequence (the
    usual protocol); "uniform" draws two distinct positions anywhere.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    values = rng.uniforms(steps * batch).reshape(steps, batch)
    markers = np.zeros((steps, batch))
    if placement == "halves":
        half = steps // 2
        first = rng.integers_below(half, batch)
        second = half + rng.integers_below(steps - half, batch)
    elif placement == "uniform":
        first = rng.integers_below(steps, batch)
        shift = 1 + rng.integers_below(steps - 1, batch)
        second = (first + shift) % steps
    else:
        raise ValueError(f"unknown placement {placement!r}")
    cols = np.arange(batch)
    markers[first, cols] = 1.0
    markers[second, cols] = 1.0
    inputs = np.stack([values, markers], axis=1)
    targets = values[first, cols] + values[second, cols]
    return Batch(inputs, targets, LossKind.MSE)


COPY_ALPHABET = 10  # digits 0..9; 9 doubles as the recall delimiter


def gen_copy(rng: Rng, batch: int, delay: int) -> Batch:
    """Copy-memory task over sequences of length delay + 20.

    Layout: 10 random digits from {1..8}, then delay-1 zeros, then eleven
    9s (the first 9 is the delimiter). The target sequence is zero except
    for the last 10 positions, which repeat the leading digits. Inputs are
    one-hot; the loss is per-step cross-entropy.
    """
    if delay < 1:
        raise ValueError("delay must be >= 1")
    total = delay + 20
    digits = 1 + rng.integers_below(8, 10 * batch).reshape(10, batch)
    classes = np.zeros((total, batch), dtype=np.int64)
    classes[:10] = digits
    classes[total - 11:] = 9
    inputs = np.zeros((total, COPY_ALPHABET, batch))
    cols = np.arange(batch)
    for t in range(total):
        inputs[t, classes[t], cols] = 1.0
    targets = np.zeros((total, batch), dtype=np.int64)
    targets[-10:] = digits
    return Batch(inputs, targets, LossKind.XENT)


def copy_baseline_nll(delay: int) -> float:
    """Mean per-step cross-entropy of the best memoryless predictor: exact
    zeros everywhere except ln(8) on each of the 10 recall positions."""
    return 10.0 * np.log(8.0) / (delay + 20)


# --- IDX (big-endian) digit image files -------------------------------------

class IdxFormatError(ValueError):
    """Malformed IDX file."""


class IdxMagicError(IdxFormatError):
    """Magic number or header dimensions do not match the expected type."""


class IdxTruncatedError(IdxFormatError):
    """Payload shorter than the header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files disagree on the number of items."""


@dataclass
class MnistSet:
    """Flattened digit images in [0,1] with labels; permutation records the
    pixel shuffle applied to a base set (None for unshuffled data)."""
    images: np.ndarray  # (N, 784) float64
    labels: np.ndarray  # (N,) int64
    permutation: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxTruncatedError(f"{path}: truncated {what} ({len(data)}/{count} bytes)")
    return data


def load_mnist_idx(images_path, labels_path) -> MnistSet:
    """Read an IDX image/label pair (the MNIST container format): big-endian
    headers, magic 0x803 with dims [N,28,28] for images and 0x801 with [N]
    for labels. Pixels are scaled to [0,1] and flattened row-major to 784."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(f"{images_path}: bad image magic 0x{magic:08x}")
        if rows != 28 or cols != 28:
            raise IdxMagicError(f"{images_path}: expected 28x28 images, got {rows}x{cols}")
        raw = _read_exact(fh, n * rows * cols, images_path, "pixel payload")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(n, rows * cols)

    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(f"{labels_path}: bad label magic 0x{magic:08x}")
        raw = _read_exact(fh, n_labels, labels_path, "label payload")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_labels:
        raise IdxCountMismatchError(
            f"{images_path} has {n} images but {labels_path} has {n_labels} labels"
        )
    return MnistSet(images, labels)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write an image/label pair in IDX format (inverse of load_mnist_idx)."""
    images = np.asarray(images)
    n = images.shape[0]
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, 28, 28))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def permute_pixels(data: MnistSet, seed: int) -> MnistSet:
    """Apply one fixed Fisher-Yates pixel permutation to every image."""
    perm = Rng(seed, stream=41).shuffled(data.images.shape[1])
    return MnistSet(data.images[:, perm], data.labels.copy(), permutation=perm)


# --- synthetic digit images (offline stand-in with MNIST shapes) ------------

_SEGMENTS = {  # 7-segment layout: which of (top, tl, tr, mid, bl, br, bottom)
    0: (1, 1, 1, 0, 1, 1, 1),
    1: (0, 0, 1, 0, 0, 1, 0),
    2: (1, 0, 1, 1, 1, 0, 1),
    3: (1, 0, 1, 1, 0, 1, 1),
    4: (0, 1, 1, 1, 0, 1, 0),
    5: (1, 1, 0, 1, 0, 1, 1),
    6: (1, 1, 0, 1, 1, 1, 1),
    7: (1, 0, 1, 0, 0, 1, 0),
    8: (1, 1, 1, 1, 1, 1, 1),
    9: (1, 1, 1, 1, 0, 1, 1),
}


def _render_digit(digit: int, dx: int, dy: int) -> np.ndarray:
    img = np.zeros((28, 28))
    x0, x1 = 8 + dx, 19 + dx
    y0, y1, y2 = 4 + dy, 13 + dy, 23 + dy
    t = 2  # stroke thickness
    seg = _SEGMENTS[digit]
    if seg[0]:
        img[y0:y0 + t, x0:x1] = 1.0
    if seg[1]:
        img[y0:y1, x0:x0 + t] = 1.0
    if seg[2]:
        img[y0:y1, x1 - t:x1] = 1.0
    if seg[3]:
        img[y1:y1 + t, x0:x1] = 1.0
    if seg[4]:
        img[y1:y2, x0:x0 + t] = 1.0
    if seg[5]:
        img[y1:y2, x1 - t:x1] = 1.0
    if seg[6]:
        img[y2:y2 + t, x0:x1] = 1.0
    return img


def synth_digits(rng: Rng, count: int) -> MnistSet:
    """Deterministic seven-segment digit images with jitter and noise: a
    stand-in with MNIST's exact shapes for environments without the real
    files. Classes are balanced up to rounding."""
    images = np.empty((count, 784))
    labels = np.empty(count, dtype=np.int64)
    digits = rng.integers_below(10, count)
    jitter = rng.integers_below(7, 2 * count).reshape(2, count) - 3
    noise = rng.uniforms(count * 784).reshape(count, 784)
    gains = 0.75 + 0.25 * rng.uniforms(count)
    for i in range(count):
        d = int(digits[i])
        img = _render_digit(d, int(jitter[0, i]), int(jitter[1, i])) * gains[i]
        images[i] = np.clip(img.ravel() + 0.10 * noise[i], 0.0, 1.0)
        labels[i] = d
    return MnistSet(images, labels)
