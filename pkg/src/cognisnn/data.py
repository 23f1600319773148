"""Datasets: IDX file reading/writing, spike encoding, synthetic task pairs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("=").kind + str(dt.itemsize): code for code, dt in _IDX_TYPES.items()}
ENCODINGS = ("repeat", "rate")


def read_idx(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError("IDX header truncated", len(blob))
    if blob[0] != 0 or blob[1] != 0 or blob[2] not in _IDX_TYPES:
        raise FormatError(f"bad IDX magic {blob[:4].hex()}", 0)
    dtype = _IDX_TYPES[blob[2]]
    ndim = blob[3]
    if ndim == 0:
        raise FormatError("IDX file declares zero dimensions", 3)
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError("IDX dimension list truncated", len(blob))
    shape = struct.unpack(f">{ndim}I", blob[4:header_end])
    count = int(np.prod(shape))
    if count == 0:
        raise FormatError("IDX payload is empty", header_end)
    expected = header_end + count * dtype.itemsize
    if len(blob) < expected:
        raise FormatError(f"IDX payload truncated: need {expected} bytes, have {len(blob)}", len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after IDX payload", expected)
    return np.frombuffer(blob, dtype=dtype, count=count, offset=header_end).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = array.dtype.kind + str(array.dtype.itemsize)
    if key not in _IDX_CODES:
        raise InvalidArgumentError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path=None):
    """Images scaled into [0, 1] (8-bit data divided by 255), plus labels if given."""
    raw = read_idx(images_path)
    if raw.dtype.kind == "u" and raw.dtype.itemsize == 1:
        images = raw.astype(np.float64) / 255.0
    else:
        images = raw.astype(np.float64)
        lo, hi = images.min(), images.max()
        if lo < 0 or hi > 1:
            images = (images - lo) / (hi - lo) if hi > lo else np.zeros_like(images)
    if labels_path is None:
        return images
    labels = read_idx(labels_path).astype(np.int64)
    if len(labels) != len(images):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    return images, labels


@dataclass
class EncodedDataset:
    """``inputs`` is sample-major ``[N, T, C, H, W]``; batches are handed out time-major."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    encoding: str

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def time_steps(self) -> int:
        return self.inputs.shape[1]

    def batch(self, index) -> tuple[np.ndarray, np.ndarray]:
        x = np.ascontiguousarray(self.inputs[index].transpose(1, 0, 2, 3, 4))
        return x, self.labels[index]

    def subset(self, index) -> "EncodedDataset":
        return EncodedDataset(self.inputs[index], self.labels[index], self.num_classes, self.encoding)


def encode(images: np.ndarray, labels, time_steps: int, mode: str = "repeat", seed: int = 0,
           num_classes: int | None = None) -> EncodedDataset:
    """Turn ``[N, H, W]`` or ``[N, C, H, W]`` intensities into T-step inputs.

    ``repeat`` copies the frame at every step; ``rate`` emits a Bernoulli spike
    with probability equal to the pixel value at each step.
    """
    if time_steps < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {time_steps}")
    if mode not in ENCODINGS:
        raise InvalidArgumentError(f"encoding must be one of {ENCODINGS}, got {mode!r}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    frames = np.repeat(images[:, None], time_steps, axis=1)
    if mode == "rate":
        rng = np.random.default_rng(seed)
        frames = (rng.random(frames.shape) < frames).astype(np.float64)
    classes = int(labels.max()) + 1 if num_classes is None else num_classes
    return EncodedDataset(frames, labels, classes, mode)


# --- synthetic pattern tasks -------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    size: int = 8
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 0.15
    time_steps: int = 4
    encoding: str = "repeat"


@dataclass
class TaskSplit:
    train: EncodedDataset
    test: EncodedDataset


def _line(size: int, rng, kind: str) -> np.ndarray:
    img = np.zeros((size, size))
    r = int(rng.integers(1, size - 1))
    c = int(rng.integers(1, size - 1))
    span = int(rng.integers(size // 2, size + 1))
    start = int(rng.integers(0, size - span + 1))
    idx = np.arange(start, start + span)
    if kind == "h":
        img[r, idx] = 1.0
    elif kind == "v":
        img[idx, c] = 1.0
    elif kind == "d":
        shift = int(rng.integers(-1, 2))
        rows = idx
        cols = np.clip(idx + shift, 0, size - 1)
        img[rows, cols] = 1.0
    elif kind == "a":
        shift = int(rng.integers(-1, 2))
        rows = idx
        cols = np.clip(size - 1 - idx + shift, 0, size - 1)
        img[rows, cols] = 1.0
    return img


def _stroke_pattern(cls: str, size: int, rng) -> np.ndarray:
    if cls in ("h", "v", "d", "a"):
        return _line(size, rng, cls)
    if cls == "cross":
        return np.maximum(_line(size, rng, "h"), _line(size, rng, "v"))
    if cls == "vee":
        return np.maximum(_line(size, rng, "d"), _line(size, rng, "a"))
    raise InvalidArgumentError(f"unknown stroke class {cls!r}")


def _texture_pattern(cls: str, size: int, rng) -> np.ndarray:
    # one-pixel checkerboards, told apart by where the phase flips
    yy, xx = np.mgrid[0:size, 0:size]
    flip = np.zeros((size, size), dtype=int)
    cut = int(rng.integers(size // 4, 3 * size // 4 + 1))
    if cls == "split_v":
        flip = (xx >= cut).astype(int)
    elif cls == "split_h":
        flip = (yy >= cut).astype(int)
    elif cls != "checker":
        raise InvalidArgumentError(f"unknown texture class {cls!r}")
    return ((yy + xx + flip + int(rng.integers(0, 2))) % 2).astype(float)


TASK_CLASSES = {
    "strokes": ("h", "v", "d"),
    "strokes_shifted": ("a", "cross", "vee"),
    "textures": ("checker", "split_v", "split_h"),
}


def make_task(family: str, spec: SynthSpec, seed: int) -> TaskSplit:
    """Balanced, seeded pattern-classification task from one family."""
    if family not in TASK_CLASSES:
        raise InvalidArgumentError(f"unknown task family {family!r}; known: {sorted(TASK_CLASSES)}")
    classes = TASK_CLASSES[family]
    draw = _texture_pattern if family == "textures" else _stroke_pattern
    rng = np.random.default_rng(seed)
    splits = []
    for per_class in (spec.train_per_class, spec.test_per_class):
        images, labels = [], []
        for label, cls in enumerate(classes):
            for _ in range(per_class):
                base = draw(cls, spec.size, rng) * rng.uniform(0.6, 1.0)
                noisy = base + rng.normal(0.0, spec.noise, base.shape)
                images.append(np.clip(noisy, 0.0, 1.0))
                labels.append(label)
        order = rng.permutation(len(labels))
        images = np.stack(images)[order]
        labels = np.asarray(labels)[order]
        splits.append(encode(images, labels, spec.time_steps, spec.encoding,
                             seed=int(rng.integers(2**31)), num_classes=len(classes)))
    return TaskSplit(*splits)


def synth_tasks(similarity: str, spec: SynthSpec = SynthSpec(), seed: int = 0) -> tuple[TaskSplit, TaskSplit]:
    """Old task (strokes) plus a new task that is ``near`` (more strokes) or ``far`` (textures)."""
    if similarity not in ("near", "far"):
        raise InvalidArgumentError(f"similarity must be 'near' or 'far', got {similarity!r}")
    old = make_task("strokes", spec, seed)
    new = make_task("strokes_shifted" if similarity == "near" else "textures", spec, seed + 1)
    return old, new
