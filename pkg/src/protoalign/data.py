"""Synthetic class-conditional signal dataset, corruption suite, file I/O.

Samples are 1-D signals in [0, 1]: each class renders a fixed set of
Gaussian bumps; within-class variation perturbs bump positions, widths
and amplitudes and adds smooth noise. The ``difficulty`` knob scales the
variation from nearly separable (0) toward heavily overlapping classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}

DATASET_MAGIC = b"PROTODAT"
DATASET_VERSION = 1

CORRUPTION_KINDS = ("gaussian_noise", "impulse_noise", "contrast", "blur", "pixelate")

# severity tables, index severity-1; data range is [0, 1]
_GAUSS_SIGMA = (0.04, 0.08, 0.13, 0.19, 0.26)
_IMPULSE_RATE = (0.02, 0.05, 0.09, 0.14, 0.20)
_CONTRAST_FACTOR = (0.80, 0.65, 0.50, 0.38, 0.28)
_BLUR_SIGMA = (0.6, 1.0, 1.5, 2.1, 2.8)
_PIXELATE_BLOCK = (2, 3, 4, 6, 8)


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset file."""


class UnsupportedVersionError(DatasetFormatError):
    """Dataset file written by an incompatible format version."""


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 250
    input_len: int = 32
    difficulty: float = 0.5
    seed: int = 0
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.input_len < 8:
            raise ValueError("input_len must be at least 8")
        if self.difficulty < 0:
            raise ValueError("difficulty must be nonnegative")
        if not (0 < self.val_fraction < 1 and 0 < self.test_fraction < 1):
            raise ValueError("split fractions must lie in (0, 1)")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; choose from {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")


@dataclass
class Dataset:
    inputs: np.ndarray          # (N, input_len) float64 in [0, 1]
    labels: np.ndarray          # (N,) int64 < num_classes
    split: np.ndarray           # (N,) int8 of SPLIT_* codes
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0] or self.labels.shape != self.split.shape:
            raise ValueError("inputs, labels and split must agree on the sample count")

    @property
    def num_classes(self) -> int:
        return int(self.metadata["num_classes"])

    def subset(self, split_code: int) -> "Dataset":
        mask = self.split == split_code
        if not np.any(mask):
            raise ValueError(f"empty split {SPLIT_NAMES.get(split_code, split_code)}")
        meta = dict(self.metadata)
        meta["subset_of"] = SPLIT_NAMES.get(split_code, str(split_code))
        return Dataset(inputs=self.inputs[mask].copy(), labels=self.labels[mask].copy(),
                       split=self.split[mask].copy(), metadata=meta)


def _render_bumps(grid: np.ndarray, centers, widths, amps) -> np.ndarray:
    out = np.zeros_like(grid)
    for c, w, a in zip(centers, widths, amps):
        out += a * np.exp(-0.5 * ((grid - c) / w) ** 2)
    return out


def _class_templates(spec: DatasetSpec):
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xC1A55)))
    templates = []
    for _ in range(spec.num_classes):
        n_bumps = int(rng.integers(2, 5))
        centers = rng.uniform(0.1, 0.9, size=n_bumps)
        widths = rng.uniform(0.04, 0.12, size=n_bumps)
        amps = rng.uniform(0.35, 0.8, size=n_bumps) * rng.choice([-1.0, 1.0], size=n_bumps)
        templates.append((centers, widths, amps))
    return templates


def _sample_signal(template, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    centers, widths, amps = template
    d = spec.difficulty
    jitter_c = 0.004 + 0.05 * d
    jitter_s = 0.02 + 0.25 * d
    noise_amp = 0.005 + 0.09 * d
    c = centers + rng.normal(0.0, jitter_c, size=centers.shape)
    w = widths * np.exp(rng.normal(0.0, jitter_s, size=widths.shape))
    a = amps * np.exp(rng.normal(0.0, jitter_s, size=amps.shape))
    grid = np.linspace(0.0, 1.0, spec.input_len)
    signal = 0.5 + _render_bumps(grid, c, w, a)
    rough = rng.normal(0.0, 1.0, size=spec.input_len)
    signal += noise_amp * gaussian_filter1d(rough, 1.5, mode="reflect")
    return np.clip(signal, 0.0, 1.0)


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Deterministic per-seed dataset with disjoint train/val/test splits.

    Splits are assigned per class: the first ``test_fraction`` of each
    class's draws become test samples, then ``val_fraction`` of the rest
    become validation, mirroring an 80/20 train/validation convention on
    the non-test pool.
    """
    templates = _class_templates(spec)
    n_total = spec.num_classes * spec.samples_per_class
    inputs = np.empty((n_total, spec.input_len))
    labels = np.empty(n_total, dtype=np.int64)
    split = np.empty(n_total, dtype=np.int8)

    n_test = max(1, int(round(spec.samples_per_class * spec.test_fraction)))
    n_val = max(1, int(round((spec.samples_per_class - n_test) * spec.val_fraction)))
    if n_test + n_val >= spec.samples_per_class:
        raise ValueError("samples_per_class too small for the requested split fractions")

    idx = 0
    for cls in range(spec.num_classes):
        for j in range(spec.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xDA7A, cls, j)))
            inputs[idx] = _sample_signal(templates[cls], spec, rng)
            labels[idx] = cls
            split[idx] = (SPLIT_TEST if j < n_test
                          else SPLIT_VAL if j < n_test + n_val
                          else SPLIT_TRAIN)
            idx += 1

    metadata = {
        "num_classes": spec.num_classes,
        "input_len": spec.input_len,
        "samples_per_class": spec.samples_per_class,
        "difficulty": spec.difficulty,
        "seed": spec.seed,
        "val_fraction": spec.val_fraction,
        "test_fraction": spec.test_fraction,
    }
    return Dataset(inputs=inputs, labels=labels, split=split, metadata=metadata)


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

def _corrupt_sample(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.severity - 1
    if spec.kind == "gaussian_noise":
        return np.clip(x + rng.normal(0.0, _GAUSS_SIGMA[s], size=x.shape), 0.0, 1.0)
    if spec.kind == "impulse_noise":
        mask = rng.random(x.shape) < _IMPULSE_RATE[s]
        salt = rng.random(x.shape) < 0.5
        out = x.copy()
        out[mask & salt] = 1.0
        out[mask & ~salt] = 0.0
        return out
    if spec.kind == "contrast":
        return np.clip(0.5 + (x - 0.5) * _CONTRAST_FACTOR[s], 0.0, 1.0)
    if spec.kind == "blur":
        return np.clip(gaussian_filter1d(x, _BLUR_SIGMA[s], mode="reflect"), 0.0, 1.0)
    if spec.kind == "pixelate":
        block = _PIXELATE_BLOCK[s]
        n = x.shape[0]
        out = np.empty_like(x)
        for start in range(0, n, block):
            out[start:start + block] = x[start:start + block].mean()
        return out
    raise ValueError(f"unknown corruption kind {spec.kind!r}")


def corrupt(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Perturb inputs per the corruption spec; labels and splits unchanged."""
    out = np.empty_like(dataset.inputs)
    for i in range(dataset.inputs.shape[0]):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xC0, i)))
        out[i] = _corrupt_sample(dataset.inputs[i], spec, rng)
    meta = dict(dataset.metadata)
    meta["corruption"] = {"kind": spec.kind, "severity": spec.severity, "seed": spec.seed}
    return Dataset(inputs=out, labels=dataset.labels.copy(),
                   split=dataset.split.copy(), metadata=meta)


def impulse_rate_for_severity(severity: int) -> float:
    return _IMPULSE_RATE[severity - 1]


# ---------------------------------------------------------------------------
# file format: magic, version, json header, row-major float64/int64/int8 payload
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "metadata": dataset.metadata,
        "n": int(dataset.inputs.shape[0]),
        "input_len": int(dataset.inputs.shape[1]),
        "split_names": {str(k): v for k, v in SPLIT_NAMES.items()},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(DATASET_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        fh.write(np.ascontiguousarray(dataset.inputs, dtype=np.float64).tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype=np.int64).tobytes())
        fh.write(np.ascontiguousarray(dataset.split, dtype=np.int8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(DATASET_MAGIC) + 8 or raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic at offset 0)")
    off = len(DATASET_MAGIC)
    version = int.from_bytes(raw[off : off + 4], "little")
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(
            f"{path}: version {version} not supported (expected {DATASET_VERSION})"
        )
    off += 4
    header_len = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    if off + header_len > len(raw):
        raise DatasetFormatError(f"{path}: truncated header at offset {off}")
    try:
        header = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: corrupt header at offset {off}: {exc}") from exc
    off += header_len
    n, input_len = header["n"], header["input_len"]

    def take(count_bytes, what):
        nonlocal off
        if off + count_bytes > len(raw):
            raise DatasetFormatError(
                f"{path}: truncated at offset {off} while reading {what} "
                f"(need {count_bytes} bytes, have {len(raw) - off})"
            )
        chunk = raw[off : off + count_bytes]
        off += count_bytes
        return chunk

    inputs = np.frombuffer(take(n * input_len * 8, "inputs"), dtype=np.float64)
    labels = np.frombuffer(take(n * 8, "labels"), dtype=np.int64)
    split = np.frombuffer(take(n, "split"), dtype=np.int8)
    return Dataset(inputs=inputs.reshape(n, input_len).copy(), labels=labels.copy(),
                   split=split.copy(), metadata=header["metadata"])
