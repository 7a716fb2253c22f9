"""Procedural image data, corruption grid, OOD and adversarial splits.

Images are (N, 1, 16, 16) float32 in [0, 1]. The clean generator draws
oriented sinusoidal gratings (class c gets orientation pi*c/C at a fixed
spatial frequency) with small phase jitter and additive pixel noise.
Corruptions come from a fixed severity-parameter table per type; every
corruption preserves labels, ordering, and size, and clamps pixels back
to [0, 1]. Generation and corruption are pure functions of (inputs, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enn import marginal_probs_batch, restrict_classes
from .errors import ContractError, FormatError

IMAGE_SIZE = 16

CORRUPTION_TYPES = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "contrast",
    "brightness",
    "pixelate",
)

SEVERITIES = (1, 2, 3, 4, 5)

# Fixed per-type parameter tables indexed by severity-1. Each knob moves
# strictly monotonically (direction depends on the knob: e.g. contrast
# factors shrink, noise sigmas grow).
SEVERITY_TABLES = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # additive sigma
    "shot_noise": (110.0, 55.0, 28.0, 14.0, 7.0),      # photons per unit intensity
    "impulse_noise": (0.02, 0.04, 0.07, 0.11, 0.17),   # salt/pepper fraction
    "defocus_blur": (0.5, 0.75, 1.0, 1.4, 2.0),        # gaussian blur sigma (px)
    "motion_blur": (3, 5, 7, 9, 11),                   # horizontal kernel length (px, odd)
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),           # contrast factor about the mean
    "brightness": (0.1, 0.18, 0.26, 0.36, 0.48),       # additive offset
    "pixelate": (2, 3, 4, 5, 6),                       # averaging block edge (px)
}


@dataclass
class ImageDataset:
    """Labeled images plus provenance sufficient to regenerate them."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "test"
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def subset(self, idx, split: str | None = None) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx],
                            split if split is not None else self.split,
                            dict(self.provenance))


def generate_dataset(n: int, classes: int, seed: int, *, noise_sigma: float = 0.05,
                     cycles: float = 3.0, phase_jitter: float = math.pi / 4,
                     amplitude_range=(0.45, 0.45), orientation_jitter: float = 0.0,
                     size: int = IMAGE_SIZE, split: str = "train") -> ImageDataset:
    """Oriented-grating images, balanced over classes within +/-1.

    Class c maps to orientation pi*c/classes at a fixed spatial frequency
    (``cycles`` periods across the image), with additive pixel noise.
    ``amplitude_range`` draws a per-example grating contrast and
    ``orientation_jitter`` spreads orientations over that fraction of the
    class bin, so nonzero values create genuinely hard low-contrast and
    near-boundary examples. Defaults keep every example at the bin center
    with full contrast. Deterministic given seed.
    """
    if classes < 1 or classes > 10:
        raise ContractError(f"grating generator supports 1..10 classes, got {classes}")
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    amp_lo, amp_hi = amplitude_range
    if not 0 < amp_lo <= amp_hi <= 0.5:
        raise ContractError(f"amplitude_range must satisfy 0 < lo <= hi <= 0.5, got {amplitude_range}")
    if not 0 <= orientation_jitter <= 1:
        raise ContractError(f"orientation_jitter must be in [0, 1], got {orientation_jitter}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes), counts)

    pos = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(pos, pos, indexing="ij")
    offset = rng.uniform(-orientation_jitter / 2, orientation_jitter / 2, size=n)
    theta = math.pi * (labels + offset) / classes
    phase = rng.uniform(-phase_jitter, phase_jitter, size=n)
    amplitude = rng.uniform(amp_lo, amp_hi, size=n)
    proj = (np.cos(theta)[:, None, None] * u[None] + np.sin(theta)[:, None, None] * v[None])
    images = 0.5 + amplitude[:, None, None] * np.sin(2 * math.pi * cycles * proj + phase[:, None, None])
    images = images + rng.normal(0.0, noise_sigma, size=images.shape)
    order = rng.permutation(n)
    images = np.clip(images[order], 0.0, 1.0).astype(np.float32)[:, None, :, :]
    labels = labels[order]
    return ImageDataset(images, labels, split, {
        "generator": "oriented-grating",
        "n": n, "classes": classes, "seed": int(seed),
        "noise_sigma": noise_sigma, "cycles": cycles,
        "phase_jitter": phase_jitter, "amplitude_range": [amp_lo, amp_hi],
        "orientation_jitter": orientation_jitter, "size": size,
    })


# -- IDX ingestion ---------------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at offset 0 ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == _IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == _IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dims at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated IDX payload at offset {len(raw)} (expected {expected} bytes)"
        )
    return np.frombuffer(raw[header:expected], dtype=np.uint8).reshape(dims)


def _area_resample_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix: output pixel i averages the source
    interval it covers."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(math.floor(lo)), int(math.ceil(hi))
        for j in range(j0, min(j1, src)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m


def load_idx(images_path, labels_path=None, *, size: int = IMAGE_SIZE,
             split: str = "test") -> ImageDataset:
    """Load an IDX image file (plus optional IDX label file).

    Pixels are scaled to [0, 1] and resampled to ``size`` x ``size`` by
    area averaging when source dimensions differ. Without a label file,
    labels are all zero.
    """
    images = _read_idx(images_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an IDX image file (magic 0x{_IDX_IMAGES_MAGIC:08x})")
    n, h, w = images.shape
    out = images.astype(np.float64) / 255.0
    if h != size:
        out = np.einsum("oh,nhw->now", _area_resample_matrix(h, size), out)
    if w != size:
        out = np.einsum("ow,nhw->nho", _area_resample_matrix(w, size), out)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)[:, None, :, :]
    if labels_path is not None:
        labels = _read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: expected an IDX label file (magic 0x{_IDX_LABELS_MAGIC:08x})")
        if len(labels) != n:
            raise FormatError(f"{labels_path}: {len(labels)} labels for {n} images")
        labels = labels.astype(np.int64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    return ImageDataset(out, labels, split, {
        "generator": "idx", "images_path": str(images_path),
        "labels_path": str(labels_path) if labels_path else None, "resampled_to": size,
    })


# -- corruptions -----------------------------------------------------------------


def _blur_1d(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Reflect-padded 1-D convolution along ``axis`` of (N, H, W) images."""
    radius_lo = (len(kernel) - 1) // 2
    radius_hi = len(kernel) - 1 - radius_lo
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius_lo, radius_hi)
    padded = np.pad(x, pad, mode="reflect")
    out = np.zeros_like(x)
    for t, kt in enumerate(kernel):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(t, t + x.shape[axis])
        out += kt * padded[tuple(sl)]
    return out


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def corrupt(dataset: ImageDataset, ctype: str, severity: int, seed: int) -> ImageDataset:
    """Apply one corruption type at a severity in 1..5.

    Labels, ordering, and size are preserved; pixels are clamped to
    [0, 1]; deterministic given seed.
    """
    if ctype not in SEVERITY_TABLES:
        raise ContractError(f"unknown corruption type {ctype!r}; expected one of {CORRUPTION_TYPES}")
    if severity not in SEVERITIES:
        raise ContractError(f"severity must be in {SEVERITIES}, got {severity}")
    param = SEVERITY_TABLES[ctype][severity - 1]
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), CORRUPTION_TYPES.index(ctype), severity])
    )
    x = dataset.images.astype(np.float64)[:, 0]  # (N, H, W)

    if ctype == "gaussian_noise":
        out = x + rng.normal(0.0, param, size=x.shape)
    elif ctype == "shot_noise":
        out = rng.poisson(np.maximum(x, 0.0) * param) / param
    elif ctype == "impulse_noise":
        hit = rng.random(x.shape) < param
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, np.where(salt, 1.0, 0.0), x)
    elif ctype == "defocus_blur":
        k = _gaussian_kernel(param)
        out = _blur_1d(_blur_1d(x, k, axis=1), k, axis=2)
    elif ctype == "motion_blur":
        k = np.full(int(param), 1.0 / int(param))
        out = _blur_1d(x, k, axis=2)
    elif ctype == "contrast":
        mean = x.mean(axis=(1, 2), keepdims=True)
        out = (x - mean) * param + mean
    elif ctype == "brightness":
        out = x + param
    else:  # pixelate: replace each s x s block with its mean
        s = int(param)
        out = x.copy()
        for i0 in range(0, x.shape[1], s):
            for j0 in range(0, x.shape[2], s):
                block = x[:, i0 : i0 + s, j0 : j0 + s]
                out[:, i0 : i0 + s, j0 : j0 + s] = block.mean(axis=(1, 2), keepdims=True)

    images = np.clip(out, 0.0, 1.0).astype(np.float32)[:, None]
    return ImageDataset(images, dataset.labels.copy(), f"corrupt:{ctype}:s{severity}", {
        **dataset.provenance,
        "corruption": ctype, "severity": severity, "corruption_param": param,
        "corruption_seed": int(seed),
    })


# -- splits -------------------------------------------------------------------


def make_ood_split(all_classes: int, in_dist, data: ImageDataset):
    """Partition a dataset into in-distribution and OOD parts by label.

    ``in_dist`` must be a strict subset of range(all_classes); the OOD
    part holds exactly the complement classes.
    """
    in_dist = np.unique(np.asarray(in_dist, dtype=np.int64))
    if in_dist.size == 0:
        raise ContractError("in_dist must be non-empty")
    if in_dist.min() < 0 or in_dist.max() >= all_classes:
        raise ContractError(f"in_dist {in_dist.tolist()} out of range for {all_classes} classes")
    if in_dist.size >= all_classes:
        raise ContractError("in_dist must be a strict subset of the classes")
    mask = np.isin(data.labels, in_dist)
    in_ds = data.subset(mask, split=data.split)
    ood_ds = data.subset(~mask, split="ood")
    ood_ds.provenance["in_dist_classes"] = in_dist.tolist()
    return in_ds, ood_ds


def make_adversarial_split(reference_model, test_set: ImageDataset, class_subset, *,
                           reference_id: str = "reference", seed: int = 0) -> ImageDataset:
    """Keep exactly the test examples the class-restricted reference model
    misclassifies.

    An all-correct reference yields an empty split with a warning, not an
    error.
    """
    restricted = restrict_classes(reference_model, class_subset)
    probs = marginal_probs_batch(restricted, test_set.images, n_index=1, seed=seed)
    preds = probs.argmax(axis=1)
    wrong = preds != test_set.labels
    if not wrong.any():
        warnings.warn("reference model classifies every test example correctly; "
                      "adversarial split is empty")
    out = test_set.subset(wrong, split="adversarial")
    out.provenance["reference_model"] = reference_id
    out.provenance["class_subset"] = [int(c) for c in np.asarray(class_subset).tolist()]
    return out


# -- suite persistence -----------------------------------------------------------


@dataclass
class ShiftSuite:
    """A family of evaluation sets: clean test, corruption grid, OOD, and
    (once a reference model exists) the adversarial split."""

    test: ImageDataset
    corruptions: dict
    ood: ImageDataset
    adversarial: ImageDataset | None
    class_subset: list
    reference_model_id: str | None

    def datasets(self):
        """Stable (name, dataset) iteration order."""
        yield "test", self.test
        for ctype in CORRUPTION_TYPES:
            for sev in SEVERITIES:
                if (ctype, sev) in self.corruptions:
                    yield f"corrupt:{ctype}:s{sev}", self.corruptions[(ctype, sev)]
        yield "ood", self.ood
        if self.adversarial is not None:
            yield "adversarial", self.adversarial


def save_dataset(ds: ImageDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, images=ds.images, labels=ds.labels, split=ds.split,
             provenance=json.dumps(ds.provenance, sort_keys=True))


def load_dataset(path) -> ImageDataset:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"dataset file {path} not found")
    with np.load(path, allow_pickle=False) as z:
        return ImageDataset(z["images"], z["labels"], str(z["split"]),
                            json.loads(str(z["provenance"])))


def _dataset_entry(name: str, ds: ImageDataset, path: str) -> dict:
    return {
        "name": name,
        "path": path,
        "n": len(ds),
        "split": ds.split,
        "digest": ds.digest(),
        "provenance": ds.provenance,
    }


def write_suite(suite: ShiftSuite, out_dir) -> dict:
    """Persist every dataset as .npz plus a JSON manifest; returns the
    manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, ds in suite.datasets():
        fname = name.replace(":", "_") + ".npz"
        save_dataset(ds, out_dir / fname)
        entries.append(_dataset_entry(name, ds, fname))
    manifest = {
        "format": "shift-suite/1",
        "class_subset": [int(c) for c in suite.class_subset],
        "reference_model": suite.reference_model_id,
        "adversarial": "present" if suite.adversarial is not None else "pending-reference",
        "datasets": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def load_suite(dir_path) -> ShiftSuite:
    dir_path = Path(dir_path)
    manifest_path = dir_path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"suite manifest {manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    by_name = {}
    for entry in manifest["datasets"]:
        ds = load_dataset(dir_path / entry["path"])
        if ds.digest() != entry["digest"]:
            raise FormatError(f"dataset {entry['name']} digest mismatch against manifest")
        by_name[entry["name"]] = ds
    corruptions = {}
    for ctype in CORRUPTION_TYPES:
        for sev in SEVERITIES:
            name = f"corrupt:{ctype}:s{sev}"
            if name in by_name:
                corruptions[(ctype, sev)] = by_name[name]
    return ShiftSuite(
        test=by_name["test"],
        corruptions=corruptions,
        ood=by_name["ood"],
        adversarial=by_name.get("adversarial"),
        class_subset=list(manifest["class_subset"]),
        reference_model_id=manifest.get("reference_model"),
    )
