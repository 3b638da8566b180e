"""Datasets: IDX ingestion, synthetic fixtures, styling, multi-annotator
corruption, segmentation masks, and deterministic batching.

The trainer never touches clean labels: :meth:`LabeledDataset.train_view`
returns a reduced view (no clean-label field at all), and every fit runs off
that view.  Clean labels only resurface in evaluation hooks and diagnostics.
"""

from __future__ import annotations

import dataclasses
import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import noise
from .errors import ConfigError, DataError, FormatError
from .seeding import stream

STYLE_NAMES = ("original", "thin", "thick")

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.uint8: 0x08, np.int8: 0x09, np.int16: 0x0B, np.int32: 0x0C,
              np.float32: 0x0D, np.float64: 0x0E}


def _open(path, mode="rb"):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def read_idx(path) -> np.ndarray:
    """Read one IDX file (big-endian, standard magic layout)."""
    with _open(path) as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise FormatError(f"{path}: bad IDX magic {head!r}")
        code, ndim = head[2], head[3]
        if code not in _IDX_DTYPES:
            raise FormatError(f"{path}: unknown IDX dtype code 0x{code:02x}")
        raw = fh.read(4 * ndim)
        if len(raw) != 4 * ndim:
            raise FormatError(f"{path}: truncated IDX header")
        shape = struct.unpack(f">{ndim}I", raw)
        dtype = _IDX_DTYPES[code]
        count = int(np.prod(shape))
        buf = fh.read(count * dtype.itemsize)
        if len(buf) != count * dtype.itemsize:
            raise FormatError(f"{path}: truncated IDX payload")
        arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray):
    """Write an array as an IDX file; round-trips bit-exactly."""
    arr = np.ascontiguousarray(arr)
    code = None
    for base, c in _IDX_CODES.items():
        if arr.dtype == np.dtype(base):
            code = c
            break
    if code is None:
        raise FormatError(f"IDX cannot store dtype {arr.dtype}")
    with _open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


@dataclass(frozen=True)
class TrainView:
    """What the trainer is allowed to see: inputs and noisy labels only."""

    inputs: np.ndarray
    noisy_labels: tuple
    style: np.ndarray | None
    C: int
    task: str

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def R(self) -> int:
        return len(self.noisy_labels)


@dataclass
class AnnotatorProfile:
    """Per-style noise specs for one annotator (style id -> NoiseSpec)."""

    per_style: dict

    def spec_for(self, style: int) -> noise.NoiseSpec:
        if style not in self.per_style:
            raise ConfigError(f"annotator profile missing an entry for style {style}")
        return self.per_style[style]

    def to_dict(self) -> dict:
        return {str(s): spec.to_dict() for s, spec in self.per_style.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotatorProfile":
        return cls({int(s): noise.NoiseSpec.from_dict(spec) for s, spec in d.items()})

    @classmethod
    def uniform(cls, spec: noise.NoiseSpec, styles=(0,)) -> "AnnotatorProfile":
        return cls({int(s): spec for s in styles})


@dataclass
class LabeledDataset:
    inputs: np.ndarray        # (N,H,W) float64 in [0,1]
    clean_labels: np.ndarray  # (N,) int64, or (N,H,W) uint8 masks
    noisy_labels: list        # R arrays shaped like clean_labels
    C: int
    style: np.ndarray | None = None  # (N,) int64, indexes STYLE_NAMES
    annotators: list | None = None   # resolved AnnotatorProfile per noisy set
    task: str = "classification"

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.clean_labels.shape[0] != n:
            raise DataError("clean labels length does not match inputs")
        for r, lab in enumerate(self.noisy_labels):
            if lab.shape != self.clean_labels.shape:
                raise DataError(f"noisy label set {r} has shape {lab.shape}")
        if self.task == "classification" and self.noisy_labels:
            for lab in self.noisy_labels:
                if lab.min() < 0 or lab.max() >= self.C:
                    raise DataError("noisy labels outside [0, C)")

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def R(self) -> int:
        return len(self.noisy_labels)

    def train_view(self) -> TrainView:
        return TrainView(
            inputs=self.inputs,
            noisy_labels=tuple(self.noisy_labels),
            style=self.style,
            C=self.C,
            task=self.task,
        )


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load a classic MNIST-format pair (images 0x803, labels 0x801)."""
    with _open(images_path) as fh:
        if fh.read(4) != b"\x00\x00\x08\x03":
            raise FormatError(f"{images_path}: expected IDX image magic 0x00000803")
    with _open(labels_path) as fh:
        if fh.read(4) != b"\x00\x00\x08\x01":
            raise FormatError(f"{labels_path}: expected IDX label magic 0x00000801")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    return LabeledDataset(
        inputs=images.astype(np.float64) / 255.0,
        clean_labels=labels.astype(np.int64),
        noisy_labels=[],
        C=int(labels.max()) + 1,
    )


def make_synthetic_blobs(N: int, C: int, H: int = 28, seed: int = 0) -> LabeledDataset:
    """Class-conditional blob images: one soft disk per class, the class being
    encoded by the disk's position on a ring.  Adjacent class indexes sit at
    adjacent ring positions, so feature confusion aligns with pairflip noise.
    """
    rng = stream(seed, "blobs")
    labels = np.arange(N, dtype=np.int64) % C  # balanced within +-1
    labels = labels[rng.permutation(N)]
    centre = (H - 1) / 2.0
    ring = H / 3.5
    angles = 2.0 * np.pi * np.arange(C) / C
    ax = centre + ring * np.cos(angles)
    ay = centre + ring * np.sin(angles)
    jitter = rng.normal(0.0, 1.5, size=(N, 2))
    cx = ax[labels] + jitter[:, 0]
    cy = ay[labels] + jitter[:, 1]
    yy, xx = np.mgrid[0:H, 0:H]
    s = 2.6  # disk scale; 0.5-threshold radius ~ 1.18*s
    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    img = np.exp(-d2 / (2.0 * s * s))
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return LabeledDataset(
        inputs=np.clip(img, 0.0, 1.0),
        clean_labels=labels,
        noisy_labels=[],
        C=C,
    )


def _box3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1)
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out / 9.0


def stylize(ds: LabeledDataset, fractions=(1 / 3, 1 / 3, 1 / 3), seed: int = 0) -> LabeledDataset:
    """Assign original/thin/thick styles and morph the images accordingly.

    Thin and thick variants are made by thresholding at 0.5, one pass of 3x3
    cross erosion or dilation, then a 3x3 box re-smooth.  Labels are untouched.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"style fractions must be 3 values summing to 1, got {fractions}")
    n = ds.N
    counts = [int(round(f * n)) for f in fractions]
    counts[0] = n - counts[1] - counts[2]
    styles = np.repeat(np.arange(3, dtype=np.int64), counts)
    styles = styles[stream(seed, "stylize").permutation(n)]
    inputs = ds.inputs.copy()
    for i in np.flatnonzero(styles != 0):
        binary = ds.inputs[i] > 0.5
        morphed = noise.binary_erode(binary) if styles[i] == 1 else noise.binary_dilate(binary)
        inputs[i] = _box3(morphed.astype(np.float64))
    return LabeledDataset(
        inputs=inputs,
        clean_labels=ds.clean_labels.copy(),
        noisy_labels=[lab.copy() for lab in ds.noisy_labels],
        C=ds.C,
        style=styles,
        annotators=ds.annotators,
        task=ds.task,
    )


def annotate(ds: LabeledDataset, profiles, seed: int = 0) -> LabeledDataset:
    """Attach R noisy label sets, one per profile, with style-dependent noise.

    Permutations for pairflip_permuted specs are drawn here (when absent) and
    stored back into the returned dataset's annotator metadata, so the
    generating matrices stay reconstructible.
    """
    styles = ds.style if ds.style is not None else np.zeros(ds.N, dtype=np.int64)
    present = np.unique(styles)
    noisy_sets = list(ds.noisy_labels)
    resolved_profiles = list(ds.annotators or [])
    for r, profile in enumerate(profiles):
        resolved = {}
        noisy = np.empty(ds.N, dtype=np.int64)
        for s in present:
            spec = profile.spec_for(int(s))
            if spec.kind == "pairflip_permuted" and spec.permutation is None:
                perm = tuple(
                    int(p) for p in stream(seed, "annotate-perm", r, int(s)).permutation(ds.C)
                )
                spec = dataclasses.replace(spec, permutation=perm)
            resolved[int(s)] = spec
            T = noise.build(spec, ds.C)
            group = np.flatnonzero(styles == s)
            sub_seed = int(stream(seed, "annotate", r, int(s)).integers(2**62))
            noisy[group] = noise.corrupt_labels(ds.clean_labels[group], T, seed=sub_seed)
        noisy_sets.append(noisy)
        resolved_profiles.append(AnnotatorProfile(resolved))
    return LabeledDataset(
        inputs=ds.inputs,
        clean_labels=ds.clean_labels,
        noisy_labels=noisy_sets,
        C=ds.C,
        style=ds.style,
        annotators=resolved_profiles,
        task=ds.task,
    )


SEGMENTATION_KINDS = ("good", "thin", "thick", "fracture")


def make_segmentation_dataset(
    base: LabeledDataset,
    kinds=SEGMENTATION_KINDS,
    gauss_sigma: float = 0.2,
    seed: int = 0,
    mask_params: noise.MaskNoiseParams = noise.MaskNoiseParams(),
) -> LabeledDataset:
    """Binary-mask dataset with simulated annotators.

    The clean mask is the 0.5-thresholded image; inputs get additive Gaussian
    noise.  A "good" annotator reproduces the clean mask and is withheld from
    the training annotator sets (it only defines the reference labels).
    """
    for k in kinds:
        if k not in SEGMENTATION_KINDS:
            raise ConfigError(f"unknown segmentation annotator kind {k!r}")
    clean = (base.inputs > 0.5).astype(np.uint8)
    rng = stream(seed, "seg-input-noise")
    inputs = np.clip(base.inputs + rng.normal(0.0, gauss_sigma, base.inputs.shape), 0.0, 1.0) \
        if gauss_sigma > 0 else base.inputs.copy()
    noisy_masks = []
    annotators = []
    for r, kind in enumerate(kinds):
        if kind == "good":
            continue  # equals the clean mask; never shown to the trainer
        masks = np.empty_like(clean)
        seeds = stream(seed, "seg-masks", r).integers(2**62, size=base.N)
        for n in range(base.N):
            masks[n] = noise.corrupt_mask(clean[n], kind, mask_params, seed=int(seeds[n]))
        noisy_masks.append(masks)
        annotators.append({"kind": kind, "params": mask_params.to_dict()})
    return LabeledDataset(
        inputs=inputs,
        clean_labels=clean,
        noisy_labels=noisy_masks,
        C=2,
        annotators=annotators,
        task="segmentation",
    )


def batches(view: TrainView, batch_size: int, seed: int, epoch: int = 0):
    """Deterministic shuffled minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = stream(seed, "batches", epoch).permutation(view.N)
    for start in range(0, view.N, batch_size):
        idx = order[start : start + batch_size]
        yield view.inputs[idx], [lab[idx] for lab in view.noisy_labels], idx


# ---------------------------------------------------------------------------
# directory serialization (IDX files + JSON manifest)


def save_dataset(ds: LabeledDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "inputs.idx", ds.inputs)
    if ds.task == "classification":
        write_idx(out / "clean_labels.idx", ds.clean_labels.astype(np.uint8))
    else:
        write_idx(out / "clean_labels.idx", ds.clean_labels.astype(np.uint8))
    for r, lab in enumerate(ds.noisy_labels):
        write_idx(out / f"noisy_labels_{r:02d}.idx", lab.astype(np.uint8))
    if ds.style is not None:
        write_idx(out / "styles.idx", ds.style.astype(np.uint8))
    annotators = None
    if ds.annotators is not None:
        annotators = [
            a.to_dict() if isinstance(a, AnnotatorProfile) else a for a in ds.annotators
        ]
    manifest = {
        "task": ds.task,
        "N": int(ds.N),
        "C": int(ds.C),
        "R": int(ds.R),
        "styles": ds.style is not None,
        "annotators": annotators,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(in_dir) -> LabeledDataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    task = manifest["task"]
    inputs = read_idx(src / "inputs.idx")
    clean = read_idx(src / "clean_labels.idx")
    clean = clean.astype(np.int64) if task == "classification" else clean.astype(np.uint8)
    noisy = []
    for r in range(manifest["R"]):
        lab = read_idx(src / f"noisy_labels_{r:02d}.idx")
        noisy.append(lab.astype(np.int64) if task == "classification" else lab.astype(np.uint8))
    style = read_idx(src / "styles.idx").astype(np.int64) if manifest["styles"] else None
    annotators = None
    if manifest.get("annotators") is not None:
        annotators = [
            AnnotatorProfile.from_dict(a) if task == "classification" else a
            for a in manifest["annotators"]
        ]
    return LabeledDataset(
        inputs=inputs,
        clean_labels=clean,
        noisy_labels=noisy,
        C=manifest["C"],
        style=style,
        annotators=annotators,
        task=task,
    )
