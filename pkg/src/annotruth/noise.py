"""Ground-truth noise models: transition-matrix builders and corruption.

Transition matrices are column-stochastic throughout: ``u[j, i]`` is the
probability that true class ``i`` is reported as class ``j``.  Four families
are supported (symmetric, pairflip, pairflip over a random permutation of the
class order, and asymmetric spread over the circularly-nearest classes), plus
morphological corruption of binary masks for segmentation annotators.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .seeding import stream

NOISE_KINDS = ("symmetric", "pairflip", "pairflip_permuted", "asymmetric")


@dataclass(frozen=True)
class TransitionMatrix:
    """C x C column-stochastic matrix, u[j, i] = p(noisy = j | true = i)."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ValueError(f"transition matrix must be square, got {u.shape}")
        if np.any(u < 0.0) or np.any(u > 1.0):
            raise ValueError("transition matrix entries must lie in [0, 1]")
        if np.max(np.abs(u.sum(axis=0) - 1.0)) > 1e-12:
            raise ValueError("transition matrix columns must sum to 1 within 1e-12")
        object.__setattr__(self, "u", u)

    @property
    def C(self) -> int:
        return self.u.shape[0]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"C={self.C}\n")
        for row in self.u:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "TransitionMatrix":
        with open(path) as fh:
            return cls.from_csv_text(fh.read())

    @classmethod
    def from_csv_text(cls, text: str) -> "TransitionMatrix":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or not lines[0].startswith("C="):
            raise DataError("transition CSV must start with a 'C=<n>' header")
        c = int(lines[0][2:])
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1 : c + 1]]
        return cls(np.array(rows))


@dataclass(frozen=True)
class NoiseSpec:
    """Declarative description of one annotator noise model."""

    kind: str
    rate: float
    permutation: tuple | None = None  # pairflip_permuted only
    neighborhood: int = 4  # asymmetric only

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"rate must lie in [0, 1), got {self.rate}")
        if self.permutation is not None:
            perm = tuple(int(p) for p in self.permutation)
            if sorted(perm) != list(range(len(perm))):
                raise ValueError(f"permutation {perm} is not a bijection on 0..{len(perm)-1}")
            object.__setattr__(self, "permutation", perm)
        if self.neighborhood < 1:
            raise ValueError(f"neighborhood must be positive, got {self.neighborhood}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "rate": self.rate}
        if self.permutation is not None:
            d["permutation"] = list(self.permutation)
        if self.kind == "asymmetric":
            d["neighborhood"] = self.neighborhood
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(
            kind=d["kind"],
            rate=float(d["rate"]),
            permutation=tuple(d["permutation"]) if d.get("permutation") is not None else None,
            neighborhood=int(d.get("neighborhood", 4)),
        )


def build_symmetric(C: int, rate: float) -> TransitionMatrix:
    """Keep the label with prob 1-rate, else reassign uniformly to the others."""
    _check_c_rate(C, rate)
    u = np.full((C, C), rate / (C - 1))
    np.fill_diagonal(u, 1.0 - rate)
    return TransitionMatrix(u)


def build_pairflip(C: int, rate: float) -> TransitionMatrix:
    """Flip each class to the next index (mod C) with prob rate."""
    _check_c_rate(C, rate)
    u = np.eye(C) * (1.0 - rate)
    for i in range(C):
        u[(i + 1) % C, i] += rate
    return TransitionMatrix(u)


def build_pairflip_permuted(
    C: int, rate: float, perm=None, seed: int | None = None
) -> TransitionMatrix:
    """Pairflip along a permuted class ordering.

    With permutation s, class s(i) flips to s(i+1 mod C) with prob rate.
    Either an explicit permutation or a seed to draw one must be given.
    """
    _check_c_rate(C, rate)
    if perm is None:
        if seed is None:
            raise ValueError("build_pairflip_permuted needs a permutation or a seed")
        perm = tuple(int(p) for p in stream(seed, "pairflip-perm").permutation(C))
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(C)):
        raise ValueError(f"invalid permutation {perm} for C={C}")
    u = np.eye(C) * (1.0 - rate)
    for i in range(C):
        u[perm[(i + 1) % C], perm[i]] += rate
    return TransitionMatrix(u)


def build_asymmetric(C: int, rate: float, neighborhood: int = 4) -> TransitionMatrix:
    """Spread the flip mass uniformly over the circularly-nearest classes.

    Neighbours are taken at circular index distance 1, 2, ... with both +k and
    -k included together, until at least ``neighborhood`` classes are in the
    set (so the set is always symmetric around the true class).
    """
    _check_c_rate(C, rate)
    if neighborhood >= C:
        raise ValueError(f"neighborhood {neighborhood} must be < C={C}")
    offsets: list[int] = []
    k = 1
    while len(offsets) < neighborhood:
        pair = {k % C, (-k) % C} - {0}
        offsets.extend(sorted(pair))
        k += 1
    u = np.eye(C) * (1.0 - rate)
    share = rate / len(offsets)
    for i in range(C):
        for off in offsets:
            u[(i + off) % C, i] += share
    return TransitionMatrix(u)


def build(spec: NoiseSpec, C: int, seed: int | None = None) -> TransitionMatrix:
    """Materialize a NoiseSpec into a transition matrix."""
    if spec.kind == "symmetric":
        return build_symmetric(C, spec.rate)
    if spec.kind == "pairflip":
        return build_pairflip(C, spec.rate)
    if spec.kind == "pairflip_permuted":
        return build_pairflip_permuted(C, spec.rate, perm=spec.permutation, seed=seed)
    return build_asymmetric(C, spec.rate, neighborhood=spec.neighborhood)


def _check_c_rate(C: int, rate: float):
    if C < 2:
        raise ValueError(f"need at least 2 classes, got C={C}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")


def corrupt_labels(y, T: TransitionMatrix, seed: int) -> np.ndarray:
    """Resample each label from the matching column of T, deterministically."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise DataError("corrupt_labels: empty label array")
    if y.min() < 0 or y.max() >= T.C:
        raise DataError(f"labels must lie in [0, {T.C}), got range [{y.min()}, {y.max()}]")
    cums = np.cumsum(T.u, axis=0)  # (C, C); column i is the CDF for true class i
    r = stream(seed, "corrupt-labels").random(y.size)
    comp = r[None, :] < cums[:, y]
    comp[-1, :] = True  # guard against r landing on the float summation gap
    return comp.argmax(axis=0).astype(np.int64)


def empirical_confusion(y, y_noisy, C: int) -> TransitionMatrix:
    """Column i = normalized histogram of noisy labels among samples with y=i."""
    y = np.asarray(y, dtype=np.int64)
    y_noisy = np.asarray(y_noisy, dtype=np.int64)
    if y.size == 0:
        raise DataError("empirical_confusion: empty input")
    if y.shape != y_noisy.shape:
        raise DataError("empirical_confusion: length mismatch")
    counts = np.zeros((C, C))
    np.add.at(counts, (y_noisy, y), 1.0)
    totals = counts.sum(axis=0)
    missing = np.flatnonzero(totals == 0)
    if missing.size:
        warnings.warn(f"classes {missing.tolist()} absent from y; columns set to identity")
        counts[missing, missing] = 1.0
        totals[missing] = 1.0
    return TransitionMatrix(counts / totals)


# ---------------------------------------------------------------------------
# binary mask corruption (segmentation annotators)

MASK_KINDS = ("thin", "thick", "fracture")


@dataclass(frozen=True)
class MaskNoiseParams:
    iterations: int = 1  # erosion/dilation passes
    n_fractures: int = 2
    fracture_len: tuple = (4, 8)  # inclusive pixel-length range

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "n_fractures": self.n_fractures,
            "fracture_len": list(self.fracture_len),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskNoiseParams":
        return cls(
            iterations=int(d.get("iterations", 1)),
            n_fractures=int(d.get("n_fractures", 2)),
            fracture_len=tuple(d.get("fracture_len", (4, 8))),
        )


def binary_erode(mask: np.ndarray) -> np.ndarray:
    """One erosion pass with the 3x3 cross; outside the image counts as 0."""
    p = np.pad(mask.astype(bool), 1, constant_values=False)
    return (
        p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    )


def binary_dilate(mask: np.ndarray) -> np.ndarray:
    """One dilation pass with the 3x3 cross."""
    p = np.pad(mask.astype(bool), 1, constant_values=False)
    return (
        p[1:-1, 1:-1] | p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]
    )


def corrupt_mask(
    mask: np.ndarray,
    kind: str,
    params: MaskNoiseParams = MaskNoiseParams(),
    seed: int = 0,
) -> np.ndarray:
    """Simulate a biased segmentation annotator on one binary mask.

    thin = iterated erosion, thick = iterated dilation, fracture = dilation
    followed by zeroing short random line segments through the foreground.
    """
    mask = np.asarray(mask)
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise DataError(f"corrupt_mask: mask must be binary, found values {vals[:5]}")
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask corruption {kind!r}; expected one of {MASK_KINDS}")
    m = mask.astype(bool)
    if kind == "thin":
        for _ in range(params.iterations):
            m = binary_erode(m)
    else:
        for _ in range(params.iterations):
            m = binary_dilate(m)
    if kind == "fracture":
        m = m.copy()
        rng = stream(seed, "fracture")
        fg = np.argwhere(m)
        lo, hi = params.fracture_len
        for _ in range(params.n_fractures):
            if fg.size == 0:
                break
            cy, cx = fg[rng.integers(len(fg))]
            angle = rng.uniform(0.0, np.pi)
            length = int(rng.integers(lo, hi + 1))
            dy, dx = np.sin(angle), np.cos(angle)
            ts = np.linspace(-length / 2.0, length / 2.0, 2 * length + 1)
            ys = np.clip(np.round(cy + ts * dy).astype(int), 0, m.shape[0] - 1)
            xs = np.clip(np.round(cx + ts * dx).astype(int), 0, m.shape[1] - 1)
            m[ys, xs] = False
    return m.astype(np.uint8)
