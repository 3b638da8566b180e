"""Networks: the classifier, per-annotator confusion heads, and the
pixel-wise segmentation variant, plus checkpoint IO.

The classifier emits a simplex vector per sample (per pixel for
segmentation).  Confusion heads emit column-stochastic C x C matrices —
softmax runs over the noisy-label index j within each true-class column i.
The product U(x) p(x) predicts each annotator's label distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .seeding import stream

IDENTITY_INIT_DELTA = 4.0  # softmax(diag=delta) puts ~0.858 mass on the diagonal at C=10


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 name: str, padding: int = 0):
        scale = np.sqrt(2.0 / (c_in * k * k))
        self.w = Tensor(rng.normal(0.0, scale, (c_out, c_in, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = padding
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.conv2d(x, self.w, padding=self.padding), self.b)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class LeNetClassifier:
    """conv(1->6,5x5)+pool, conv(6->16,5x5)+pool, dense(->120)+relu, dense(->C)."""

    def __init__(self, C: int, hw=(28, 28), conv_channels=(6, 16), fc_width: int = 120,
                 seed: int = 0, name: str = "clf"):
        rng = stream(seed, "init", name)
        h, w = hw
        c1, c2 = conv_channels
        self.conv1 = Conv2d(1, c1, 5, rng, f"{name}.conv1")
        self.conv2 = Conv2d(c1, c2, 5, rng, f"{name}.conv2")
        h1, w1 = (h - 4) // 2, (w - 4) // 2
        h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
        self.flat = c2 * h2 * w2
        self.fc1 = Dense(self.flat, fc_width, rng, f"{name}.fc1")
        self.fc2 = Dense(fc_width, C, rng, f"{name}.fc2")
        self.C = C
        self.hw = hw

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2:] != tuple(self.hw):
            raise DimensionError(f"classifier expects (B,1,{self.hw[0]},{self.hw[1]}), got {x.shape}")
        h = ad.maxpool2d(ad.relu(self.conv1(x)), 2)
        h = ad.maxpool2d(ad.relu(self.conv2(h)), 2)
        h = ad.reshape(h, (x.shape[0], self.flat))
        h = ad.relu(self.fc1(h))
        return self.fc2(h)

    def forward(self, x: Tensor) -> Tensor:
        return ad.softmax(self.logits(x), axis=1)

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.fc1.params() + self.fc2.params()


class SmallConvNet:
    """Reduced LeNet used by input-conditioned confusion heads."""

    def __init__(self, n_out: int, hw=(28, 28), seed: int = 0, name: str = "net"):
        rng = stream(seed, "init", name)
        h, w = hw
        self.conv1 = Conv2d(1, 4, 5, rng, f"{name}.conv1")
        self.conv2 = Conv2d(4, 8, 5, rng, f"{name}.conv2")
        h2 = ((h - 4) // 2 - 4) // 2
        w2 = ((w - 4) // 2 - 4) // 2
        self.flat = 8 * h2 * w2
        self.fc1 = Dense(self.flat, 32, rng, f"{name}.fc1")
        self.fc2 = Dense(32, n_out, rng, f"{name}.fc2")
        self.hw = hw

    def forward(self, x: Tensor) -> Tensor:
        h = ad.maxpool2d(ad.relu(self.conv1(x)), 2)
        h = ad.maxpool2d(ad.relu(self.conv2(h)), 2)
        h = ad.reshape(h, (x.shape[0], self.flat))
        h = ad.relu(self.fc1(h))
        return self.fc2(h)

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.fc1.params() + self.fc2.params()


class StaticConfusionHeads:
    """One trainable C x C logit matrix per annotator, identity-initialized."""

    mode = "static"

    def __init__(self, C: int, R: int, delta: float = IDENTITY_INIT_DELTA):
        self.C, self.R = C, R
        self.logits = [
            Tensor(delta * np.eye(C), requires_grad=True) for _ in range(R)
        ]

    def forward(self, r: int, x: Tensor) -> Tensor:
        """(B, C, C) column-stochastic matrices; constant in x."""
        self._check_r(r)
        m = ad.softmax(self.logits[r], axis=0)  # softmax over j within column i
        return ad.broadcast_to(ad.reshape(m, (1, self.C, self.C)),
                               (x.shape[0], self.C, self.C))

    def matrix(self, r: int) -> Tensor:
        self._check_r(r)
        return ad.softmax(self.logits[r], axis=0)

    def _check_r(self, r: int):
        if not 0 <= r < self.R:
            raise ValueError(f"annotator id {r} outside [0, {self.R})")

    def params(self):
        return [(f"heads.{r}.logits", t) for r, t in enumerate(self.logits)]


class FrozenIdentityHeads:
    """Exact identity confusion, no parameters; reduces the pipeline to
    plain cross-entropy training."""

    mode = "frozen_identity"

    def __init__(self, C: int, R: int):
        self.C, self.R = C, R

    def forward(self, r: int, x: Tensor) -> Tensor:
        if not 0 <= r < self.R:
            raise ValueError(f"annotator id {r} outside [0, {self.R})")
        eye = np.broadcast_to(np.eye(self.C), (x.shape[0], self.C, self.C))
        return Tensor(np.ascontiguousarray(eye))

    def params(self):
        return []


class ConditionedConfusionHeads:
    """One small CNN per annotator mapping the input image to C x C logits.

    The final layer starts at zero weights with the identity bias, so the
    initial confusion matches the static identity initialization.
    """

    mode = "conditioned"

    def __init__(self, C: int, R: int, hw=(28, 28), seed: int = 0,
                 delta: float = IDENTITY_INIT_DELTA):
        self.C, self.R = C, R
        self.nets = [
            SmallConvNet(C * C, hw=hw, seed=seed, name=f"head{r}") for r in range(R)
        ]
        for net in self.nets:
            net.fc2.w.data[:] = 0.0
            net.fc2.b.data[:] = (delta * np.eye(C)).reshape(-1)

    def forward(self, r: int, x: Tensor) -> Tensor:
        if not 0 <= r < self.R:
            raise ValueError(f"annotator id {r} outside [0, {self.R})")
        raw = self.nets[r].forward(x)
        m = ad.reshape(raw, (x.shape[0], self.C, self.C))
        return ad.softmax(m, axis=1)  # (B, j, i): columns sum to 1

    def params(self):
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out


@dataclass
class ForwardOut:
    probs: Tensor       # (B,C) or (B,C,H,W)
    noisy_probs: list   # per annotator: (B,C); segmentation: one (B,R,C,H,W) entry
    confusions: list    # per annotator: (B,C,C); segmentation: one (B,R,C,C,H,W) entry


class ClassificationModel:
    task = "classification"

    def __init__(self, clf: LeNetClassifier, heads):
        self.clf = clf
        self.heads = heads
        self.C = clf.C

    @classmethod
    def build(cls, C: int, R: int, hw=(28, 28), head_mode: str = "static", seed: int = 0,
              delta: float = IDENTITY_INIT_DELTA, conv_channels=(6, 16), fc_width=120):
        clf = LeNetClassifier(C, hw=hw, conv_channels=conv_channels,
                              fc_width=fc_width, seed=seed)
        if head_mode == "static":
            heads = StaticConfusionHeads(C, R, delta=delta)
        elif head_mode == "conditioned":
            heads = ConditionedConfusionHeads(C, R, hw=hw, seed=seed, delta=delta)
        elif head_mode == "frozen_identity":
            heads = FrozenIdentityHeads(C, R)
        else:
            raise ValueError(f"unknown head mode {head_mode!r}")
        return cls(clf, heads)

    def forward(self, x: Tensor) -> ForwardOut:
        p = self.clf.forward(x)
        qs, us = [], []
        for r in range(self.heads.R):
            u = self.heads.forward(r, x)
            q = ad.reshape(ad.matmul(u, ad.reshape(p, (x.shape[0], self.C, 1))),
                           (x.shape[0], self.C))
            qs.append(q)
            us.append(u)
        return ForwardOut(probs=p, noisy_probs=qs, confusions=us)

    def params(self):
        return self.clf.params() + self.heads.params()


class SegmentationModel:
    """Encoder-decoder with skip connections and two output layers: per-pixel
    class probabilities and per-pixel, per-annotator confusion matrices."""

    task = "segmentation"

    def __init__(self, R: int, C: int = 2, hw=(28, 28), seed: int = 0,
                 delta: float = IDENTITY_INIT_DELTA, base_channels: int = 8):
        rng = stream(seed, "init", "seg")
        ch = base_channels
        self.enc1 = Conv2d(1, ch, 3, rng, "seg.enc1", padding=1)
        self.enc2 = Conv2d(ch, 2 * ch, 3, rng, "seg.enc2", padding=1)
        self.mid = Conv2d(2 * ch, 4 * ch, 3, rng, "seg.mid", padding=1)
        self.dec1 = Conv2d(6 * ch, 2 * ch, 3, rng, "seg.dec1", padding=1)
        self.dec2 = Conv2d(3 * ch, ch, 3, rng, "seg.dec2", padding=1)
        self.class_head = Conv2d(ch, C, 1, rng, "seg.class_head")
        self.conf_head = Conv2d(ch, R * C * C, 1, rng, "seg.conf_head")
        self.conf_head.w.data[:] = 0.0
        self.conf_head.b.data[:] = (delta * np.eye(C))[None].repeat(R, axis=0).reshape(-1)
        self.C, self.R, self.hw = C, R, hw

    def _features(self, x: Tensor) -> Tensor:
        e1 = ad.relu(self.enc1(x))
        e2 = ad.relu(self.enc2(ad.maxpool2d(e1, 2)))
        m = ad.relu(self.mid(ad.maxpool2d(e2, 2)))
        d1 = ad.relu(self.dec1(ad.concat([ad.upsample2x(m), e2], axis=1)))
        d2 = ad.relu(self.dec2(ad.concat([ad.upsample2x(d1), e1], axis=1)))
        return d2

    def forward(self, x: Tensor) -> ForwardOut:
        B, _, H, W = x.shape
        feats = self._features(x)
        p = ad.softmax(self.class_head(feats), axis=1)  # (B,C,H,W)
        raw = ad.reshape(self.conf_head(feats), (B, self.R, self.C, self.C, H, W))
        u = ad.softmax(raw, axis=2)  # softmax over j within each column i
        # q[b,r,j,h,w] = sum_i u[b,r,j,i,h,w] * p[b,i,h,w]
        p_b = ad.broadcast_to(ad.reshape(p, (B, 1, 1, self.C, H, W)),
                              (B, self.R, self.C, self.C, H, W))
        q = ad.reduce_sum(ad.mul(u, p_b), axis=3)  # (B,R,C,H,W)
        return ForwardOut(probs=p, noisy_probs=[q], confusions=[u])

    def classifier_probs(self, x: Tensor) -> Tensor:
        return ad.softmax(self.class_head(self._features(x)), axis=1)

    def params(self):
        out = []
        for layer in (self.enc1, self.enc2, self.mid, self.dec1, self.dec2,
                      self.class_head, self.conf_head):
            out.extend(layer.params())
        return out


# ---------------------------------------------------------------------------
# functional views of the spec operations


def classifier_forward(clf, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return clf.forward(x)


def confusion_forward(heads, r: int, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return heads.forward(r, x)


def pipeline_forward(model: ClassificationModel, x):
    """Per-annotator predicted noisy distributions U(x) p(x)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    out = model.forward(x)
    return out.probs, out.noisy_probs


def predict(model_or_clf, x):
    """Argmax class ids (lowest index wins ties) and mean prediction entropy."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    with ad.no_grad():
        if isinstance(model_or_clf, (ClassificationModel,)):
            p = model_or_clf.clf.forward(x)
        elif isinstance(model_or_clf, SegmentationModel):
            p = model_or_clf.classifier_probs(x)
        else:
            p = model_or_clf.forward(x)
    probs = p.data
    ids = probs.argmax(axis=1)
    safe = np.where(probs > 0.0, probs, 1.0)  # 0 log 0 -> 0
    ent = -(probs * np.log(safe)).sum(axis=1)
    return ids, float(ent.mean())


# ---------------------------------------------------------------------------
# checkpoints: JSON header + flat float64 blob; round-trips bit-exactly


def model_state(model) -> dict:
    return {name: t.data.copy() for name, t in model.params()}


def load_state(model, state: dict):
    for name, t in model.params():
        if name not in state:
            raise KeyError(f"checkpoint missing tensor {name!r}")
        src = state[name]
        if src.shape != t.data.shape:
            raise DimensionError(f"{name}: checkpoint shape {src.shape} != {t.data.shape}")
        t.data[:] = src


def save_checkpoint(state: dict, path):
    names = sorted(state)
    header = {"tensors": []}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(state[name], dtype=np.float64)
        header["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct_pack_len(head))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode())
        data = fh.read()
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape)
        state[entry["name"]] = arr.copy()
    return state


def struct_pack_len(payload: bytes) -> bytes:
    return np.uint64(len(payload)).astype("<u8").tobytes()


import struct  # noqa: E402  (used by data module cousins; kept for parity)
