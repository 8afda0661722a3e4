"""Patch classifier plus paired-data generator.

A small CNN (three conv layers, two fully-connected layers) separates 32x32
patches into A-type (artifacts over a uniform background, the harvestable
kind) and N-type (everything else). Artifact patterns are the mean-removed
A-type patches; superposing them onto patches sampled from the image itself
yields the dirty/clean training pairs for the reduction network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .image import PATCH_SIZE

CLASS_LABELS = ("A", "N")  # logit index 0 = A, 1 = N

_CONV_CHANNELS = (16, 32, 64)
_FC_HIDDEN = 128


class PipelineError(RuntimeError):
    """A pipeline stage cannot proceed; message carries the remediation hint."""


class IdsnModel:
    """3 conv + 2 FC patch classifier; input (B, 1, 32, 32), output (B, 2) logits.

    Conv layers use 3x3 kernels; layers 2 and 3 stride by 2, so the FC head
    sees a 64 x 8 x 8 feature map.
    """

    def __init__(self, rng, dtype=np.float32):
        c1, c2, c3 = _CONV_CHANNELS
        self.dtype = np.dtype(dtype)
        flat = c3 * (PATCH_SIZE // 4) * (PATCH_SIZE // 4)
        self.params = {
            "conv1.w": T.xavier_init((c1, 1, 3, 3), rng, dtype),
            "conv1.b": T.Tensor(np.zeros(c1, dtype), requires_grad=True),
            "conv2.w": T.xavier_init((c2, c1, 3, 3), rng, dtype),
            "conv2.b": T.Tensor(np.zeros(c2, dtype), requires_grad=True),
            "conv3.w": T.xavier_init((c3, c2, 3, 3), rng, dtype),
            "conv3.b": T.Tensor(np.zeros(c3, dtype), requires_grad=True),
            "fc1.w": T.xavier_init((_FC_HIDDEN, flat), rng, dtype),
            "fc1.b": T.Tensor(np.zeros(_FC_HIDDEN, dtype), requires_grad=True),
            "fc2.w": T.xavier_init((len(CLASS_LABELS), _FC_HIDDEN), rng, dtype),
            "fc2.b": T.Tensor(np.zeros(len(CLASS_LABELS), dtype), requires_grad=True),
        }

    def parameters(self):
        return list(self.params.values())

    def forward(self, tape, x):
        p = self.params
        h = T.relu(tape, T.conv2d(tape, x, p["conv1.w"], p["conv1.b"], stride=1, padding=1))
        h = T.relu(tape, T.conv2d(tape, h, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
        h = T.relu(tape, T.conv2d(tape, h, p["conv3.w"], p["conv3.b"], stride=2, padding=1))
        flat = T.reshape(tape, h, (h.shape[0], -1))
        h = T.relu(tape, T.fully_connected(tape, flat, p["fc1.w"], p["fc1.b"]))
        return T.fully_connected(tape, h, p["fc2.w"], p["fc2.b"])

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        for name, arr in state.items():
            self.params[name].data = arr.copy()


def _stack_batch(patch_values, dtype):
    arr = np.stack(patch_values).astype(dtype)
    return T.Tensor(arr.reshape(len(patch_values), 1, PATCH_SIZE, PATCH_SIZE))


@dataclass
class TrainReport:
    holdout_accuracy: float
    epochs_run: int
    loss_history: list = field(default_factory=list)


def train_idsn(labeled_patches, rng, max_epochs=30, lr=0.0005, batch_size=64,
               holdout_fraction=0.2, patience=5, dtype=np.float32):
    """Train the classifier on augmented ROI patches.

    Splits 80/20 per class (stratified), optimizes softmax cross-entropy with
    Adam, and stops early once held-out accuracy has not improved for
    ``patience`` epochs. Returns (model, TrainReport); the model carries the
    best-epoch weights.
    """
    labels = np.array([CLASS_LABELS.index(p.label) for p in labeled_patches])
    if len(set(labels.tolist())) < 2:
        raise ValueError("training set must contain both A and N patches")

    values = [p.values for p in labeled_patches]
    train_idx, hold_idx = [], []
    for cls in range(len(CLASS_LABELS)):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_hold = max(1, int(round(len(idx) * holdout_fraction)))
        hold_idx.extend(idx[:n_hold])
        train_idx.extend(idx[n_hold:])
    train_idx = np.array(train_idx)
    hold_idx = np.array(hold_idx)

    model = IdsnModel(rng, dtype)
    opt = T.Adam(model.parameters(), lr=lr)
    hold_x = _stack_batch([values[i] for i in hold_idx], dtype)
    hold_y = labels[hold_idx]

    best_acc = -1.0
    best_state = None
    best_epoch = 0
    history = []
    for epoch in range(max_epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            x = _stack_batch([values[i] for i in batch], dtype)
            tape = T.Tape()
            loss = T.softmax_cross_entropy(tape, model.forward(tape, x), labels[batch])
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            epoch_loss += loss.item() * len(batch)
        history.append(epoch_loss / len(order))

        logits = model.forward(None, hold_x)
        acc = float((np.argmax(logits.data, axis=1) == hold_y).mean())
        if acc > best_acc:
            best_acc = acc
            best_state = model.state_dict()
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break

    model.load_state_dict(best_state)
    return model, TrainReport(holdout_accuracy=best_acc, epochs_run=len(history), loss_history=history)


def classify_patches(model, patches, batch_size=512):
    """Label each patch A or N; exact logit ties resolve to N so ambiguous
    patches never feed the pattern pool."""
    labels = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        x = _stack_batch([p.values for p in chunk], model.dtype)
        logits = model.forward(None, x).data
        labels.extend("A" if a > n else "N" for a, n in logits)
    return labels


def extract_artifact_pattern(patch_values):
    """Zero-mean residual of an A-type patch."""
    values = np.asarray(patch_values, dtype=np.float64)
    return values - values.mean()


@dataclass
class PairedPatch:
    """One training sample for the reduction network.

    ``pattern_index`` is -1 for identity pairs, otherwise the index of the
    superposed pattern (kept so tests can re-derive dirty from clean).
    """

    dirty: np.ndarray
    clean: np.ndarray
    is_identity: bool
    pattern_index: int = -1


def synthesize_pairs(patterns, patches, target_count=100_000, identity_fraction=0.1, rng=None):
    """Build exactly ``target_count`` dirty/clean pairs.

    Non-identity pairs superpose a uniformly drawn pattern onto a uniformly
    drawn patch (with replacement), clamping to [0,1]; identity pairs repeat
    a patch unchanged. The output order is shuffled.
    """
    if rng is None:
        raise ValueError("synthesize_pairs needs an explicit rng for reproducibility")
    if not patterns:
        raise PipelineError(
            "no artifact patches detected: the classifier found no A-type patches "
            "to harvest patterns from; annotate more A-type ROIs and rerun"
        )
    if not patches:
        raise ValueError("patch pool is empty")

    n_identity = int(round(target_count * identity_fraction))
    n_noisy = target_count - n_identity

    pool = np.stack([p.values for p in patches]).astype(np.float32)
    pattern_bank = np.stack(patterns).astype(np.float32)

    clean_idx = rng.integers(len(pool), size=n_noisy)
    pattern_idx = rng.integers(len(pattern_bank), size=n_noisy)
    identity_idx = rng.integers(len(pool), size=n_identity)

    pairs = []
    for ci, pi in zip(clean_idx, pattern_idx):
        clean = pool[ci]
        dirty = np.clip(clean + pattern_bank[pi], 0.0, 1.0)
        pairs.append(PairedPatch(dirty=dirty, clean=clean, is_identity=False, pattern_index=int(pi)))
    for ci in identity_idx:
        clean = pool[ci]
        pairs.append(PairedPatch(dirty=clean, clean=clean, is_identity=True))

    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def dump_pairs(pairs, path):
    """Binary dump: uint32 pair count, then per pair the dirty and clean 32x32
    float32 little-endian rasters, interleaved."""
    with open(path, "wb") as fh:
        fh.write(np.uint32(len(pairs)).tobytes())
        for pair in pairs:
            fh.write(pair.dirty.astype("<f4").tobytes())
            fh.write(pair.clean.astype("<f4").tobytes())


def load_pairs(path):
    raw = np.fromfile(path, dtype="<u4", count=1)
    count = int(raw[0])
    data = np.fromfile(path, dtype="<f4", offset=4)
    expected = count * 2 * PATCH_SIZE * PATCH_SIZE
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {data.size}")
    data = data.reshape(count, 2, PATCH_SIZE, PATCH_SIZE)
    return [
        PairedPatch(dirty=d.copy(), clean=c.copy(), is_identity=bool(np.array_equal(d, c)))
        for d, c in data
    ]
