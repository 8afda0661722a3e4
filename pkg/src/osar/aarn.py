"""Attention-supervised denoising network trained on synthesized pairs.

Two pieces share one loss:

* a small recurrent attention block (two 3x3 conv layers, weights shared
  across two time steps) that predicts where artifacts sit, supervised by
  the binary artifact map of each dirty/clean pair;
* a 10-layer convolutional autoencoder (4 encoder layers, stride 2 at
  layers 2-3; 6 decoder layers with nearest-neighbor upsampling before
  layers 6 and 8 and skip concatenations from encoder layers 1 and 2)
  that reconstructs the clean patch, supervised at three scales.

The quarter- and half-resolution supervision taps are 1x1 conv + sigmoid
heads on decoder layers 5 and 7; the full-resolution tap is the network
output itself, so the whole decoder receives gradient. Targets are the
clean patch average-pooled to each scale.

Both networks are fully convolutional: training runs on 32x32 patches,
inference on the whole image (reflect-padded to a multiple of 4).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .image import Image, denormalize_values
from .tensor import (
    Adam,
    ShapeError,
    Tape,
    Tensor,
    add,
    concat_channels,
    conv2d,
    mse_loss,
    relu,
    scale,
    sigmoid,
    upsample_nearest_2x,
    xavier_init,
)

ARTIFACT_THRESHOLD = 0.01
ATTENTION_STEP_WEIGHTS = (0.8, 1.0)
MULTISCALE_WEIGHTS = (0.6, 0.8, 1.0)
ATTENTION_STEPS = 2
MIN_INPUT_SIZE = 32


class CheckpointError(ValueError):
    """Malformed, truncated, or architecturally incompatible checkpoint."""


@dataclass(frozen=True)
class AarnArch:
    """Channel widths; the micro variant keeps gradient checks cheap."""

    attention_channels: int = 32
    encoder_channels: tuple = (32, 64, 64, 64)
    decoder_channels: tuple = (64, 64, 32, 32, 16, 1)

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 6:
            raise ValueError("architecture needs 4 encoder and 6 decoder layers")
        if self.decoder_channels[-1] != 1:
            raise ValueError("last decoder layer must emit 1 channel")

    def describe(self):
        return {
            "attention_channels": self.attention_channels,
            "encoder_channels": list(self.encoder_channels),
            "decoder_channels": list(self.decoder_channels),
        }


MICRO_ARCH = AarnArch(attention_channels=4,
                      encoder_channels=(4, 4, 4, 4),
                      decoder_channels=(4, 4, 4, 4, 4, 1))


class AarnModel:
    """Parameter container; forward passes live in :func:`forward_aarn`."""

    def __init__(self, rng, arch=None, dtype=np.float32):
        self.arch = arch or AarnArch()
        self.dtype = np.dtype(dtype)
        ca = self.arch.attention_channels
        e1, e2, e3, e4 = self.arch.encoder_channels
        d5, d6, d7, d8, d9, d10 = self.arch.decoder_channels
        self.params = {}

        def conv_param(name, cout, cin, k):
            self.params[f"{name}_w"] = xavier_init((cout, cin, k, k), rng, dtype=self.dtype)
            self.params[f"{name}_b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

        # attention block, shared across both time steps
        conv_param("att_conv1", ca, 2, 3)
        conv_param("att_conv2", ca, ca, 3)
        conv_param("att_head", 1, ca, 3)
        # encoder
        conv_param("enc1", e1, 2, 3)
        conv_param("enc2", e2, e1, 3)
        conv_param("enc3", e3, e2, 3)
        conv_param("enc4", e4, e3, 3)
        # decoder; layers 7 and 9 consume skip concatenations
        conv_param("dec5", d5, e4, 3)
        conv_param("head5", 1, d5, 1)
        conv_param("dec6", d6, d5, 3)
        conv_param("dec7", d7, d6 + e2, 3)
        conv_param("head7", 1, d7, 1)
        conv_param("dec8", d8, d7, 3)
        conv_param("dec9", d9, d8 + e1, 3)
        conv_param("dec10", d10, d9, 3)

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise ValueError("state dict does not match model parameters")
        for name, values in state.items():
            if values.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data = np.ascontiguousarray(values, dtype=self.dtype)

    def arch_hash(self):
        desc = {
            "arch": self.arch.describe(),
            "dtype": self.dtype.name,
            "params": sorted((n, list(t.shape)) for n, t in self.params.items()),
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).digest()


@dataclass
class AarnOutputs:
    """Forward-pass bundle; features are the three multiscale taps
    (quarter, half, full resolution) and features[2] is the output."""

    a1: Tensor
    a2: Tensor
    features: tuple
    output: Tensor


@dataclass
class InferenceResult:
    output: Image
    attention1: np.ndarray = field(repr=False)
    attention2: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def make_binary_map(dirty, clean, threshold=ARTIFACT_THRESHOLD):
    """Per-pixel artifact indicator: 1 where |dirty - clean| > threshold."""
    dirty = np.asarray(dirty)
    clean = np.asarray(clean)
    if dirty.shape != clean.shape:
        raise ShapeError(f"shape mismatch: {dirty.shape} vs {clean.shape}")
    return (np.abs(dirty - clean) > threshold).astype(dirty.dtype)


def attention_loss(tape, a1, a2, m):
    """0.8 * MSE(A1, M) + 1.0 * MSE(A2, M)."""
    w1, w2 = ATTENTION_STEP_WEIGHTS
    return add(tape, scale(tape, mse_loss(tape, a1, m), w1),
               scale(tape, mse_loss(tape, a2, m), w2))


def multiscale_loss(tape, features, targets):
    """Sum of weighted MSEs between decoder taps and pooled clean targets."""
    if len(features) != 3 or len(targets) != 3:
        raise ShapeError("multiscale loss expects exactly 3 feature/target scales")
    total = None
    for f, t, w in zip(features, targets, MULTISCALE_WEIGHTS):
        term = scale(tape, mse_loss(tape, f, t), w)
        total = term if total is None else add(tape, total, term)
    return total


def total_loss(tape, a1, a2, m, features, targets):
    """Unweighted sum of the attention and multiscale terms."""
    return add(tape, attention_loss(tape, a1, a2, m),
               multiscale_loss(tape, features, targets))


def avg_pool_2x(values):
    """2x average pooling over the two trailing (spatial) axes."""
    *lead, h, w = values.shape
    if h % 2 or w % 2:
        raise ShapeError(f"average pooling needs even dims, got {h}x{w}")
    return values.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _constant_map(x, value=0.5):
    b, _, h, w = x.shape
    return Tensor(np.full((b, 1, h, w), value, dtype=x.data.dtype))


def _attention_forward(model, tape, x):
    p = model.params
    a = _constant_map(x)
    maps = []
    for _ in range(ATTENTION_STEPS):
        inp = concat_channels(tape, x, a)
        h = relu(tape, conv2d(tape, inp, p["att_conv1_w"], p["att_conv1_b"], padding=1))
        h = relu(tape, add(tape, conv2d(tape, h, p["att_conv2_w"], p["att_conv2_b"], padding=1), h))
        a = sigmoid(tape, conv2d(tape, h, p["att_head_w"], p["att_head_b"], padding=1))
        maps.append(a)
    return maps[0], maps[1]


def _autoencoder_forward(model, tape, x, attention_map):
    p = model.params

    def block(t, name, stride=1):
        return relu(tape, conv2d(tape, t, p[f"{name}_w"], p[f"{name}_b"],
                                 stride=stride, padding=1))

    inp = concat_channels(tape, x, attention_map)
    e1 = block(inp, "enc1")
    e2 = block(e1, "enc2", stride=2)
    e3 = block(e2, "enc3", stride=2)
    e4 = block(e3, "enc4")

    d5 = block(e4, "dec5")
    f5 = sigmoid(tape, conv2d(tape, d5, p["head5_w"], p["head5_b"]))
    d6 = block(upsample_nearest_2x(tape, d5), "dec6")
    d7 = block(concat_channels(tape, d6, e2), "dec7")
    f7 = sigmoid(tape, conv2d(tape, d7, p["head7_w"], p["head7_b"]))
    d8 = block(upsample_nearest_2x(tape, d7), "dec8")
    d9 = block(concat_channels(tape, d8, e1), "dec9")
    out = sigmoid(tape, conv2d(tape, d9, p["dec10_w"], p["dec10_b"], padding=1))
    return (f5, f7, out), out


def forward_aarn(model, x, tape=None, attention_enabled=True):
    """Run attention + autoencoder on a (B, 1, H, W) batch.

    H and W must be >= 32; inputs not divisible by 4 are reflect-padded on
    the bottom/right and the output and attention maps cropped back (pure
    inference only; the stride-2/upsample round trip needs divisibility).
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W) input, got {x.shape}")
    _, _, h, w = x.shape
    if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
        raise ShapeError(f"input {h}x{w} smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")

    pad_h, pad_w = -h % 4, -w % 4
    if pad_h or pad_w:
        if tape is not None:
            raise ShapeError("training inputs must have dims divisible by 4")
        x = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect"))

    if attention_enabled:
        a1, a2 = _attention_forward(model, tape, x)
    else:
        a1 = a2 = _constant_map(x)  # ablation: autoencoder keeps its 2-channel input
    features, out = _autoencoder_forward(model, tape, x, a2)

    if pad_h or pad_w:
        a1 = Tensor(a1.data[:, :, :h, :w])
        a2 = Tensor(a2.data[:, :, :h, :w])
        out = Tensor(out.data[:, :, :h, :w])
        features = features[:2] + (out,)
    return AarnOutputs(a1=a1, a2=a2, features=features, output=out)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def train_aarn(model, pairs, batch_size=270, max_epochs=4, lr=0.0005, rng=None,
               attention_enabled=True, threshold=ARTIFACT_THRESHOLD, on_progress=None):
    """Adam on the combined loss; returns (model, per-epoch mean losses).

    With attention disabled the attention term is dropped and the
    autoencoder sees a constant 0.5 map in place of A2.
    """
    if not pairs:
        raise ValueError("training requires at least one dirty/clean pair")
    if rng is None:
        raise ValueError("pass an explicit numpy Generator for reproducibility")

    dirty = np.stack([p.dirty for p in pairs])[:, None].astype(model.dtype, copy=False)
    clean = np.stack([p.clean for p in pairs])[:, None].astype(model.dtype, copy=False)
    n = len(pairs)
    optimizer = Adam(model.parameters(), lr=lr)
    n_batches = (n + batch_size - 1) // batch_size

    history = []
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for bi in range(n_batches):
            idx = order[bi * batch_size:(bi + 1) * batch_size]
            db, cb = dirty[idx], clean[idx]
            targets = [cb]
            for _ in range(2):
                targets.insert(0, avg_pool_2x(targets[0]))
            targets = [Tensor(t) for t in targets]

            tape = Tape()
            outs = forward_aarn(model, Tensor(db), tape, attention_enabled=attention_enabled)
            if attention_enabled:
                m = Tensor(make_binary_map(db, cb, threshold))
                loss = total_loss(tape, outs.a1, outs.a2, m, outs.features, targets)
            else:
                loss = multiscale_loss(tape, outs.features, targets)

            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
            batch_loss = loss.item()
            epoch_loss += batch_loss * len(idx)
            if on_progress is not None:
                on_progress(epoch, max_epochs, bi, n_batches, batch_loss)
        history.append(epoch_loss / n)
    return model, history


def infer(model, image, attention_enabled=True):
    """Denoise a normalized image; output is mapped back to physical units."""
    x = image.pixels[None, None].astype(model.dtype)
    outs = forward_aarn(model, x, attention_enabled=attention_enabled)
    restored = denormalize_values(outs.output.data[0, 0], image)
    return InferenceResult(
        output=Image(restored),
        attention1=outs.a1.data[0, 0].astype(np.float64),
        attention2=outs.a2.data[0, 0].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"OSARAARN"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path):
    """Versioned binary dump: magic, version, arch hash, named tensors."""
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<I", CHECKPOINT_VERSION),
              model.arch_hash(),
              struct.pack("<B", model.dtype.itemsize),
              struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(t.data.astype(f"<f{model.dtype.itemsize}").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(model, path):
    """Fill ``model`` from a checkpoint, validating the architecture hash."""
    with open(path, "rb") as fh:
        blob = fh.read()

    view = memoryview(blob)
    pos = 0

    def take(count):
        nonlocal pos
        if pos + count > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + count]
        pos += count
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if bytes(take(32)) != model.arch_hash():
        raise CheckpointError(f"{path}: checkpoint was written for a different architecture")
    (itemsize,) = struct.unpack("<B", take(1))
    if itemsize != model.dtype.itemsize:
        raise CheckpointError(f"{path}: dtype width {itemsize} does not match model")
    (count,) = struct.unpack("<I", take(4))
    if count != len(model.params):
        raise CheckpointError(f"{path}: expected {len(model.params)} tensors, found {count}")

    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        payload = take(int(np.prod(shape)) * itemsize)
        state[name] = np.frombuffer(payload, dtype=f"<f{itemsize}").reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return model
