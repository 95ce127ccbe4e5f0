"""Minimal dense-tensor neural substrate.

Networks are plain compositions of dense and 3x3 convolutional layers over
float64 numpy arrays, with hand-written backward passes. Only the two small
architectures used by the arena are supported: a 2-conv / 2-dense image
classifier and single/stacked dense heads. Weights are immutable by
convention once a model is deployed behind an oracle; training mutates a
network in place and is single-writer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, TrainingDivergedError

WEIGHTS_MAGIC = b"AMGW"
WEIGHTS_VERSION = 1

_ACTIVATIONS = ("none", "relu", "tanh")


def _check_activation(name):
    if name not in _ACTIVATIONS:
        raise InvalidInputError(f"unknown activation {name!r}")


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z_out, activation):
    # Gradients are expressed through the activated output.
    if activation == "relu":
        return (z_out > 0).astype(z_out.dtype)
    if activation == "tanh":
        return 1.0 - z_out * z_out
    return np.ones_like(z_out)


@dataclass
class Dense:
    """Fully connected layer: ``y = act(x @ weight + bias)``."""

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "none"

    def forward(self, x, cache=None):
        z = x @ self.weight + self.bias
        out = _activate(z, self.activation)
        if cache is not None:
            cache.append((x, out))
        return out

    def backward(self, dout, cache_entry):
        x, out = cache_entry
        dz = dout * _activation_grad(out, self.activation)
        dw = x.T @ dz
        db = dz.sum(axis=0)
        dx = dz @ self.weight.T
        return dx, [dw, db]

    def params(self):
        return [self.weight, self.bias]


@dataclass
class Conv2d:
    """3x3 same-padding convolution with optional 2x2 max pooling.

    Input and output are (N, C, H, W). ``pool`` of 1 disables pooling.
    """

    weight: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray  # (out_c,)
    activation: str = "relu"
    pool: int = 2

    def forward(self, x, cache=None):
        n, c, h, w = x.shape
        out_c, in_c, k, _ = self.weight.shape
        if c != in_c:
            raise InvalidInputError(
                f"conv expects {in_c} input channels, got {c}")
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # (N, C, H, W, k, k) -> (N, H*W, C*k*k)
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)
        wmat = self.weight.reshape(out_c, c * k * k).T
        z = cols @ wmat + self.bias
        z = z.reshape(n, h, w, out_c).transpose(0, 3, 1, 2)
        out = _activate(z, self.activation)
        pooled, pool_idx = out, None
        if self.pool > 1:
            pooled, pool_idx = _maxpool(out, self.pool)
        if cache is not None:
            cache.append((x.shape, cols, out, pool_idx))
        return pooled

    def backward(self, dout, cache_entry):
        x_shape, cols, out, pool_idx = cache_entry
        n, c, h, w = x_shape
        out_c, in_c, k, _ = self.weight.shape
        if self.pool > 1:
            dout = _maxpool_backward(dout, pool_idx, out.shape, self.pool)
        dz = dout * _activation_grad(out, self.activation)
        dz2 = dz.transpose(0, 2, 3, 1).reshape(n, h * w, out_c)
        wmat = self.weight.reshape(out_c, c * k * k)
        dw = np.einsum("npi,npo->oi", cols, dz2).reshape(self.weight.shape)
        db = dz2.sum(axis=(0, 1))
        dcols = dz2 @ wmat  # (N, H*W, C*k*k)
        dx = _col2im(dcols, x_shape, k)
        return dx, [dw, db]

    def params(self):
        return [self.weight, self.bias]


def _maxpool(x, p):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // p, p, w // p, p)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // p, w // p, p * p)
    idx = xr.argmax(axis=-1)
    pooled = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def _maxpool_backward(dpooled, idx, out_shape, p):
    n, c, h, w = out_shape
    dxr = np.zeros((n, c, h // p, w // p, p * p), dtype=dpooled.dtype)
    np.put_along_axis(dxr, idx[..., None], dpooled[..., None], axis=-1)
    dxr = dxr.reshape(n, c, h // p, w // p, p, p).transpose(0, 1, 2, 4, 3, 5)
    return dxr.reshape(n, c, h, w)


def _col2im(dcols, x_shape, k):
    n, c, h, w = x_shape
    pad = k // 2
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(n, h, w, c, k, k)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + h, dj:dj + w] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + w]


@dataclass
class Network:
    """Ordered stack of layers ending in a width-``num_classes`` dense head."""

    layers: list
    num_classes: int
    input_shape: tuple = ()
    history: list = field(default_factory=list, repr=False)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def copy(self):
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append(Dense(layer.weight.copy(), layer.bias.copy(),
                                    layer.activation))
            else:
                layers.append(Conv2d(layer.weight.copy(), layer.bias.copy(),
                                     layer.activation, layer.pool))
        return Network(layers, self.num_classes, self.input_shape)


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_dense_net(rng, in_dim, widths, num_classes, hidden_activation="relu"):
    """Dense stack; ``widths`` may be empty for a single linear-softmax layer."""
    layers = []
    prev = in_dim
    for w in widths:
        layers.append(Dense(_uniform_init(rng, (prev, w), prev),
                            _uniform_init(rng, (w,), prev), hidden_activation))
        prev = w
    layers.append(Dense(_uniform_init(rng, (prev, num_classes), prev),
                        _uniform_init(rng, (num_classes,), prev), "none"))
    return Network(layers, num_classes, (in_dim,))


def make_image_cnn(rng, in_shape=(1, 28, 28), num_classes=10,
                   conv_channels=(8, 16), dense_width=64):
    """The 2-conv / 2-dense image classifier used throughout the arena."""
    c, h, w = in_shape
    layers = []
    prev_c = c
    for oc in conv_channels:
        fan_in = prev_c * 9
        layers.append(Conv2d(_uniform_init(rng, (oc, prev_c, 3, 3), fan_in),
                             _uniform_init(rng, (oc,), fan_in), "relu", pool=2))
        prev_c = oc
        h //= 2
        w //= 2
    flat = prev_c * h * w
    layers.append(Dense(_uniform_init(rng, (flat, dense_width), flat),
                        _uniform_init(rng, (dense_width,), flat), "relu"))
    layers.append(Dense(_uniform_init(rng, (dense_width, num_classes), dense_width),
                        _uniform_init(rng, (num_classes,), dense_width), "none"))
    return Network(layers, num_classes, in_shape)


def softmax(logits):
    """Shift-invariant softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("softmax requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if net.input_shape and x.shape == tuple(net.input_shape):
        return x[None, ...], True
    if isinstance(net.layers[0], Dense) and x.ndim == 1:
        return x[None, :], True
    return x, False


def forward(net, batch, cache=None):
    """Logits for a batch (or a single sample, returned unbatched)."""
    x, single = _as_batch(net, batch)
    if isinstance(net.layers[0], Dense) and x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    for layer in net.layers:
        if isinstance(layer, Dense) and x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
            if cache is not None:
                cache.append(("flatten", x.shape))
        x = layer.forward(x, cache)
    return x[0] if single else x


def _is_flatten_marker(entry):
    return (isinstance(entry, tuple) and len(entry) == 2
            and isinstance(entry[0], str) and entry[0] == "flatten")


def backward(net, cache, dlogits):
    """Walk the cache backwards; returns (per-layer param grads, dinput)."""
    grads = [None] * len(net.layers)
    dx = dlogits
    pos = len(cache) - 1
    for i in range(len(net.layers) - 1, -1, -1):
        dx, g = net.layers[i].backward(dx, cache[pos])
        grads[i] = g
        pos -= 1
        if pos >= 0 and _is_flatten_marker(cache[pos]):
            # restore the spatial shape produced by the conv layer upstream
            prev = net.layers[i - 1]
            n = dx.shape[0]
            oc = prev.weight.shape[0]
            side = int(np.sqrt(dx.shape[1] // oc))
            dx = dx.reshape(n, oc, side, side)
            pos -= 1
    return grads, dx


def cross_entropy_grad(logits, labels):
    """Mean cross-entropy loss and its gradient w.r.t. the logits."""
    probs = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    eps = 1e-12
    loss = -np.log(probs[idx, labels] + eps).mean()
    dlogits = probs.copy()
    dlogits[idx, labels] -= 1.0
    return loss, dlogits / n


def train_sgd(net, data, epochs, lr, rng, batch_size=32, loss_log=None):
    """Plain mini-batch SGD with cross-entropy loss; mutates ``net``."""
    if lr < 0:
        raise InvalidInputError("lr must be non-negative")
    if epochs < 0:
        raise InvalidInputError("epochs must be non-negative")
    inputs, labels = data.inputs, data.labels
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            loss = _sgd_step(net, inputs[sel], labels[sel], lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}", epoch=epoch)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        net.history.append(mean_loss)
        if loss_log is not None:
            loss_log.append(mean_loss)
    return net


def _sgd_step(net, xb, yb, lr):
    cache = []
    logits = forward(net, xb, cache)
    loss, dlogits = cross_entropy_grad(logits, yb)
    grads, _ = backward(net, cache, dlogits)
    if lr > 0:
        for layer, g in zip(net.layers, grads):
            layer.weight -= lr * g[0]
            layer.bias -= lr * g[1]
    return loss


def input_gradient(net, x, labels):
    """Gradient of the mean cross-entropy w.r.t. the input batch."""
    cache = []
    logits = forward(net, x, cache)
    _, dlogits = cross_entropy_grad(logits, labels)
    _, dx = backward(net, cache, dlogits)
    return dx.reshape(np.asarray(x).shape)


def pgd_perturb(net, x, y, eps, steps, step_size=None, rng=None,
                random_start=True):
    """L-infinity PGD. ``x`` may be a single sample or a batch.

    Ascends the cross-entropy loss with sign-gradient steps, projecting back
    into the eps-ball around the input and into [0, 1] after every step.
    """
    if eps < 0:
        raise InvalidInputError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    single = net.input_shape and x.shape == tuple(net.input_shape)
    xb = x[None, ...] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if eps == 0 or steps == 0:
        out = xb.copy()
        return out[0] if single else out
    if step_size is None:
        step_size = eps / 4.0
    if random_start and rng is not None:
        adv = xb + rng.uniform(-eps, eps, size=xb.shape)
    else:
        adv = xb.copy()
    adv = np.clip(adv, xb - eps, xb + eps)
    adv = np.clip(adv, 0.0, 1.0)
    for _ in range(steps):
        g = input_gradient(net, adv, yb)
        adv = adv + step_size * np.sign(g)
        adv = np.clip(adv, xb - eps, xb + eps)
        adv = np.clip(adv, 0.0, 1.0)
    return adv[0] if single else adv


def adversarial_train(net, data, rng, lr=0.05, batch_size=32, eps=0.3,
                      pgd_steps=40, clean_epochs=10, adv_epochs=10,
                      loss_log=None):
    """Interleaved hardening: clean epochs, then epochs whose batches also
    contain PGD examples of that batch. Mutates and returns ``net``.
    """
    if len(data.labels) == 0:
        raise InvalidInputError("empty dataset")
    train_sgd(net, data, clean_epochs, lr, rng, batch_size, loss_log)
    inputs, labels = data.inputs, data.labels
    n = len(labels)
    for epoch in range(adv_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            xb, yb = inputs[sel], labels[sel]
            if pgd_steps > 0 and eps > 0:
                adv = pgd_perturb(net, xb, yb, eps, pgd_steps,
                                  rng=rng, random_start=True)
                xb = np.concatenate([xb, adv])
                yb = np.concatenate([yb, yb])
            loss = _sgd_step(net, xb, yb, lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at adversarial epoch {epoch}",
                    epoch=clean_epochs + epoch)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        net.history.append(mean_loss)
        if loss_log is not None:
            loss_log.append(mean_loss)
    return net


def accuracy(net, data, batch_size=256):
    hits = 0
    for start in range(0, len(data.labels), batch_size):
        logits = forward(net, data.inputs[start:start + batch_size])
        hits += int((logits.argmax(axis=-1) == data.labels[start:start + batch_size]).sum())
    return hits / len(data.labels)


def robust_accuracy(net, data, eps, steps, rng, batch_size=128):
    """Accuracy under batched L-infinity PGD of the given strength."""
    hits = 0
    for start in range(0, len(data.labels), batch_size):
        xb = data.inputs[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        adv = pgd_perturb(net, xb, yb, eps, steps, rng=rng, random_start=True)
        logits = forward(net, adv)
        hits += int((logits.argmax(axis=-1) == yb).sum())
    return hits / len(data.labels)


def save_weights(path, tensors):
    """Binary weight dump: 16-byte header then flat little-endian float32.

    Header layout: 4-byte magic ``AMGW``, uint32 version, uint32 tensor
    count, 4 reserved zero bytes. Tensor shapes are not stored; the loader
    supplies a template with matching shapes.
    """
    tensors = list(tensors)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(tensors)))
        fh.write(b"\x00" * 4)
        for t in tensors:
            fh.write(np.asarray(t, dtype="<f4").tobytes(order="C"))


def load_weights(path, templates):
    """Fill ``templates`` (list of arrays) in place from a weight dump."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != WEIGHTS_MAGIC:
            raise InvalidInputError(f"{path}: not a weight file")
        version, count = struct.unpack("<II", header[4:12])
        if version != WEIGHTS_VERSION:
            raise InvalidInputError(f"{path}: unsupported version {version}")
        if count != len(templates):
            raise InvalidInputError(
                f"{path}: holds {count} tensors, expected {len(templates)}")
        for t in templates:
            raw = fh.read(4 * t.size)
            if len(raw) != 4 * t.size:
                raise InvalidInputError(f"{path}: truncated weight file")
            t[...] = np.frombuffer(raw, dtype="<f4").reshape(t.shape)
    return templates


def save_network(net, path):
    save_weights(path, net.parameters())


def load_network(net, path):
    load_weights(path, net.parameters())
    return net
