"""Layer math: forward passes, hand-written backward passes, loss, SGD.

Layers are plain value records.  ``forward`` returns (output, cache) and
``backward`` consumes that cache, so a layer instance carries no
per-batch state and a frozen layer stays bit-identical through any number
of optimizer steps.

The probability head is the one dtype exception: sigmoid computes in
float64 and clamps to [PRED_EPS, 1 - PRED_EPS] so probabilities are
strictly inside (0, 1) and the BCE composite gradient
dL/dz = (p - y)/n stays exact even at saturation (float32 would round
the clamp away).
"""

import numpy as np

from . import tensor

PRED_EPS = 1e-7


class Layer:
    """Base record: a kind tag, a trainable flag and optional params."""

    kind = "layer"
    trainable = False

    def params(self):
        """Mapping of parameter name -> array (by reference)."""
        return {}

    def forward(self, x, mode="train", rng=None):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Conv(Layer):
    kind = "conv"

    def __init__(self, w, b, trainable=True, padding="same", l2=0.0):
        # dtype is preserved: float32 in production, float64 in gradchecks
        self.w = np.asarray(w)
        self.b = np.asarray(b)
        if self.w.ndim != 4:
            raise ValueError(f"conv weights must be [f, c, k, k], got {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ValueError("conv bias length must equal the filter count")
        self.trainable = bool(trainable)
        self.padding = padding
        self.l2 = float(l2)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, mode="train", rng=None):
        return tensor.conv2d(x, self.w, self.b, padding=self.padding), x

    def backward(self, cache, dy):
        x = cache
        if x is None:
            raise ValueError("conv backward needs the cached input")
        dw, db = tensor.conv2d_weight_grad(x, dy, self.w.shape[2], self.padding)
        dx = tensor.conv2d_input_grad(self.w, dy, self.padding)
        return dx, {"w": dw, "b": db}


class Relu(Layer):
    kind = "relu"

    def forward(self, x, mode="train", rng=None):
        return np.maximum(x, 0), x

    def backward(self, cache, dy):
        return dy * (cache > 0), {}


class MaxPool(Layer):
    kind = "maxpool"

    def forward(self, x, mode="train", rng=None):
        out, arg = tensor.maxpool2(x)
        return out, (arg, x.shape)

    def backward(self, cache, dy):
        arg, in_shape = cache
        n, c, h, w = in_shape
        oh, ow = dy.shape[2], dy.shape[3]
        win = np.zeros((n, c, oh, ow, 4), dy.dtype)
        np.put_along_axis(win, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
        dx = np.zeros(in_shape, dy.dtype)
        dx[:, :, : 2 * oh, : 2 * ow] = (
            win.reshape(n, c, oh, ow, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, 2 * oh, 2 * ow)
        )
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode="train", rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, w, b, trainable=True):
        self.w = np.asarray(w)
        self.b = np.asarray(b)
        if self.w.ndim != 2:
            raise ValueError(f"dense weights must be [d_in, d_out], got {self.w.shape}")
        if self.b.shape != (self.w.shape[1],):
            raise ValueError("dense bias length must equal the output width")
        self.trainable = bool(trainable)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ValueError(
                f"dense expects [n, {self.w.shape[0]}] input, got shape {x.shape}"
            )
        return tensor.matmul(x, self.w) + self.b, x

    def backward(self, cache, dy):
        x = cache
        dw = tensor.matmul(x.T, dy)
        db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
        dx = tensor.matmul(dy, self.w.T.copy())
        return dx, {"w": dw, "b": db}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p), eval is identity."""

    kind = "dropout"

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, mode="train", rng=None):
        if mode == "eval" or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = (rng.uniform(0.0, 1.0, x.shape) >= self.rate).astype(x.dtype)
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return x * keep * scale, (keep, scale)

    def backward(self, cache, dy):
        if cache is None:
            return dy, {}
        keep, scale = cache
        return dy * keep * scale, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, mode="train", rng=None):
        z = np.asarray(x, np.float64)
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        p = np.clip(out, PRED_EPS, 1.0 - PRED_EPS)
        return p, (p, np.asarray(x).dtype)

    def backward(self, cache, dy):
        p, in_dtype = cache
        dz = np.asarray(dy, np.float64) * p * (1.0 - p)
        return dz.astype(in_dtype), {}


def bce_loss(p, y):
    """Binary cross-entropy, mean over the batch.

    Returns (loss, dL/dp) where the gradient is consistent with the mean
    reduction: dp = (p - y) / (p (1 - p) n), computed on probabilities
    clamped to [PRED_EPS, 1 - PRED_EPS].
    """
    p = np.asarray(p, np.float64)
    y = np.asarray(y, np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pc = np.clip(p, PRED_EPS, 1.0 - PRED_EPS)
    n = pc.size
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / n)
    dp = (pc - y) / (pc * (1.0 - pc) * n)
    return loss, dp


def l2_penalty(weights, lambda_reg):
    """Weight-decay penalty lambda * sum(w^2) and its gradient 2 lambda w."""
    if lambda_reg < 0:
        raise ValueError(f"lambda_reg must be >= 0, got {lambda_reg}")
    w = np.asarray(weights)
    w64 = w.astype(np.float64)
    loss = float(lambda_reg * (w64 * w64).sum())
    grad = (2.0 * lambda_reg * w64).astype(w.dtype)
    return loss, grad


def sgd_step(layers, grads, lr, momentum=0.0, velocity=None):
    """In-place SGD update of every trainable parameter.

    ``grads`` is a list aligned with ``layers`` (one dict per layer, empty
    for parameterless kinds).  Non-trainable layers are skipped entirely,
    so their parameters stay bit-identical.  With momentum > 0 a velocity
    dict is threaded through calls.  lr = 0 is the degenerate no-op.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(grads) != len(layers):
        raise ValueError("one gradient dict per layer required")
    if velocity is None:
        velocity = {}
    for li, (layer, g) in enumerate(zip(layers, grads)):
        if not layer.trainable or not g:
            continue
        params = layer.params()
        for name, grad in g.items():
            param = params[name]
            if grad.shape != param.shape:
                raise ValueError(
                    f"gradient shape {grad.shape} != param shape {param.shape} "
                    f"for layer {li} ({layer.kind}.{name})"
                )
            step = grad.astype(np.float64)
            if momentum > 0.0:
                v = velocity.get((li, name))
                v = step if v is None else momentum * v + step
                velocity[(li, name)] = v
                step = v
            param[...] = (param.astype(np.float64) - lr * step).astype(param.dtype)
    return velocity
