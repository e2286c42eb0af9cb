"""Network assembly, prediction, kernel injection and checkpointing.

The stack is fixed by construction: 6 conv(+relu)/pool blocks, flatten,
a hidden dense(+relu), dropout, a 1-unit dense and a sigmoid head --
15 counted layers (relu/sigmoid uncounted) taking one 1x200x200 patch to
a single probability.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import filters, nn, tensor
from .tensor import DTYPE, Rng

INPUT_SIZE = 200

TRAIN_CONFIGS = ("trainable", "non_trainable", "kapt", "nckl")
KERNEL_KINDS = ("checkerboard", "gabor_bank", "sobel", "laplacian", "random")

CHECKPOINT_MAGIC = "gwck1"

_PREDICT_CHUNK = 128


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be parsed or does not fit."""


@dataclass
class NetworkConfig:
    """Build-time description of a gWaveNet variant.

    ``conv_filters`` lists the six conv widths; the first entry is
    superseded by ``first_layer_filters`` (1 for the single injected
    kernel, 16/64 for the stacked variants).  ``train_config`` selects how
    the first layer is initialised and whether it learns:

    * trainable      -- injected kernel, first layer updates
    * non_trainable  -- injected kernel, first layer frozen
    * nckl           -- random first layer (no custom kernel), trainable
    * kapt           -- like nckl, but the data was pre-filtered with the
                        kernel (a dataset transform, see data.prefilter_kapt)
    """

    kernel_size: int = 7
    train_config: str = "trainable"
    first_layer_filters: int = 1
    conv_filters: tuple = (32, 32, 16, 16, 8, 8)
    dense_hidden: int = 64
    dropout_rate: float = 0.5
    lambda_reg: float = 1e-4
    kernel_kind: str = "checkerboard"

    def __post_init__(self):
        if self.kernel_size not in (3, 5, 7, 9):
            raise ValueError(f"kernel_size must be one of 3/5/7/9, got {self.kernel_size}")
        if self.train_config not in TRAIN_CONFIGS:
            raise ValueError(f"train_config must be one of {TRAIN_CONFIGS}")
        if self.kernel_kind not in KERNEL_KINDS:
            raise ValueError(f"kernel_kind must be one of {KERNEL_KINDS}")
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        if len(self.conv_filters) != 6 or any(f < 1 for f in self.conv_filters):
            raise ValueError("conv_filters needs exactly 6 positive entries")
        if self.first_layer_filters < 1:
            raise ValueError("first_layer_filters must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.train_config == "nckl":
            # no-custom-kernel-layer is random init by definition
            self.kernel_kind = "random"
        if self.train_config == "kapt" and self.kernel_kind == "random":
            raise ValueError("kapt needs a concrete kernel_kind to pre-filter with")
        if self.kernel_kind == "sobel" and self.kernel_size != 3:
            raise ValueError("sobel first layers are 3x3")

    @property
    def effective_conv_filters(self):
        return (self.first_layer_filters,) + self.conv_filters[1:]

    def name(self):
        tag = {"trainable": "t", "non_trainable": "nt", "kapt": "kapt", "nckl": "nckl"}
        base = f"gwavenet_{self.kernel_size}x{self.kernel_size}_{tag[self.train_config]}"
        if self.kernel_kind not in ("checkerboard", "random"):
            base = f"{base}_{self.kernel_kind}"
        if self.first_layer_filters != 1:
            base = f"{base}_{self.first_layer_filters}k"
        return base


class Network:
    """An ordered layer list plus the config and seed that built it."""

    def __init__(self, layers, config, seed):
        self.layers = layers
        self.config = config
        self.seed = int(seed)
        self.train_steps = 0

    @property
    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def first_conv(self):
        return self.conv_layers[0]

    def counted_layers(self):
        """Conv + pool + dense + dropout (activations uncounted)."""
        return sum(1 for l in self.layers if l.kind in ("conv", "maxpool", "dense", "dropout"))

    def parameter_count(self):
        return sum(int(p.size) for l in self.layers for p in l.params().values())


def _first_layer_weights(config, rng):
    f = config.first_layer_filters
    w = config.kernel_size
    # kapt applies its kernel to the data, not the network: the first layer
    # is random-initialised exactly as in nckl
    kind = "random" if config.train_config == "kapt" else config.kernel_kind
    if kind == "checkerboard":
        base = filters.checkerboard(w)
        return np.tile(base, (f, 1, 1, 1)).astype(DTYPE)
    if kind == "gabor_bank":
        banks = []
        for i in range(f):
            theta = math.radians(filters.GABOR_ORIENTATIONS_DEG[i % 5])
            spec = filters.KernelSpec(
                "gabor", w=w, lam=filters.GABOR_DEFAULT_LAMBDA, theta=theta
            )
            banks.append(filters.gabor(spec))
        return np.stack(banks)[:, None, :, :].astype(DTYPE)
    if kind == "sobel":
        pair = filters.sobel()
        return np.stack([pair[i % 2] for i in range(f)])[:, None, :, :].astype(DTYPE)
    if kind == "laplacian":
        base = filters.laplacian_log(w)
        return np.tile(base, (f, 1, 1, 1)).astype(DTYPE)
    if kind == "random":
        return tensor.random_fill(rng, (f, 1, w, w), ("scaled-normal", w * w))
    raise ValueError(f"unknown kernel_kind {kind!r}")


def build(config, seed):
    """Assemble a gWaveNet per the config, deterministically from the seed.

    Layer order: [conv1+relu, pool] x6 with the injected kernel in conv1,
    then flatten, dense+relu, dropout, dense(1), sigmoid.  Only conv1's
    trainability depends on the train configuration; conv2 carries the L2
    coefficient.  Each layer draws from its own rng substream so filter
    counts in one layer never shift another layer's values.
    """
    rng = Rng(seed)
    conv_widths = config.effective_conv_filters
    first_trainable = config.train_config != "non_trainable"

    layers = []
    in_ch = 1
    size = INPUT_SIZE
    for i, f in enumerate(conv_widths):
        if i == 0:
            k = config.kernel_size
            w = _first_layer_weights(config, rng.derive(0))
            trainable = first_trainable
            l2 = 0.0
        else:
            k = 3
            fan_in = in_ch * k * k
            w = tensor.random_fill(rng.derive(i), (f, in_ch, k, k), ("scaled-normal", fan_in))
            trainable = True
            l2 = config.lambda_reg if i == 1 else 0.0
        layers.append(nn.Conv(w, np.zeros(f, DTYPE), trainable=trainable, l2=l2))
        layers.append(nn.Relu())
        layers.append(nn.MaxPool())
        in_ch = f
        size //= 2

    layers.append(nn.Flatten())
    d_in = in_ch * size * size
    # classifier head: plain 1/sqrt(fan_in) uniform keeps the initial
    # logits out of sigmoid saturation despite the large conv activations
    bound1 = 1.0 / math.sqrt(d_in)
    w1 = tensor.random_fill(rng.derive(10), (d_in, config.dense_hidden), ("uniform", -bound1, bound1))
    layers.append(nn.Dense(w1, np.zeros(config.dense_hidden, DTYPE)))
    layers.append(nn.Relu())
    layers.append(nn.Dropout(config.dropout_rate))
    bound2 = 1.0 / math.sqrt(config.dense_hidden)
    w2 = tensor.random_fill(rng.derive(11), (config.dense_hidden, 1), ("uniform", -bound2, bound2))
    layers.append(nn.Dense(w2, np.zeros(1, DTYPE)))
    layers.append(nn.Sigmoid())
    return Network(layers, config, seed)


def forward_pass(net, x, mode="eval", rng=None):
    """Run the full stack; returns (probabilities [n, 1], caches)."""
    caches = []
    out = x
    for i, layer in enumerate(net.layers):
        layer_rng = rng.derive(i) if (rng is not None and layer.kind == "dropout") else None
        out, cache = layer.forward(out, mode=mode, rng=layer_rng)
        caches.append(cache)
    return out, caches


def backward_pass(net, caches, dy):
    """Backpropagate dL/dp through the stack; returns per-layer grad dicts."""
    grads = [None] * len(net.layers)
    cur = dy
    for i in range(len(net.layers) - 1, -1, -1):
        cur, g = net.layers[i].backward(caches[i], cur)
        grads[i] = g
    return grads


def predict(net, batch):
    """Eval-mode probabilities (float64 vector, strictly inside (0, 1))."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
        raise ValueError(
            f"expected a [n, 1, {INPUT_SIZE}, {INPUT_SIZE}] batch, got shape {batch.shape}"
        )
    probs = []
    for lo in range(0, batch.shape[0], _PREDICT_CHUNK):
        p, _ = forward_pass(net, batch[lo:lo + _PREDICT_CHUNK], mode="eval")
        probs.append(p[:, 0])
    return np.concatenate(probs)


def classify(p, threshold=0.5):
    """Map a probability to "gw" (boundary inclusive) or "ngw"."""
    return "gw" if p >= threshold else "ngw"


def extract_first_kernel(net):
    """Current first-layer weights as an [f, w, w] array (copy)."""
    return net.first_conv.w[:, 0, :, :].copy()


def _config_to_manifest(config):
    return {
        "kernel_size": str(config.kernel_size),
        "train_config": config.train_config,
        "first_layer_filters": str(config.first_layer_filters),
        "conv_filters": ",".join(str(f) for f in config.conv_filters),
        "dense_hidden": str(config.dense_hidden),
        "dropout_rate": repr(config.dropout_rate),
        "lambda_reg": repr(config.lambda_reg),
        "kernel_kind": config.kernel_kind,
    }


def _config_from_manifest(kv):
    return NetworkConfig(
        kernel_size=int(kv["kernel_size"]),
        train_config=kv["train_config"],
        first_layer_filters=int(kv["first_layer_filters"]),
        conv_filters=tuple(int(f) for f in kv["conv_filters"].split(",")),
        dense_hidden=int(kv["dense_hidden"]),
        dropout_rate=float(kv["dropout_rate"]),
        lambda_reg=float(kv["lambda_reg"]),
        kernel_kind=kv["kernel_kind"],
    )


def _param_blobs(net):
    """(label, array) pairs in layer order; arrays viewed 4-d for the blob."""
    blobs = []
    counts = {"conv": 0, "dense": 0}
    for layer in net.layers:
        if layer.kind not in ("conv", "dense"):
            continue
        counts[layer.kind] += 1
        name = f"{layer.kind}{counts[layer.kind]}"
        for pname, arr in layer.params().items():
            blobs.append((f"{name}.{pname}", arr))
    return blobs


def _as_blob_shape(arr):
    if arr.ndim == 4:
        return arr
    if arr.ndim == 2:
        return arr.reshape(1, 1, *arr.shape)
    return arr.reshape(1, 1, 1, -1)


def save_checkpoint(net, path):
    """Write manifest (key=value lines, blank-line terminated) + raw blobs."""
    blobs = _param_blobs(net)
    lines = [f"format={CHECKPOINT_MAGIC}"]
    for key, val in _config_to_manifest(net.config).items():
        lines.append(f"{key}={val}")
    lines.append(f"seed={net.seed}")
    lines.append(f"train_steps={net.train_steps}")
    lines.append(f"blobs={len(blobs)}")
    for i, (label, arr) in enumerate(blobs):
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"blob{i}={label}:{shape}")
    manifest = "\n".join(lines) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(manifest.encode("utf-8"))
        for _, arr in blobs:
            tensor.write_tensor(fh, _as_blob_shape(arr))


def _read_manifest(fh):
    kv = {}
    while True:
        line = fh.readline()
        if not line:
            raise CheckpointError("checkpoint ended inside the manifest")
        line = line.decode("utf-8").rstrip("\n")
        if line == "":
            return kv
        if "=" not in line:
            raise CheckpointError(f"malformed manifest line {line!r}")
        key, val = line.split("=", 1)
        kv[key] = val


def load_checkpoint(path):
    """Rebuild a Network whose predictions are bit-identical to the saved one."""
    with open(path, "rb") as fh:
        kv = _read_manifest(fh)
        if kv.get("format") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a {CHECKPOINT_MAGIC} checkpoint: {path}")
        try:
            config = _config_from_manifest(kv)
            seed = int(kv["seed"])
            train_steps = int(kv["train_steps"])
            n_blobs = int(kv["blobs"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"bad checkpoint manifest: {exc}") from exc

        net = build(config, seed)
        net.train_steps = train_steps
        blobs = _param_blobs(net)
        if n_blobs != len(blobs):
            raise CheckpointError(
                f"checkpoint lists {n_blobs} blobs, the architecture has {len(blobs)}"
            )
        for i, (label, arr) in enumerate(blobs):
            entry = kv.get(f"blob{i}")
            if entry is None:
                raise CheckpointError(f"manifest is missing blob{i} ({label})")
            m_label, _, m_shape = entry.partition(":")
            if m_label != label:
                raise CheckpointError(f"blob{i} is {m_label!r}, expected {label!r}")
            want_shape = tuple(int(d) for d in m_shape.split(","))
            if want_shape != arr.shape:
                raise CheckpointError(
                    f"layer {label}: manifest shape {want_shape} != architecture {arr.shape}"
                )
            try:
                blob = tensor.read_tensor(fh)
            except ValueError as exc:
                raise CheckpointError(f"layer {label}: {exc}") from exc
            if blob.size != arr.size:
                raise CheckpointError(
                    f"layer {label}: blob has {blob.size} values, expected {arr.size}"
                )
            arr[...] = blob.reshape(arr.shape)
    return net


def clone_config(config, **overrides):
    """Config copy with field overrides (post-init validation re-runs)."""
    return replace(config, **overrides)
