"""Sequential conv/BN classifier with switchable normalization statistics.

The model separates three kinds of state: frozen weights (conv and linear),
trainable per-channel affine parameters (gamma/beta of each BN layer), and
normalization statistics. Each BN layer keeps two pairs of statistics:
(mu_popu, sigma2_popu) accumulated during source training and
(mu_norm, sigma2_norm) actually used for normalization, which adaptation
may overwrite with a blend of population and test-batch values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import recordio
from . import tensor as T

FIXED_STATS = "fixed"
BATCH_STATS = "batch"


@dataclass
class ArchSpec:
    """Structure of the reference classifier; lives in the experiment config."""

    in_channels: int = 3
    image_size: int = 16
    conv_channels: tuple = (16, 32)
    kernel: int = 3
    pool: int = 4
    n_classes: int = 10

    def validate(self):
        if self.in_channels < 1 or self.n_classes < 2:
            raise ValueError("arch: need ≥1 input channel and ≥2 classes")
        if self.image_size % self.pool:
            raise ValueError("arch: pool window must tile the image")


class Conv2d:
    def __init__(self, in_ch, out_ch, kernel, padding, rng):
        scale = np.sqrt(2.0 / (in_ch * kernel * kernel))
        w = rng.normal(scale=scale, size=(out_ch, in_ch, kernel, kernel))
        self.weight = T.Tensor(w.astype(np.float32), requires_grad=True)
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, stride=1, padding=self.padding)

    def params(self):
        return [("weight", self.weight)]


class Linear:
    def __init__(self, in_features, out_features, rng):
        scale = np.sqrt(1.0 / in_features)
        w = rng.normal(scale=scale, size=(in_features, out_features))
        self.weight = T.Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ReLU:
    def __call__(self, x):
        return T.relu(x)

    def params(self):
        return []


class AvgPool:
    def __init__(self, window):
        self.window = window

    def __call__(self, x):
        return T.avgpool2d(x, self.window)

    def params(self):
        return []


class Flatten:
    def __call__(self, x):
        return T.flatten(x)

    def params(self):
        return []


class BatchNorm:
    """Per-channel normalization with an affine transform.

    mode selects the statistics: BATCH_STATS normalizes by the current
    batch's mean/variance (population divisor over b*H*W), FIXED_STATS by
    the stored mu_norm/sigma2_norm. gamma and beta are the only trainable
    tensors; statistics are plain arrays outside the autodiff tape except
    when BATCH_STATS puts the batch moments themselves on the tape.
    """

    def __init__(self, channels, epsilon=1e-5, momentum=0.1):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.channels = channels
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.gamma = T.Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.mu_popu = np.zeros(channels, np.float32)
        self.sigma2_popu = np.ones(channels, np.float32)
        self.mu_norm = np.zeros(channels, np.float32)
        self.sigma2_norm = np.ones(channels, np.float32)
        self.mode = FIXED_STATS
        self.training = False

    def set_norm_stats(self, mu, sigma2):
        sigma2 = np.asarray(sigma2, np.float32)
        if np.any(sigma2 < 0):
            raise ValueError("sigma2_norm must be elementwise non-negative")
        self.mu_norm = np.asarray(mu, np.float32).copy()
        self.sigma2_norm = sigma2.copy()

    def __call__(self, x):
        return bn_forward(x, self)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def batch_moments(x):
    """Eq.-style batch statistics of a (b,C,H,W) tensor: per-channel mean and
    population variance over the b*H*W positions, as differentiable tensors."""
    c = x.data.shape[1]
    mu = T.tmean(x, axis=(0, 2, 3))
    centered = T.sub(x, T.reshape(mu, (1, c, 1, 1)))
    var = T.tmean(T.mul(centered, centered), axis=(0, 2, 3))
    return mu, var


def bn_forward(x, state):
    if x.data.ndim != 4:
        raise T.ShapeError(f"bn_forward: expected (b,C,H,W) input, got {x.data.shape}")
    c = x.data.shape[1]
    if c != state.channels:
        raise T.ShapeError(f"bn_forward: input has {c} channels, layer has {state.channels}")
    if state.mode == BATCH_STATS:
        mu, var = batch_moments(x)
        if state.training:
            # running population stats, EMA with the layer's momentum
            m = state.momentum
            state.mu_popu = ((1 - m) * state.mu_popu + m * mu.data).astype(np.float32)
            state.sigma2_popu = ((1 - m) * state.sigma2_popu + m * var.data).astype(np.float32)
    else:
        if np.any(state.sigma2_norm < 0):
            raise ValueError("bn_forward: negative sigma2_norm")
        mu = T.Tensor(state.mu_norm)
        var = T.Tensor(state.sigma2_norm)
    centered = T.sub(x, T.reshape(mu, (1, c, 1, 1)))
    xhat = T.div(centered, T.reshape(T.sqrt(T.add(var, state.epsilon)), (1, c, 1, 1)))
    scaled = T.mul(T.reshape(state.gamma, (1, c, 1, 1)), xhat)
    return T.add(scaled, T.reshape(state.beta, (1, c, 1, 1)))


class ChannelStatsCapture:
    """Batch-averaged per-channel statistics of post-BN features.

    One (m, d2) pair of (C,) tensors per DA layer, keyed by the layer's
    index in the BN-layer ordering. Tensors stay on the tape so alignment
    losses can differentiate through them.
    """

    def __init__(self):
        self.entries = {}

    def add(self, bn_index, m, d2):
        self.entries[bn_index] = (m, d2)

    def layer_indices(self):
        return sorted(self.entries)

    def __len__(self):
        return len(self.entries)


class ModelGraph:
    """Ordered layer list plus the trainable/frozen parameter split."""

    def __init__(self, layers, names, arch):
        self.layers = layers
        self.names = names
        self.arch = arch
        self.da_layers = list(range(len(self.bn_layers())))

    def bn_layers(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def set_da_layers(self, indices):
        n_bn = len(self.bn_layers())
        indices = sorted(set(int(i) for i in indices))
        if any(i < 0 or i >= n_bn for i in indices):
            raise ValueError(f"da_layers {indices} outside BN layer range 0..{n_bn - 1}")
        self.da_layers = indices

    def affine_params(self):
        out = []
        for i, bn in enumerate(self.bn_layers()):
            out.append((f"bn{i}.gamma", bn.gamma))
            out.append((f"bn{i}.beta", bn.beta))
        return out

    def frozen_params(self):
        affine = {id(t) for _, t in self.affine_params()}
        out = []
        for name, layer in zip(self.names, self.layers):
            for pname, t in layer.params():
                if id(t) not in affine:
                    out.append((f"{name}.{pname}", t))
        return out

    def all_params(self):
        out = []
        for name, layer in zip(self.names, self.layers):
            for pname, t in layer.params():
                out.append((f"{name}.{pname}", t))
        return out

    def set_trainable(self, which):
        # "affine": BN gamma/beta only (adaptation); "all": source training
        if which not in ("affine", "all"):
            raise ValueError(f"unknown trainable set {which!r}")
        affine = {id(t) for _, t in self.affine_params()}
        for _, t in self.all_params():
            t.requires_grad = which == "all" or id(t) in affine

    def set_bn_mode(self, mode):
        if mode not in (FIXED_STATS, BATCH_STATS):
            raise ValueError(f"unknown BN mode {mode!r}")
        for bn in self.bn_layers():
            bn.mode = mode

    def set_training(self, flag):
        for bn in self.bn_layers():
            bn.training = bool(flag)

    def forward(self, batch, capture=False):
        return forward(self, batch, capture)

    def snapshot_affine(self):
        return [(name, t.data.copy()) for name, t in self.affine_params()]

    def restore_affine(self, snapshot):
        params = dict(self.affine_params())
        for name, data in snapshot:
            params[name].data = data.copy()


def forward(graph, batch, capture=False):
    """Run the layer stack; optionally capture DA-layer statistics.

    Captured statistics are the per-sample spatial moments of the post-BN
    (post-affine) features, averaged uniformly over the batch. They remain
    differentiable tensors.
    """
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    arch = graph.arch
    want = (arch.in_channels, arch.image_size, arch.image_size)
    if x.data.ndim != 4 or x.data.shape[1:] != want:
        raise T.ShapeError(f"forward: batch shape {x.data.shape} does not match input spec {want}")
    stats = ChannelStatsCapture() if capture else None
    bn_index = -1
    for layer in graph.layers:
        x = layer(x)
        if isinstance(layer, BatchNorm):
            bn_index += 1
            if capture and bn_index in graph.da_layers:
                m, d2 = T.channel_stats(x)
                stats.add(bn_index, T.tmean(m, axis=0), T.tmean(d2, axis=0))
    return x, stats


def build_model(arch, seed=0):
    arch.validate()
    rng = np.random.default_rng(seed)
    c1, c2 = arch.conv_channels
    pad = arch.kernel // 2
    feat = c2 * (arch.image_size // arch.pool) ** 2
    layers = [
        Conv2d(arch.in_channels, c1, arch.kernel, pad, rng),
        BatchNorm(c1),
        ReLU(),
        Conv2d(c1, c2, arch.kernel, pad, rng),
        BatchNorm(c2),
        ReLU(),
        AvgPool(arch.pool),
        Flatten(),
        Linear(feat, arch.n_classes, rng),
    ]
    names = ["conv0", "bn0", "relu0", "conv1", "bn1", "relu1", "pool", "flatten", "linear"]
    return ModelGraph(layers, names, arch)


def blend_normalization_stats(graph, images, alpha):
    """Overwrite each BN layer's normalization statistics with
    alpha*population + (1-alpha)*batch moments of ``images``.

    Applied layer by layer in one forward pass, so deeper layers see
    activations already normalized by the blended statistics of earlier
    layers. alpha=1 keeps the population statistics bit-exactly; alpha=0
    adopts the batch moments of this pass.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0,1], got {alpha}")
    a = np.float32(alpha)
    one_minus = np.float32(1.0 - alpha)
    with T.no_grad():
        x = images if isinstance(images, T.Tensor) else T.Tensor(images)
        for layer in graph.layers:
            if isinstance(layer, BatchNorm):
                mu_b, var_b = batch_moments(x)
                if alpha == 1.0:
                    layer.set_norm_stats(layer.mu_popu, layer.sigma2_popu)
                elif alpha == 0.0:
                    layer.set_norm_stats(mu_b.data, var_b.data)
                else:
                    layer.set_norm_stats(
                        a * layer.mu_popu + one_minus * mu_b.data,
                        a * layer.sigma2_popu + one_minus * var_b.data,
                    )
                prev_mode = layer.mode
                layer.mode = FIXED_STATS
                x = layer(x)
                layer.mode = prev_mode
            else:
                x = layer(x)


def _weight_records(graph):
    records = []
    for name, t in graph.all_params():
        records.append((name, t.data))
    for i, bn in enumerate(graph.bn_layers()):
        records.append((f"bn{i}.mu_popu", bn.mu_popu))
        records.append((f"bn{i}.sigma2_popu", bn.sigma2_popu))
        records.append((f"bn{i}.mu_norm", bn.mu_norm))
        records.append((f"bn{i}.sigma2_norm", bn.sigma2_norm))
    records.append(("meta.da_layers", np.asarray(graph.da_layers, np.float32)))
    return records


def save_weights(graph, path):
    recordio.write_records(path, _weight_records(graph))


def load_weights(path, arch):
    """Rebuild a model from a weight file, validating every shape against
    the architecture described in the experiment config."""
    records = recordio.read_records(path)
    graph = build_model(arch, seed=0)
    expected = {name: t.data.shape for name, t in graph.all_params()}
    for name, t in graph.all_params():
        t.data = recordio.expect_shape(records, name, expected[name]).copy()
    for i, bn in enumerate(graph.bn_layers()):
        shape = (bn.channels,)
        bn.mu_popu = recordio.expect_shape(records, f"bn{i}.mu_popu", shape).copy()
        sigma2_popu = recordio.expect_shape(records, f"bn{i}.sigma2_popu", shape).copy()
        if np.any(sigma2_popu < 0):
            raise recordio.RecordFormatError(f"bn{i}.sigma2_popu has negative entries")
        bn.sigma2_popu = sigma2_popu
        bn.set_norm_stats(
            recordio.expect_shape(records, f"bn{i}.mu_norm", shape),
            recordio.expect_shape(records, f"bn{i}.sigma2_norm", shape),
        )
    da = records.get("meta.da_layers")
    if da is None:
        raise recordio.RecordDimensionError("missing record 'meta.da_layers'")
    graph.set_da_layers(int(v) for v in da)
    known = {name for name, _ in _weight_records(graph)}
    extra = set(records) - known
    if extra:
        raise recordio.RecordDimensionError(f"unexpected records for this architecture: {sorted(extra)}")
    graph.set_trainable("affine")  # loaded models are deployment-ready
    return graph
