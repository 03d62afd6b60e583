"""Siamese autoencoder: parameters, forward pass and hand-written backward pass.

Both branches share one encoder/decoder. Batches of pairs are processed by
stacking branch 1 on top of branch 2, so every matrix product covers ``2B`` rows.

Geo-temporal fusion modes:

``none``
    the pair's geo-temporal features are ignored.
``input_concat``
    ``[log_distance, log_interval]`` is appended to each branch's input.
``decoder_add``
    a linear map of the geo-temporal pair is added to the output of the first
    decoder layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import GeoTemporalPair

ACTIVATIONS = ("relu", "sine")
FUSIONS = ("none", "input_concat", "decoder_add")
GEO_DIM = 2

MAGIC = b"LFNP"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dim: int = 128
    latent_dim: int = 8
    depth: int = 2
    activation: str = "relu"
    skip_connections: bool = False
    fusion: str = "decoder_add"
    sine_omega0: float = 30.0

    def __post_init__(self):
        if self.latent_dim < 1 or self.input_dim < self.latent_dim:
            raise ValueError("need input_dim >= latent_dim >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.sine_omega0 <= 0:
            raise ValueError("sine_omega0 must be positive")

    @property
    def encoder_input_dim(self) -> int:
        return self.input_dim + (GEO_DIM if self.fusion == "input_concat" else 0)

    @property
    def encoder_widths(self) -> list[int]:
        return [self.encoder_input_dim] + [self.hidden_dim] * (self.depth - 1) + [self.latent_dim]

    @property
    def decoder_widths(self) -> list[int]:
        return [self.latent_dim] + [self.hidden_dim] * (self.depth - 1) + [self.input_dim]

    @property
    def fusion_width(self) -> int:
        """Width of the first decoder layer's output, where fusion is added."""
        return self.decoder_widths[1]


@dataclass
class Params:
    encoder: list[tuple[np.ndarray, np.ndarray]]
    decoder: list[tuple[np.ndarray, np.ndarray]]
    fusion: Optional[tuple[np.ndarray, np.ndarray]] = None

    def arrays(self) -> list[np.ndarray]:
        """All arrays in declaration order: encoder, decoder, fusion; weight before bias."""
        out = []
        for w, b in self.encoder + self.decoder:
            out += [w, b]
        if self.fusion is not None:
            out += list(self.fusion)
        return out

    def map(self, fn) -> "Params":
        return self.from_arrays(self, [fn(a) for a in self.arrays()])

    @staticmethod
    def from_arrays(like: "Params", arrays: Sequence[np.ndarray]) -> "Params":
        it = iter(arrays)
        encoder = [(next(it), next(it)) for _ in like.encoder]
        decoder = [(next(it), next(it)) for _ in like.decoder]
        fusion = (next(it), next(it)) if like.fusion is not None else None
        return Params(encoder, decoder, fusion)

    def zeros_like(self) -> "Params":
        return self.map(np.zeros_like)

    def copy(self) -> "Params":
        return self.map(np.array)

    def equals(self, other: "Params") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def _layer_shapes(config: NetConfig):
    enc = config.encoder_widths
    dec = config.decoder_widths
    enc_shapes = [(enc[i + 1], enc[i]) for i in range(len(enc) - 1)]
    dec_shapes = [(dec[i + 1], dec[i]) for i in range(len(dec) - 1)]
    fusion_shape = (config.fusion_width, GEO_DIM) if config.fusion == "decoder_add" else None
    return enc_shapes, dec_shapes, fusion_shape


def num_params(config: NetConfig) -> int:
    enc_shapes, dec_shapes, fusion_shape = _layer_shapes(config)
    shapes = enc_shapes + dec_shapes + ([fusion_shape] if fusion_shape else [])
    return sum(o * i + o for o, i in shapes)


def init_params(config: NetConfig, seed=0) -> Params:
    """Uniform initialisation with zero biases.

    relu layers use the Glorot bound ``sqrt(6 / (fan_in + fan_out))``. For sine
    networks the first encoder layer uses ``1 / fan_in`` and every other layer
    ``sqrt(6 / fan_in) / omega0``.
    """
    rng = np.random.default_rng(seed)
    enc_shapes, dec_shapes, fusion_shape = _layer_shapes(config)

    def make(shape, first=False):
        fan_out, fan_in = shape
        if config.activation == "relu":
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        elif first:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / config.sine_omega0
        return rng.uniform(-bound, bound, size=shape), np.zeros(fan_out)

    encoder = [make(s, first=(i == 0)) for i, s in enumerate(enc_shapes)]
    decoder = [make(s) for s in dec_shapes]
    fusion = make(fusion_shape) if fusion_shape else None
    return Params(encoder, decoder, fusion)


# -- activations ----------------------------------------------------------------


def _act(config: NetConfig, z: np.ndarray) -> np.ndarray:
    if config.activation == "relu":
        return np.maximum(z, 0.0)
    return np.sin(config.sine_omega0 * z)


def _act_grad(config: NetConfig, z: np.ndarray) -> np.ndarray:
    if config.activation == "relu":
        return (z > 0).astype(z.dtype)
    w0 = config.sine_omega0
    return w0 * np.cos(w0 * z)


def _uses_skip(config: NetConfig, w: np.ndarray, last: bool) -> bool:
    return config.skip_connections and not last and w.shape[0] == w.shape[1]


@dataclass
class _StackTrace:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def _run_stack(config, layers, h, fusion=None, geo=None, trace: Optional[_StackTrace] = None):
    n = len(layers)
    for i, (w, b) in enumerate(layers):
        last = i == n - 1
        z = h @ w.T + b
        if trace is not None:
            trace.inputs.append(h)
            trace.pre.append(z)
        out = z if last else _act(config, z)
        if _uses_skip(config, w, last):
            out = out + h
        if i == 0 and fusion is not None:
            out = out + (geo @ fusion[0].T + fusion[1])
        h = out
    return h


def _as_batch(x, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must have length {width}, got shape {np.shape(x)}")
    return x


def _geo_batch(geo, n: int) -> np.ndarray:
    if isinstance(geo, GeoTemporalPair):
        geo = geo.as_tuple()
    g = np.asarray(geo, dtype=float)
    if g.ndim == 1:
        g = np.broadcast_to(g, (n, GEO_DIM))
    if g.shape != (n, GEO_DIM):
        raise ValueError(f"geo must have shape ({n}, {GEO_DIM}), got {g.shape}")
    return g


def encode(params: Params, x, config: NetConfig) -> np.ndarray:
    """Latent code(s) for input row(s) ``x``.

    With ``input_concat`` fusion ``x`` must already carry the two geo-temporal
    values appended. A 1-D input returns a 1-D code.
    """
    single = np.ndim(x) == 1
    h = _run_stack(config, params.encoder, _as_batch(x, config.encoder_input_dim, "x"))
    return h[0] if single else h


def decode(params: Params, latent, config: NetConfig, geo=None) -> np.ndarray:
    single = np.ndim(latent) == 1
    e = _as_batch(latent, config.latent_dim, "latent")
    if config.fusion == "decoder_add":
        if geo is None:
            raise ValueError("decoder_add fusion needs the pair's geo-temporal features")
        out = _run_stack(config, params.decoder, e, params.fusion, _geo_batch(geo, len(e)))
    else:
        out = _run_stack(config, params.decoder, e)
    return out[0] if single else out


def with_geo(x: np.ndarray, geo: np.ndarray) -> np.ndarray:
    """Append geo-temporal columns, the encoder input layout of ``input_concat``."""
    return np.concatenate([x, geo], axis=1)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs for one batch of pairs.

    Row ``i`` of branch 1 sits at row ``i`` of the stacked arrays, branch 2 at
    row ``B + i``.
    """

    params: Params
    config: NetConfig
    x1: np.ndarray
    x2: np.ndarray
    geo: np.ndarray
    encoder: _StackTrace
    decoder: _StackTrace
    latent: np.ndarray
    recon: np.ndarray

    @property
    def batch(self) -> int:
        return len(self.x1)

    @property
    def e1(self):
        return self.latent[: self.batch]

    @property
    def e2(self):
        return self.latent[self.batch:]

    @property
    def v1_hat(self):
        return self.recon[: self.batch]

    @property
    def v2_hat(self):
        return self.recon[self.batch:]


def forward_pair(params: Params, x1, x2, geo, config: NetConfig) -> ForwardTrace:
    x1 = _as_batch(x1, config.input_dim, "x1")
    x2 = _as_batch(x2, config.input_dim, "x2")
    if len(x1) != len(x2):
        raise ValueError("x1 and x2 batch sizes differ")
    g = _geo_batch(geo, len(x1))
    g2 = np.concatenate([g, g])
    stacked = np.concatenate([x1, x2])
    if config.fusion == "input_concat":
        stacked = with_geo(stacked, g2)
    enc_trace, dec_trace = _StackTrace(), _StackTrace()
    latent = _run_stack(config, params.encoder, stacked, trace=enc_trace)
    fusion = params.fusion if config.fusion == "decoder_add" else None
    recon = _run_stack(config, params.decoder, latent, fusion, g2, trace=dec_trace)
    return ForwardTrace(params, config, x1, x2, g, enc_trace, dec_trace, latent, recon)


def _back_stack(config, layers, trace: _StackTrace, grad, fusion_grad_geo=None):
    """Reverse pass through one stack; returns (layer grads, input grad, fusion grads)."""
    n = len(layers)
    grads: list = [None] * n
    fusion_grads = None
    for i in range(n - 1, -1, -1):
        w, _ = layers[i]
        last = i == n - 1
        z, h_in = trace.pre[i], trace.inputs[i]
        if i == 0 and fusion_grad_geo is not None:
            fusion_grads = (grad.T @ fusion_grad_geo, grad.sum(axis=0))
        dz = grad if last else grad * _act_grad(config, z)
        grads[i] = (dz.T @ h_in, dz.sum(axis=0))
        g_in = dz @ w
        if _uses_skip(config, w, last):
            g_in = g_in + grad
        grad = g_in
    return grads, grad, fusion_grads


def backward(trace: ForwardTrace, config: NetConfig, loss_grads) -> Params:
    """Exact gradients of the loss given its gradients w.r.t. the four heads.

    ``loss_grads`` is ``(d_e1, d_e2, d_v1_hat, d_v2_hat)`` for the whole batch;
    parameter gradients are summed over the batch rows.
    """
    d_e1, d_e2, d_v1, d_v2 = (np.asarray(g, dtype=float) for g in loss_grads)
    b = trace.batch
    d_latent = np.concatenate([d_e1.reshape(b, -1), d_e2.reshape(b, -1)])
    d_recon = np.concatenate([d_v1.reshape(b, -1), d_v2.reshape(b, -1)])
    if d_latent.shape != trace.latent.shape or d_recon.shape != trace.recon.shape:
        raise ValueError("loss gradient shapes do not match the trace")
    params = trace.params
    geo2 = np.concatenate([trace.geo, trace.geo]) if config.fusion == "decoder_add" else None
    dec_grads, d_from_dec, fusion_grads = _back_stack(config, params.decoder, trace.decoder, d_recon, geo2)
    enc_grads, _, _ = _back_stack(config, params.encoder, trace.encoder, d_latent + d_from_dec)
    return Params(enc_grads, dec_grads, fusion_grads)


# -- serialisation ---------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIIId")


def save_params(params: Params, config: NetConfig, path) -> None:
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        config.input_dim,
        config.hidden_dim,
        config.latent_dim,
        config.depth,
        ACTIVATIONS.index(config.activation),
        int(config.skip_connections),
        FUSIONS.index(config.fusion),
        config.sine_omega0,
    )
    with Path(path).open("wb") as fh:
        fh.write(header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> tuple[Params, NetConfig]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("params file too short")
    magic, version, i_dim, h_dim, l_dim, depth, act, skip, fusion, omega = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a params file (bad magic)")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported params version {version}")
    config = NetConfig(i_dim, h_dim, l_dim, depth, ACTIVATIONS[act], bool(skip), FUSIONS[fusion], omega)
    enc_shapes, dec_shapes, fusion_shape = _layer_shapes(config)
    shapes = []
    for o, i in enc_shapes + dec_shapes + ([fusion_shape] if fusion_shape else []):
        shapes += [(o, i), (o,)]
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise ValueError(f"params file size {len(data)} does not match config ({expected})")
    arrays, offset = [], _HEADER.size
    for s in shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(s).astype(float))
        offset += 8 * count
    it = iter(arrays)
    encoder = [(next(it), next(it)) for _ in enc_shapes]
    decoder = [(next(it), next(it)) for _ in dec_shapes]
    fusion_p = (next(it), next(it)) if fusion_shape else None
    return Params(encoder, decoder, fusion_p), config
