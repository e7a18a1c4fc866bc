"""CSI autoencoder with a personalized dense encoder and a LoRA-adapted decoder.

Every decoder linear layer is a :class:`LoraLinear` whose effective weight is
``w0 + (alpha / rank) * b @ a``. The adapter path is evaluated as two thin
matmuls; the merged weight is only built by :func:`merge_weights`.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .numkit import (
    DimensionError,
    Param,
    act_backward,
    act_forward,
    linear_backward,
    linear_forward,
    matmul,
)

SELECTORS = ("full", "encoder", "decoder_full", "adapters_A", "adapters_B", "adapters_both")


@dataclass
class DenseLayer:
    w: Param
    bias: Param

    @property
    def dims(self) -> tuple[int, int]:
        return self.w.shape


@dataclass
class LoraLinear:
    w0: Param
    a: Param
    b: Param
    bias: Param
    alpha: float
    rank: int

    def __post_init__(self) -> None:
        d1, d2 = self.w0.shape
        if self.rank < 1 or self.rank >= min(d1, d2):
            raise DimensionError(f"rank {self.rank} must lie in [1, min({d1}, {d2}))")
        if self.a.shape != (self.rank, d2) or self.b.shape != (d1, self.rank):
            raise DimensionError(f"adapter shapes a{self.a.shape}, b{self.b.shape} do not fit w0{(d1, d2)}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.w0.shape

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraGrads(NamedTuple):
    x: np.ndarray
    a: np.ndarray
    b: np.ndarray
    w0: np.ndarray | None
    bias: np.ndarray | None


def lora_forward(layer: LoraLinear, x: np.ndarray) -> np.ndarray:
    y = linear_forward(x, layer.w0.value, layer.bias.value)
    u = matmul(x, layer.a.value.T)
    return y + layer.scale * matmul(u, layer.b.value.T)


def lora_backward(layer: LoraLinear, x: np.ndarray, upstream: np.ndarray) -> LoraGrads:
    """Gradients of :func:`lora_forward`.

    Frozen adapter halves get an all-zero gradient; ``w0``/``bias`` gradients
    are only formed when those parameters are trainable (dense baselines).
    """
    s = layer.scale
    d1, d2 = layer.dims
    if upstream.shape != (x.shape[0], d1) or x.shape[1] != d2:
        raise DimensionError(f"lora backward shapes: x {x.shape}, upstream {upstream.shape}, w0 {(d1, d2)}")
    g_b = matmul(upstream, layer.b.value)  # batch x r
    grad_x = matmul(upstream, layer.w0.value) + s * matmul(g_b, layer.a.value)
    if layer.a.frozen:
        grad_a = np.zeros_like(layer.a.value)
    else:
        grad_a = s * matmul(g_b.T, x)
    if layer.b.frozen:
        grad_b = np.zeros_like(layer.b.value)
    else:
        grad_b = s * matmul(upstream.T, matmul(x, layer.a.value.T))
    grad_w0 = None if layer.w0.frozen else matmul(upstream.T, x)
    grad_bias = None if layer.bias.frozen else upstream.sum(axis=0)
    return LoraGrads(grad_x, grad_a, grad_b, grad_w0, grad_bias)


def merge_weights(layer: LoraLinear) -> np.ndarray:
    return layer.w0.value + layer.scale * matmul(layer.b.value, layer.a.value)


def init_lora(layer: LoraLinear, rng: np.random.Generator) -> LoraLinear:
    """A ~ N(0, 1/d2), B = 0, so the adapted layer starts equal to its base."""
    d2 = layer.dims[1]
    layer.a.value = rng.normal(0.0, np.sqrt(1.0 / d2), size=layer.a.shape)
    layer.b.value = np.zeros(layer.b.shape)
    layer.a.zero_grad()
    layer.b.zero_grad()
    return layer


@dataclass
class EncoderModel:
    layers: list[DenseLayer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].dims[1]

    @property
    def codeword_len(self) -> int:
        return self.layers[-1].dims[0]


@dataclass
class DecoderModel:
    layers: list[LoraLinear]
    out_shape: tuple[int, int, int]

    @property
    def n_lora_layers(self) -> int:
        return len(self.layers)

    @property
    def rank(self) -> int:
        return self.layers[0].rank

    @property
    def alpha(self) -> float:
        return self.layers[0].alpha

    def adapters(self, half: str) -> list[np.ndarray]:
        return [getattr(layer, half.lower()).value for layer in self.layers]

    def set_adapters(self, half: str, tensors: list[np.ndarray]) -> None:
        if len(tensors) != len(self.layers):
            raise DimensionError(f"expected {len(self.layers)} adapter tensors, got {len(tensors)}")
        for layer, t in zip(self.layers, tensors):
            p = getattr(layer, half.lower())
            if t.shape != p.shape:
                raise DimensionError(f"adapter {half} shape {t.shape} != {p.shape}")
            p.value = np.array(t, dtype=np.float64)


def encode_forward(enc: EncoderModel, x: np.ndarray) -> tuple[np.ndarray, list]:
    cache = []
    h = x
    for i, layer in enumerate(enc.layers):
        z = linear_forward(h, layer.w.value, layer.bias.value)
        cache.append((h, z))
        h = z if i == len(enc.layers) - 1 else act_forward(z)
    return h, cache


def decode_forward(dec: DecoderModel, v: np.ndarray) -> tuple[np.ndarray, list]:
    cache = []
    h = v
    for i, layer in enumerate(dec.layers):
        z = lora_forward(layer, h)
        cache.append((h, z))
        h = z if i == len(dec.layers) - 1 else act_forward(z)
    return h, cache


def encode(enc: EncoderModel, h: np.ndarray) -> np.ndarray:
    """Codewords (batch x M) for a batch of (n_delay, n_tx, 2) samples."""
    x = h.reshape(h.shape[0], -1)
    if x.shape[1] != enc.in_dim:
        raise DimensionError(f"encoder expects {enc.in_dim} inputs per sample, got {x.shape[1]}")
    return encode_forward(enc, x)[0]


def decode(dec: DecoderModel, v: np.ndarray) -> np.ndarray:
    if v.ndim != 2 or v.shape[1] != dec.layers[0].dims[1]:
        raise DimensionError(f"decoder expects codewords of length {dec.layers[0].dims[1]}, got {v.shape}")
    out = decode_forward(dec, v)[0]
    return out.reshape((v.shape[0],) + dec.out_shape)


def _accumulate(p: Param, g: np.ndarray | None) -> None:
    if g is not None and not p.frozen:
        p.grad += g


@dataclass
class Autoencoder:
    encoder: EncoderModel
    decoder: DecoderModel

    def reconstruct(self, h: np.ndarray) -> np.ndarray:
        return decode(self.decoder, encode(self.encoder, h))

    def named_params(self) -> Iterator[tuple[str, Param]]:
        for i, layer in enumerate(self.encoder.layers):
            yield f"enc.{i}.w", layer.w
            yield f"enc.{i}.bias", layer.bias
        for i, layer in enumerate(self.decoder.layers):
            yield f"dec.{i}.w0", layer.w0
            yield f"dec.{i}.bias", layer.bias
            yield f"dec.{i}.a", layer.a
            yield f"dec.{i}.b", layer.b

    def params(self) -> dict[str, Param]:
        return dict(self.named_params())

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    def loss_and_grad(self, h: np.ndarray) -> float:
        """NMSE of the batch; accumulates gradients into every trainable Param."""
        batch = h.shape[0]
        x = h.reshape(batch, -1)
        v, enc_cache = encode_forward(self.encoder, x)
        y, dec_cache = decode_forward(self.decoder, v)
        power = (x * x).sum(axis=1)
        err = y - x
        loss = float(np.mean((err * err).sum(axis=1) / power))
        g = (2.0 / batch) * err / power[:, None]

        for i in range(len(self.decoder.layers) - 1, -1, -1):
            layer = self.decoder.layers[i]
            h_in, z = dec_cache[i]
            if i != len(self.decoder.layers) - 1:
                g = act_backward(z, g)
            grads = lora_backward(layer, h_in, g)
            _accumulate(layer.a, grads.a)
            _accumulate(layer.b, grads.b)
            _accumulate(layer.w0, grads.w0)
            _accumulate(layer.bias, grads.bias)
            g = grads.x
        for i in range(len(self.encoder.layers) - 1, -1, -1):
            layer = self.encoder.layers[i]
            h_in, z = enc_cache[i]
            if i != len(self.encoder.layers) - 1:
                g = act_backward(z, g)
            if i == 0:
                # input gradient is not needed
                _accumulate(layer.w, None if layer.w.frozen else matmul(g.T, h_in))
                _accumulate(layer.bias, None if layer.bias.frozen else g.sum(axis=0))
                break
            grad_x, grad_w, grad_bias = linear_backward(h_in, layer.w.value, g)
            _accumulate(layer.w, grad_w)
            _accumulate(layer.bias, grad_bias)
            g = grad_x
        return loss

    def copy(self) -> "Autoencoder":
        return copy.deepcopy(self)

    def set_trainable(self, *, encoder: bool, base: bool, a: bool, b: bool) -> None:
        for layer in self.encoder.layers:
            layer.w.frozen = layer.bias.frozen = not encoder
        for layer in self.decoder.layers:
            layer.w0.frozen = layer.bias.frozen = not base
            layer.a.frozen = not a
            layer.b.frozen = not b


def codeword_length(n_delay: int, n_tx: int, gamma: Fraction) -> int:
    m = Fraction(gamma) * 2 * n_delay * n_tx
    if m.denominator != 1 or m <= 0:
        raise ValueError(f"gamma={gamma} does not give a positive integer codeword for {n_delay}x{n_tx}x2")
    return int(m)


def _dense(rng: np.random.Generator, d_out: int, d_in: int, gain: float = 1.0) -> tuple[Param, Param]:
    # He init adjusted for the leaky slope
    std = gain * np.sqrt(2.0 / ((1.0 + 0.3**2) * d_in))
    return Param(rng.normal(0.0, std, size=(d_out, d_in))), Param(np.zeros(d_out))


# The reconstruction layer starts 10x smaller so an untrained model outputs
# almost nothing (NMSE near 0 dB) instead of a large random field, which
# otherwise traps training at the predict-the-mean plateau.
OUTPUT_INIT_GAIN = 0.1


def build_autoencoder(
    n_delay: int,
    n_tx: int,
    gamma: Fraction,
    hidden: int,
    lora_layers: int,
    rank: int,
    alpha: float,
    rng: np.random.Generator,
) -> Autoencoder:
    """Encoder D -> hidden -> M; decoder M -> hidden x (L-1) -> D, all L layers LoRA-adapted."""
    if lora_layers < 1:
        raise ValueError("decoder needs at least one LoRA layer")
    d = 2 * n_delay * n_tx
    m = codeword_length(n_delay, n_tx, gamma)
    enc_dims = [d, hidden, m]
    enc = EncoderModel([DenseLayer(*_dense(rng, o, i)) for i, o in zip(enc_dims[:-1], enc_dims[1:])])
    dec_dims = [m] + [hidden] * (lora_layers - 1) + [d]
    dec_layers = []
    for j, (d_in, d_out) in enumerate(zip(dec_dims[:-1], dec_dims[1:])):
        w0, bias = _dense(rng, d_out, d_in, OUTPUT_INIT_GAIN if j == lora_layers - 1 else 1.0)
        layer = LoraLinear(w0, Param(np.zeros((rank, d_in))), Param(np.zeros((d_out, rank))), bias, alpha, rank)
        dec_layers.append(layer)
    model = Autoencoder(enc, DecoderModel(dec_layers, (n_delay, n_tx, 2)))
    for layer in dec_layers:
        init_lora(layer, rng)
    return model


def count_params(model: Autoencoder, selector: str) -> int:
    """Exact scalar-element counts for the uplink payload kinds."""
    enc = sum(l.w.size + l.bias.size for l in model.encoder.layers)
    dec = sum(l.w0.size + l.bias.size for l in model.decoder.layers)
    a = sum(l.a.size for l in model.decoder.layers)
    b = sum(l.b.size for l in model.decoder.layers)
    counts = {
        "full": enc + dec,
        "encoder": enc,
        "decoder_full": dec,
        "adapters_A": a,
        "adapters_B": b,
        "adapters_both": a + b,
    }
    try:
        return counts[selector]
    except KeyError:
        raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}") from None


def param_digest(params: list[Param]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return h.hexdigest()


def base_digest(dec: DecoderModel) -> str:
    """Hash of every frozen-base tensor (w0 and bias) of the decoder."""
    return param_digest([p for l in dec.layers for p in (l.w0, l.bias)])


_MODEL_MAGIC = b"FPMD"
_MODEL_VERSION = 1


def model_to_bytes(model: Autoencoder) -> bytes:
    enc, dec = model.encoder, model.decoder
    parts = [_MODEL_MAGIC, struct.pack("<III", _MODEL_VERSION, dec.out_shape[0], dec.out_shape[1])]
    parts.append(struct.pack("<I", len(enc.layers)))
    parts += [struct.pack("<II", *l.dims) for l in enc.layers]
    parts.append(struct.pack("<I", len(dec.layers)))
    parts += [struct.pack("<II", *l.dims) for l in dec.layers]
    parts.append(struct.pack("<Id", dec.rank, dec.alpha))
    for _, p in model.named_params():
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(raw: bytes) -> Autoencoder:
    if raw[:4] != _MODEL_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    off = 4
    version, n_delay, n_tx = struct.unpack_from("<III", raw, off)
    off += 12
    if version != _MODEL_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    def dims_block() -> list[tuple[int, int]]:
        nonlocal off
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        out = [struct.unpack_from("<II", raw, off + 8 * i) for i in range(n)]
        off += 8 * n
        return out

    enc_dims = dims_block()
    dec_dims = dims_block()
    rank, alpha = struct.unpack_from("<Id", raw, off)
    off += struct.calcsize("<Id")

    def take(shape) -> Param:
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
        return Param(arr)

    enc_layers = []
    for d_out, d_in in enc_dims:
        enc_layers.append(DenseLayer(take((d_out, d_in)), take((d_out,))))
    dec_layers = []
    for d1, d2 in dec_dims:
        w0, bias = take((d1, d2)), take((d1,))
        a, b = take((rank, d2)), take((d1, rank))
        dec_layers.append(LoraLinear(w0, a, b, bias, alpha, rank))
    if off != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - off} trailing bytes")
    return Autoencoder(EncoderModel(enc_layers), DecoderModel(dec_layers, (n_delay, n_tx, 2)))


def save_checkpoint(model: Autoencoder, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_checkpoint(path: str | Path) -> Autoencoder:
    return model_from_bytes(Path(path).read_bytes())
