"""Practical fronthaul codec.

Encoder (per AP): random linear compression, error accumulation and A-law
quantization.  Decoder (at the CS): K layers of small element-wise networks
that exchange side information between AP branches, trained on synthetic
Gaussian samples by full-batch gradient descent.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import as_rng
from .errors import DimensionError, RateError, TrainingError

A_LAW = 87.6
_LN_A = 1.0 + math.log(A_LAW)
MAX_BITS = 32
HEADER = struct.Struct("<HBId")


# --- A-law quantizer ---------------------------------------------------------

def alaw_compress(x):
    """A-law compander on [-1, 1]."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    small = ax < 1.0 / A_LAW
    y = np.where(small, A_LAW * ax / _LN_A,
                 (1.0 + np.log(np.maximum(A_LAW * ax, 1.0))) / _LN_A)
    return np.sign(x) * y


def alaw_expand(y):
    y = np.asarray(y, dtype=float)
    ay = np.abs(y)
    small = ay < 1.0 / _LN_A
    x = np.where(small, ay * _LN_A / A_LAW, np.exp(ay * _LN_A - 1.0) / A_LAW)
    return np.sign(y) * x


def alaw_quantize(x, bits: int, scale: float) -> np.ndarray:
    """Codes in ``[0, 2**bits)``; inputs outside ``[-scale, scale]`` are clipped."""
    if bits < 1:
        raise RateError("need at least one bit per element")
    levels = 2 ** int(bits)
    x = np.asarray(x, dtype=float)
    if scale <= 0:
        return np.full(x.shape, levels // 2, dtype=np.int64)
    y = alaw_compress(np.clip(x / scale, -1.0, 1.0))
    codes = np.floor((y + 1.0) * 0.5 * levels)
    return np.clip(codes, 0, levels - 1).astype(np.int64)


def alaw_dequantize(codes, bits: int, scale: float) -> np.ndarray:
    """Mid-rise reconstruction; ``scale == 0`` encodes an all-zero vector."""
    levels = 2 ** int(bits)
    codes = np.asarray(codes)
    if scale <= 0:
        return np.zeros(codes.shape)
    y = (codes + 0.5) * (2.0 / levels) - 1.0
    return scale * alaw_expand(y)


def alaw_max_step(bits: int, scale: float) -> float:
    """Width of the widest reconstruction cell (the outermost one)."""
    levels = 2 ** int(bits)
    return float(scale * (1.0 - alaw_expand(1.0 - 2.0 / levels)))


# --- encoder -----------------------------------------------------------------

def compressed_length(n: int, sigma: float) -> int:
    if not 0 < sigma <= 1:
        raise ValueError("compression ratio must lie in (0, 1]")
    return max(1, int(math.ceil(n * sigma - 1e-9)))


def bits_per_element(n: int, rate: float, m: int) -> int:
    bits = int(math.floor(n * rate / m + 1e-9))
    if bits < 1:
        raise RateError(f"budget of {n * rate:g} bits cannot give {m} elements one bit each")
    return min(bits, MAX_BITS)


def compression_matrix(n: int, sigma: float, seed) -> np.ndarray:
    """Shared ``m x n`` Gaussian sketch with N(0, 1/n) entries; identity when sigma = 1."""
    m = compressed_length(n, sigma)
    if m == n:
        return np.eye(n)
    return as_rng(seed).standard_normal((m, n)) / math.sqrt(n)


@dataclass
class EncoderState:
    a_mat: np.ndarray
    delta: np.ndarray
    sigma: float
    rate: float

    @classmethod
    def create(cls, n: int, sigma: float, rate: float, a_mat=None, seed=0) -> "EncoderState":
        a = compression_matrix(n, sigma, seed) if a_mat is None else np.asarray(a_mat, dtype=float)
        return cls(a, np.zeros(a.shape[0]), float(sigma), float(rate))

    @property
    def n(self) -> int:
        return self.a_mat.shape[1]

    @property
    def m(self) -> int:
        return self.a_mat.shape[0]

    @property
    def bits(self) -> int:
        return bits_per_element(self.n, self.rate, self.m)


@dataclass(frozen=True)
class QuantizedPayload:
    codes: np.ndarray
    bits: int
    scale: float
    ap_id: int = 0

    @property
    def n_bits(self) -> int:
        """Bits on the wire excluding the header (the scale scalar is overhead)."""
        return len(self.codes) * self.bits

    def dequantize(self) -> np.ndarray:
        return alaw_dequantize(self.codes, self.bits, self.scale)

    def to_bytes(self) -> bytes:
        codes = np.asarray(self.codes, dtype=np.uint64)
        shifts = np.arange(self.bits - 1, -1, -1, dtype=np.uint64)
        bitmat = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
        body = np.packbits(bitmat.ravel()).tobytes()
        return HEADER.pack(self.ap_id, self.bits, len(codes), self.scale) + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantizedPayload":
        ap_id, bits, length, scale = HEADER.unpack_from(blob)
        raw = np.frombuffer(blob, dtype=np.uint8, offset=HEADER.size)
        flat = np.unpackbits(raw)[: length * bits].reshape(length, bits).astype(np.int64)
        codes = flat @ (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
        return cls(codes, bits, scale, ap_id)


def quantize_vector(x, bits: int, ap_id: int = 0) -> QuantizedPayload:
    x = np.asarray(x, dtype=float)
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    return QuantizedPayload(alaw_quantize(x, bits, scale), bits, scale, ap_id)


def encode(s_i, state: EncoderState, ap_id: int = 0, feedback: bool = True):
    """Compress, add the accumulated error, quantize, update the accumulator."""
    s_i = np.asarray(s_i, dtype=float)
    if s_i.shape != (state.n,):
        raise DimensionError(f"expected a length-{state.n} edge update, got {s_i.shape}")
    bits = state.bits
    s_dot = state.a_mat @ s_i
    s_ddot = s_dot + state.delta if feedback else s_dot
    payload = quantize_vector(s_ddot, bits, ap_id)
    delta = s_ddot - payload.dequantize() if feedback else state.delta
    return payload, replace(state, delta=delta)


def decompress(x, a_mat) -> np.ndarray:
    """Adjoint sketch reconstruction ``(n/m) A^T x`` (identity when A is square)."""
    a_mat = np.asarray(a_mat)
    m, n = a_mat.shape
    if m == n:
        return np.asarray(x, dtype=float) @ a_mat
    return (n / m) * (np.asarray(x, dtype=float) @ a_mat)


def fuse(c, estimates) -> np.ndarray:
    """``sum_i c_i x_i``, accumulated in AP order."""
    out = np.zeros(np.shape(estimates)[1])
    for ci, xi in zip(c, estimates):
        out = out + ci * xi
    return out


# --- decoder networks --------------------------------------------------------

@dataclass
class DecoderWeights:
    """Element-wise residual networks, one per (layer, AP).

    ``kappa(u, t) = a_u u + a_s t + r_i (w2 . tanh(W1 [u / r_i, t / q_i] + b1) + b2)``
    with input scale ``r_i`` and side-information scale ``q_i``.  The
    identity initialization (``a_u = 1``, ``a_s = 0``, ``w2 = b2 = 0``)
    reproduces plain dequantization exactly.
    """

    a_u: np.ndarray
    a_s: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    in_scale: np.ndarray
    side_scale: np.ndarray
    zero_side: bool = False
    history: list = field(default_factory=list)

    @property
    def layer_count(self) -> int:
        return self.a_u.shape[0]

    @property
    def n_ap(self) -> int:
        return self.a_u.shape[1]

    @property
    def hidden(self) -> int:
        return self.w2.shape[2]

    @classmethod
    def identity(cls, n_ap: int, layers: int = 1, hidden: int = 16, seed=0,
                 in_scale=None, side_scale=None, zero_side=False) -> "DecoderWeights":
        rng = as_rng(seed)
        shape = (layers, n_ap)
        return cls(
            a_u=np.ones(shape), a_s=np.zeros(shape),
            w1=rng.standard_normal(shape + (hidden, 2)) / math.sqrt(2.0),
            b1=0.1 * rng.standard_normal(shape + (hidden,)),
            w2=np.zeros(shape + (hidden,)), b2=np.zeros(shape),
            in_scale=np.ones(n_ap) if in_scale is None else np.asarray(in_scale, dtype=float),
            side_scale=np.ones(n_ap) if side_scale is None else np.asarray(side_scale, dtype=float),
            zero_side=zero_side,
        )

    _PARAMS = ("a_u", "a_s", "w1", "b1", "w2", "b2")

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self._PARAMS}

    def with_params(self, params: dict) -> "DecoderWeights":
        return replace(self, **{k: np.array(v) for k, v in params.items()}, history=list(self.history))

    def copy(self) -> "DecoderWeights":
        return self.with_params(self.params())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())

    def to_json(self) -> str:
        d = {k: getattr(self, k).tolist() for k in self._PARAMS + ("in_scale", "side_scale")}
        d.update(zero_side=self.zero_side, layer_count=self.layer_count, history=self.history)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "DecoderWeights":
        d = json.loads(text)
        arrays = {k: np.asarray(d[k], dtype=float) for k in cls._PARAMS + ("in_scale", "side_scale")}
        return cls(**arrays, zero_side=bool(d.get("zero_side", False)), history=d.get("history", []))


def _forward(weights: DecoderWeights, x):
    """Run all layers on inputs ``x (n_ap, M)``; returns final estimates and a cache."""
    n_ap, M = x.shape
    side = np.zeros_like(x)
    cache = []
    est = x
    for k in range(weights.layer_count):
        if weights.zero_side:
            side = np.zeros_like(x)
        feats = np.stack([x / weights.in_scale[:, None], side / weights.side_scale[:, None]], axis=1)
        pre = np.einsum("ihf,ifm->ihm", weights.w1[k], feats) + weights.b1[k][:, :, None]
        h = np.tanh(pre)
        mlp = np.einsum("ih,ihm->im", weights.w2[k], h) + weights.b2[k][:, None]
        est = weights.a_u[k][:, None] * x + weights.a_s[k][:, None] * side + weights.in_scale[:, None] * mlp
        cache.append((side, feats, h))
        side = est.sum(axis=0, keepdims=True) - est
    return est, cache


def decode_estimates(weights: DecoderWeights, x) -> np.ndarray:
    """Per-AP final-layer estimates for decompressed inputs ``x (n_ap, M)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != weights.n_ap:
        raise DimensionError(f"decoder built for {weights.n_ap} APs, got {x.shape[0]} inputs")
    return _forward(weights, x)[0]


def decode(payloads, a_mat, weights: DecoderWeights, c) -> np.ndarray:
    """Estimate ``sum_i c_i s_i`` from the AP payloads (a list or an ``{ap_id: payload}`` map)."""
    if isinstance(payloads, dict):
        missing = [i for i in range(weights.n_ap) if i not in payloads]
        if missing:
            raise DimensionError(f"missing payloads from APs {missing}")
        payloads = [payloads[i] for i in range(weights.n_ap)]
    if len(payloads) != weights.n_ap:
        raise DimensionError(f"expected {weights.n_ap} payloads, got {len(payloads)}")
    x = np.stack([decompress(p.dequantize(), a_mat) for p in payloads])
    return fuse(c, decode_estimates(weights, x))


def loss_and_grad(weights: DecoderWeights, x, target, c, norm: float = 1.0):
    """Mean squared fusion error ``mean((sum_i c_i est_i - target)^2) / norm`` and its gradient."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    est, cache = _forward(weights, x)
    M = x.shape[1]
    resid = c @ est - target
    loss = float(resid @ resid / (M * norm))
    g_est = np.outer(c, 2.0 * resid / (M * norm))
    grads = {k: np.zeros_like(v) for k, v in weights.params().items()}
    r = weights.in_scale[:, None]
    for k in range(weights.layer_count - 1, -1, -1):
        side, feats, h = cache[k]
        grads["a_u"][k] = np.sum(g_est * x, axis=1)
        grads["a_s"][k] = np.sum(g_est * side, axis=1)
        g_mlp = g_est * r
        grads["w2"][k] = np.einsum("im,ihm->ih", g_mlp, h)
        grads["b2"][k] = g_mlp.sum(axis=1)
        g_pre = weights.w2[k][:, :, None] * g_mlp[:, None, :] * (1.0 - h ** 2)
        grads["w1"][k] = np.einsum("ihm,ifm->ihf", g_pre, feats)
        grads["b1"][k] = g_pre.sum(axis=2)
        if k == 0 or weights.zero_side:
            break
        g_side = (weights.a_s[k][:, None] * g_est
                  + np.einsum("ih,ihm->im", weights.w1[k][:, :, 1], g_pre) / weights.side_scale[:, None])
        g_est = g_side.sum(axis=0, keepdims=True) - g_side
    return loss, grads


# --- training ----------------------------------------------------------------

def sample_training_inputs(sigma_s, encoder_states, n_vectors: int, seed, feedback: bool = False):
    """Draw ``n_vectors`` source vectors ``s ~ N(0, sigma_s)`` per coordinate,
    push each AP's vectors through its encoder and return
    ``(decompressed inputs (n_ap, M), sources (n_ap, M))``.

    With ``feedback`` the vectors pass through the encoder as successive
    rounds, so the inputs carry the error accumulator as they do at run time.
    """
    s_mat = np.asarray(sigma_s, dtype=float)
    n_ap = s_mat.shape[0]
    n = encoder_states[0].n
    rng = as_rng(seed)
    w, u = np.linalg.eigh(s_mat)
    root = u * np.sqrt(np.clip(w, 0.0, None))
    src = np.einsum("ij,vjn->vin", root, rng.standard_normal((n_vectors, n_ap, n)))
    xs = np.empty_like(src)
    states = list(encoder_states)
    for v in range(n_vectors):
        for i, st in enumerate(states):
            payload, states[i] = encode(src[v, i], st, i, feedback=feedback)
            xs[v, i] = decompress(payload.dequantize(), st.a_mat)
    return xs.transpose(1, 0, 2).reshape(n_ap, -1), src.transpose(1, 0, 2).reshape(n_ap, -1)


def side_scales(sigma_s) -> np.ndarray:
    s = np.asarray(sigma_s, dtype=float)
    n = s.shape[0]
    out = np.ones(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        var = float(s[np.ix_(others, others)].sum()) if others else 0.0
        out[i] = math.sqrt(var) if var > 0 else 1.0
    return out


@dataclass
class TrainConfig:
    layers: int = 2
    hidden: int = 16
    epochs: int = 2000
    lr: float = 1e-2
    lr_growth: float = 1.05
    n_vectors: int = 40
    zero_side: bool = False
    feedback: bool = False


def train_decoder(sigma_s, c, encoder_states, arch: TrainConfig | None = None, epochs=None,
                  seed=0, init: DecoderWeights | None = None) -> DecoderWeights:
    """Fit the decoder networks to synthetic Gaussian samples.

    Full-batch gradient descent on the fusion MSE normalized by
    ``c^T sigma_s c``.  A step that increases the loss is rejected and the
    learning rate halved; an accepted step grows it by ``lr_growth``.
    ``init`` warm-starts from existing weights.
    """
    arch = arch or TrainConfig()
    epochs = arch.epochs if epochs is None else int(epochs)
    s_mat = np.asarray(sigma_s, dtype=float)
    c = np.asarray(c, dtype=float)
    n_ap = s_mat.shape[0]
    rng = as_rng(seed)
    if init is None:
        in_scale = np.sqrt(np.clip(np.diag(s_mat), 1e-300, None))
        weights = DecoderWeights.identity(n_ap, arch.layers, arch.hidden, rng, in_scale,
                                          side_scales(s_mat), arch.zero_side)
    else:
        weights = init.copy()
    if epochs <= 0:
        return weights
    x, src = sample_training_inputs(s_mat, encoder_states, arch.n_vectors, rng, arch.feedback)
    target = c @ src
    norm = float(c @ s_mat @ c)
    norm = norm if norm > 0 else 1.0
    lr = arch.lr
    loss, grads = loss_and_grad(weights, x, target, c, norm)
    history = [loss]
    for _ in range(epochs):
        trial = weights.with_params({k: v - lr * grads[k] for k, v in weights.params().items()})
        t_loss, t_grads = loss_and_grad(trial, x, target, c, norm)
        if not math.isfinite(t_loss) or not trial.is_finite():
            if lr < 1e-12:
                raise TrainingError("decoder training diverged", checkpoint=weights)
            lr *= 0.5
            continue
        if t_loss > loss:
            lr *= 0.5
            if lr < 1e-12:
                break
            continue
        weights, loss, grads = trial, t_loss, t_grads
        history.append(loss)
        lr *= arch.lr_growth
    weights.history = history
    return weights


def fusion_mse(weights: DecoderWeights, sigma_s, c, encoder_states, n_vectors: int, seed,
               feedback: bool = False) -> float:
    """Held-out normalized fusion MSE on fresh synthetic samples."""
    x, src = sample_training_inputs(sigma_s, encoder_states, n_vectors, seed, feedback)
    c = np.asarray(c, dtype=float)
    norm = float(c @ np.asarray(sigma_s) @ c)
    return loss_and_grad(weights, x, c @ src, c, norm if norm > 0 else 1.0)[0]


def estimate_sigma_v(subvectors, rates, seed=None) -> np.ndarray:
    """Per-AP quantization error power ``(1/m)||s_i - deq(u_i)||^2`` with no compression."""
    s = np.asarray(subvectors, dtype=float)
    rates = np.broadcast_to(np.asarray(rates, dtype=float), (s.shape[0],))
    out = np.empty(s.shape[0])
    for i, (row, r) in enumerate(zip(s, rates)):
        bits = bits_per_element(len(row), r, len(row))
        err = row - quantize_vector(row, bits).dequantize()
        out[i] = err @ err / len(row)
    return out
