"""Recurrent autoencoder: GRU encoder, L2-normalized embedding, GRU decoder.

Parameters live in a flat ``dict[str, ndarray]``; the forward pass keeps the
intermediate arrays it needs and :func:`backward` turns upstream gradients on
the embeddings and reconstructions into gradients for every parameter.

The decoder is conditioned on the embedding twice: a linear projection sets
its initial state in every layer, and the embedding is fed as the input at
every step. There is no teacher forcing.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .features import SegmentFeatures
from .gru import GruCache, gru_backward, gru_forward
from .rng import INIT, make_rng

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 40
    hidden_units: int = 400
    num_layers: int = 3
    embedding_dim: int = 120
    bidirectional: bool = True
    reverse_output: bool = False  # decoder emits frames last-to-first
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("feature_dim", "hidden_units", "num_layers", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fw", "bw") if self.bidirectional else ("fw",)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F, D, L = cfg.hidden_units, cfg.feature_dim, cfg.embedding_dim, cfg.num_layers
    nd = len(cfg.directions)
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(L):
        width = F if layer == 0 else H * nd
        for d in cfg.directions:
            p = f"enc.{layer}.{d}"
            shapes.update({f"{p}.w_ih": (3 * H, width), f"{p}.w_hh": (3 * H, H), f"{p}.b_ih": (3 * H,), f"{p}.b_hh": (3 * H,)})
    shapes["emb.w"] = (D, H * nd)
    shapes["emb.b"] = (D,)
    shapes["dec.init.w"] = (L * H, D)
    shapes["dec.init.b"] = (L * H,)
    for layer in range(L):
        width = D if layer == 0 else H
        p = f"dec.{layer}"
        shapes.update({f"{p}.w_ih": (3 * H, width), f"{p}.w_hh": (3 * H, H), f"{p}.b_ih": (3 * H,), f"{p}.b_hh": (3 * H,)})
    shapes["out.w"] = (F, H)
    shapes["out.b"] = (F,)
    return shapes


@dataclass
class RaeModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def copy(self) -> RaeModel:
        return RaeModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(cfg: ModelConfig, seed: int = 0) -> RaeModel:
    """Uniform init in [-1/sqrt(n), 1/sqrt(n)]: n is the hidden width for GRU
    tensors, and the input width for the linear projections."""
    rng = make_rng(seed, INIT)
    shapes = parameter_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name.startswith(("enc.", "dec.")) and not name.startswith("dec.init"):
            fan = cfg.hidden_units
        else:
            fan = shapes[name.rsplit(".", 1)[0] + ".w"][1]
        bound = 1.0 / np.sqrt(fan)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(cfg.dtype)
    return RaeModel(cfg, params)


# --- batching --------------------------------------------------------------


def _frames(seg) -> np.ndarray:
    return seg.frames if isinstance(seg, SegmentFeatures) else np.asarray(seg)


def pad_batch(seqs: Sequence[np.ndarray], feature_dim: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad (T_i, F) arrays into (T_max, B, F) plus a (T_max, B) float mask and lengths."""
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    if len(seqs) == 0:
        raise DataError("empty batch")
    for s in seqs:
        if s.ndim != 2 or s.shape[1] != feature_dim:
            raise DataError(f"expected (T, {feature_dim}) frames, got {s.shape}")
        if s.shape[0] < 1:
            raise DataError("segments need at least one frame")
    t_max = int(lengths.max())
    x = np.zeros((t_max, len(seqs), feature_dim), dtype=dtype)
    for b, s in enumerate(seqs):
        x[: s.shape[0], b] = s
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite input features")
    mask = (np.arange(t_max)[:, None] < lengths[None, :]).astype(dtype)
    return x, mask, lengths


# --- encoder ---------------------------------------------------------------


@dataclass
class EncoderCache:
    layers: list[dict[str, GruCache]]
    finals: np.ndarray  # (B, H * directions)
    v: np.ndarray  # pre-normalization embedding
    norm: np.ndarray  # (B, 1)
    z: np.ndarray


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), NORM_EPS)
    return v / norm, norm


def l2_normalize_backward(dz: np.ndarray, z: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # Jacobian (I - z z^T) / |v|; below the epsilon floor the map is linear
    proj = np.where(norm > NORM_EPS, np.sum(dz * z, axis=-1, keepdims=True), 0.0)
    return (dz - z * proj) / norm


def encode_batch(model: RaeModel, seqs: Sequence) -> tuple[np.ndarray, EncoderCache]:
    cfg, p = model.config, model.params
    x, mask, _ = pad_batch([_frames(s) for s in seqs], cfg.feature_dim, model.dtype)
    B, H = x.shape[1], cfg.hidden_units
    h0 = np.zeros((B, H), dtype=model.dtype)
    inp = x
    layers = []
    for layer in range(cfg.num_layers):
        caches, outs = {}, []
        for d in cfg.directions:
            k = f"enc.{layer}.{d}"
            hs, caches[d] = gru_forward(
                inp, mask, p[f"{k}.w_ih"], p[f"{k}.w_hh"], p[f"{k}.b_ih"], p[f"{k}.b_hh"], h0, reverse=d == "bw"
            )
            outs.append(hs)
        layers.append(caches)
        inp = np.concatenate(outs, axis=2) if len(outs) > 1 else outs[0]
    # forward direction ends at the last step, the reverse direction at step 0
    finals = [inp[-1, :, :H]] + ([inp[0, :, H:]] if cfg.bidirectional else [])
    finals = np.concatenate(finals, axis=1)
    v = finals @ p["emb.w"].T + p["emb.b"]
    z, norm = l2_normalize(v)
    return z, EncoderCache(layers, finals, v, norm, z)


def encode_backward(model: RaeModel, dz: np.ndarray, cache: EncoderCache, grads: dict[str, np.ndarray]) -> None:
    cfg, p = model.config, model.params
    H = cfg.hidden_units
    dv = l2_normalize_backward(dz, cache.z, cache.norm)
    grads["emb.w"] += dv.T @ cache.finals
    grads["emb.b"] += dv.sum(axis=0)
    dfinals = dv @ p["emb.w"]
    top = cache.layers[-1]["fw"]
    T, B = top.mask.shape
    nd = len(cfg.directions)
    dout = np.zeros((T, B, H * nd), dtype=dz.dtype)
    dout[-1, :, :H] = dfinals[:, :H]
    if cfg.bidirectional:
        dout[0, :, H:] = dfinals[:, H:]
    for layer in range(cfg.num_layers - 1, -1, -1):
        dinp = None
        for j, d in enumerate(cfg.directions):
            k = f"enc.{layer}.{d}"
            dx, dwi, dwh, dbi, dbh, _ = gru_backward(
                dout[:, :, j * H : (j + 1) * H], cache.layers[layer][d], p[f"{k}.w_ih"], p[f"{k}.w_hh"]
            )
            grads[f"{k}.w_ih"] += dwi
            grads[f"{k}.w_hh"] += dwh
            grads[f"{k}.b_ih"] += dbi
            grads[f"{k}.b_hh"] += dbh
            dinp = dx if dinp is None else dinp + dx
        dout = dinp


# --- decoder ---------------------------------------------------------------


@dataclass
class DecoderCache:
    z: np.ndarray
    layers: list[GruCache]
    top: np.ndarray  # (T, B, H) top-layer states


def decode_batch(model: RaeModel, z: np.ndarray, steps: int) -> tuple[np.ndarray, DecoderCache]:
    """Run the decoder ``steps`` frames from embeddings ``z`` (B, D); output (steps, B, F) in generation order."""
    if steps < 1:
        raise DataError("decode length must be >= 1")
    cfg, p = model.config, model.params
    H = cfg.hidden_units
    z = np.asarray(z, dtype=model.dtype)
    B = z.shape[0]
    init = z @ p["dec.init.w"].T + p["dec.init.b"]
    mask = np.ones((steps, B), dtype=model.dtype)
    inp = np.broadcast_to(z, (steps, B, z.shape[1]))
    caches = []
    for layer in range(cfg.num_layers):
        k = f"dec.{layer}"
        inp, c = gru_forward(
            inp, mask, p[f"{k}.w_ih"], p[f"{k}.w_hh"], p[f"{k}.b_ih"], p[f"{k}.b_hh"], init[:, layer * H : (layer + 1) * H]
        )
        caches.append(c)
    y = inp @ p["out.w"].T + p["out.b"]
    return y, DecoderCache(z, caches, inp)


def decode_backward(model: RaeModel, dy: np.ndarray, cache: DecoderCache, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate decoder gradients into ``grads``; returns dL/dz."""
    cfg, p = model.config, model.params
    H = cfg.hidden_units
    T, B, _ = dy.shape
    grads["out.w"] += dy.reshape(T * B, -1).T @ cache.top.reshape(T * B, -1)
    grads["out.b"] += dy.sum(axis=(0, 1))
    dh = dy @ p["out.w"]
    dinit = np.empty((B, cfg.num_layers * H), dtype=dy.dtype)
    for layer in range(cfg.num_layers - 1, -1, -1):
        k = f"dec.{layer}"
        dh, dwi, dwh, dbi, dbh, dh0 = gru_backward(dh, cache.layers[layer], p[f"{k}.w_ih"], p[f"{k}.w_hh"])
        grads[f"{k}.w_ih"] += dwi
        grads[f"{k}.w_hh"] += dwh
        grads[f"{k}.b_ih"] += dbi
        grads[f"{k}.b_hh"] += dbh
        dinit[:, layer * H : (layer + 1) * H] = dh0
    grads["dec.init.w"] += dinit.T @ cache.z
    grads["dec.init.b"] += dinit.sum(axis=0)
    return dh.sum(axis=0) + dinit @ p["dec.init.w"]


# --- single-segment API ----------------------------------------------------


def encode(model: RaeModel, segment) -> np.ndarray:
    """Unit-norm embedding of one segment (SegmentFeatures or a (T, F) array)."""
    z, _ = encode_batch(model, [segment])
    return z[0]


def embed_all(model: RaeModel, segments: Sequence, batch_size: int = 256) -> np.ndarray:
    out = [encode_batch(model, segments[i : i + batch_size])[0] for i in range(0, len(segments), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.embedding_dim))


def decode(model: RaeModel, embedding: np.ndarray, length: int) -> np.ndarray:
    """Reconstruct ``length`` frames (length, F) in forward time order."""
    y, _ = decode_batch(model, np.asarray(embedding)[None, :], length)
    y = y[:, 0]
    return y[::-1].copy() if model.config.reverse_output else y


def mse_loss(target: np.ndarray, reconstruction: np.ndarray) -> float:
    """Sum over frames of the squared Euclidean frame error."""
    target, reconstruction = np.asarray(target), np.asarray(reconstruction)
    if target.shape != reconstruction.shape:
        raise DataError(f"shape mismatch {target.shape} vs {reconstruction.shape}")
    return float(np.sum((target - reconstruction) ** 2))


def cor_mse_loss(model: RaeModel, source, target) -> float:
    """Reconstruction error of ``target`` decoded from the embedding of ``source``."""
    src, tgt = _frames(source), _frames(target)
    if src.shape[1] != tgt.shape[1]:
        raise DataError("source and target feature dimensions differ")
    return mse_loss(tgt, decode(model, encode(model, src), tgt.shape[0]))


# --- batched forward / backward --------------------------------------------


@dataclass
class Forward:
    """Result of one batched encode + decode pass, kept for :func:`backward`."""

    z: np.ndarray  # (B, D)
    recon: np.ndarray  # (T_out, B, F), generation order
    lengths: np.ndarray  # decode length per item
    enc: EncoderCache
    dec: DecoderCache


def forward(model: RaeModel, inputs: Sequence, output_lengths: Sequence[int]) -> Forward:
    z, enc = encode_batch(model, inputs)
    lengths = np.asarray(output_lengths, dtype=np.int64)
    recon, dec = decode_batch(model, z, int(lengths.max()))
    return Forward(z, recon, lengths, enc, dec)


def zero_grads(model: RaeModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def backward(model: RaeModel, fwd: Forward, dz=None, drecon=None, grads=None) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/dz (B, D) and dL/d recon (T_out, B, F); either may be None."""
    grads = zero_grads(model) if grads is None else grads
    total_dz = np.zeros_like(fwd.z) if dz is None else np.array(dz, dtype=fwd.z.dtype)
    if drecon is not None:
        total_dz += decode_backward(model, drecon, fwd.dec, grads)
    encode_backward(model, total_dz, fwd.enc, grads)
    return grads


def reconstruction_losses(model: RaeModel, fwd: Forward, targets: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-item summed squared error against ``targets`` and its gradient w.r.t. ``fwd.recon``.

    Steps past an item's own target length are masked out.
    """
    tgts = [_frames(t) for t in targets]
    if [t.shape[0] for t in tgts] != list(fwd.lengths):
        raise DataError("target lengths do not match the decoded lengths")
    if model.config.reverse_output:
        tgts = [t[::-1] for t in tgts]
    padded, mask, _ = pad_batch(tgts, model.config.feature_dim, fwd.recon.dtype)
    diff = (fwd.recon - padded) * mask[:, :, None]
    per_item = np.sum(diff * diff, axis=(0, 2))
    return per_item, 2.0 * diff


def loss_and_grad(model: RaeModel, inputs: Sequence, targets: Sequence | None = None):
    """Mean over the batch of the reconstruction loss, plus gradients.

    With ``targets`` None each input reconstructs itself; otherwise item i is
    decoded for ``len(targets[i])`` steps and scored against ``targets[i]``.
    """
    targets = inputs if targets is None else targets
    fwd = forward(model, inputs, [_frames(t).shape[0] for t in targets])
    per_item, drecon = reconstruction_losses(model, fwd, targets)
    n = len(inputs)
    return float(per_item.mean()), backward(model, fwd, drecon=drecon / n)
