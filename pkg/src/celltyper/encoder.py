"""Shared cell encoder: a small MLP from expression space to embeddings.

The encoder is pretrained once with masked-value self-supervision and then
frozen; every downstream capability (tissue plugins, retrieval, detection)
reads its embeddings. Hidden layers are the adaptation points for plugins,
the final projection to embedding space is never adapted.

Forward passes are pure functions of (params, input) and preserve the
parameter dtype, so the same code runs in float32 for real models and in
float64 for finite-difference gradient checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import adapters
from .data import GeneExpressionMatrix
from .errors import FrozenParamsError, ShapeError, TrainingDivergedError
from .util import array_digest, rng_for

MAGIC = b"CTENC\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    embedding_dim: int = 64
    activation: str = "relu"

    def validate(self) -> None:
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise ShapeError("input_dim and embedding_dim must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ShapeError("hidden_dims must be nonempty positive ints")
        if self.activation != "relu":
            raise ShapeError(f"unsupported activation '{self.activation}'")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out_dim, in_dim) for every layer including the final projection."""
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def adapted_layer_shapes(self) -> list[tuple[int, int]]:
        """Shapes of the hidden layers only, the plugin attachment points."""
        return self.layer_dims()[:-1]


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: list[np.ndarray]  # each (out_dim, in_dim)
    biases: list[np.ndarray]
    frozen: bool = False
    seed: int = 0

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.frozen, self.seed)

    def digest(self) -> str:
        return array_digest(*self.weights, *self.biases)

    def version_id(self) -> str:
        return self.digest()[:12]

    def trainable_params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def init_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    config.validate()
    rng = rng_for(seed, "encoder-init")
    weights, biases = [], []
    for out_dim, in_dim in config.layer_dims():
        bound = 1.0 / np.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype))
        biases.append(np.zeros(out_dim, dtype=dtype))
    return EncoderParams(config, weights, biases, frozen=False, seed=seed)


def _as_batch(params: EncoderParams, x) -> tuple[np.ndarray, bool]:
    if sp.issparse(x):
        x = np.asarray(x.todense())
    x = np.asarray(x)
    single = x.ndim == 1
    x2 = np.atleast_2d(x).astype(params.dtype, copy=False)
    if x2.shape[1] != params.config.input_dim:
        raise ShapeError(
            f"encoder expects inputs of dim {params.config.input_dim}, got {x2.shape[1]}"
        )
    if not np.all(np.isfinite(x2)):
        raise ShapeError("non-finite value in encoder input")
    return x2, single


def forward_cache(params: EncoderParams, x: np.ndarray,
                  plugin: adapters.MoeLoraPlugin | None = None):
    """Embedding plus per-layer caches for backprop.

    Cache layout: one (layer_cache, preact) pair per hidden layer, where
    layer_cache is the layer input for plain layers or the adapter cache for
    adapted ones, plus the final projection input.
    """
    if plugin is not None:
        adapters.check_compatible(plugin, params.config.adapted_layer_shapes(),
                                  params.config.embedding_dim)
    a = x
    layer_caches = []
    n_hidden = len(params.config.hidden_dims)
    for li in range(n_hidden):
        w, b = params.weights[li], params.biases[li]
        if plugin is not None:
            z, lcache = adapters.adapted_forward_cache(w, b, plugin.layers[li], a)
        else:
            z, lcache = a @ w.T + b, a
        layer_caches.append((lcache, z))
        a = np.maximum(z, 0)
    emb = a @ params.weights[n_hidden].T + params.biases[n_hidden]
    return emb, (layer_caches, a)


def forward(params: EncoderParams, x, plugin: adapters.MoeLoraPlugin | None = None) -> np.ndarray:
    """Pure encode; batch rows map to input rows."""
    x2, single = _as_batch(params, x)
    emb, _ = forward_cache(params, x2, plugin)
    return emb[0] if single else emb


def backward_base(params: EncoderParams, cache, d_emb: np.ndarray):
    """Gradients of all base layers for a plain forward pass.

    Returns (d_input, grads) with grads keyed like trainable_params().
    """
    layer_caches, final_in = cache
    n_hidden = len(params.config.hidden_dims)
    grads: dict[str, np.ndarray] = {}
    grads[f"w{n_hidden}"] = d_emb.T @ final_in
    grads[f"b{n_hidden}"] = d_emb.sum(axis=0)
    d_a = d_emb @ params.weights[n_hidden]
    for li in range(n_hidden - 1, -1, -1):
        x_in, z = layer_caches[li]
        dz = d_a * (z > 0)
        grads[f"w{li}"] = dz.T @ x_in
        grads[f"b{li}"] = dz.sum(axis=0)
        d_a = dz @ params.weights[li]
    return d_a, grads


def backward_adapted(params: EncoderParams, plugin: adapters.MoeLoraPlugin,
                     cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Plugin gradients for an adapted forward pass; base stays frozen."""
    layer_caches, _ = cache
    n_hidden = len(params.config.hidden_dims)
    grads: dict[str, np.ndarray] = {}
    d_a = d_emb @ params.weights[n_hidden]
    for li in range(n_hidden - 1, -1, -1):
        lcache, z = layer_caches[li]
        dz = d_a * (z > 0)
        d_a, lg = adapters.adapted_backward(params.weights[li], plugin.layers[li], lcache, dz)
        for ei in range(len(plugin.layers[li].experts)):
            grads[f"layer{li}.expert{ei}.A"] = lg.dA[ei]
            grads[f"layer{li}.expert{ei}.B"] = lg.dB[ei]
        if lg.dgate is not None:
            grads[f"layer{li}.gate"] = lg.dgate
    return grads


@dataclass(frozen=True)
class SslConfig:
    mask_fraction: float = 0.15
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.mask_fraction < 1.0):
            raise ShapeError(f"mask_fraction must be in [0,1), got {self.mask_fraction}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ShapeError("epochs must be >= 0, batch_size >= 1, lr > 0")


def pretrain_ssl(params: EncoderParams, data, cfg: SslConfig):
    """Masked-value reconstruction pretraining.

    A fraction of entries per cell is zeroed, a temporary linear decoder
    reconstructs the original row, and encoder plus decoder minimize MSE
    under Adam. Returns (trained params, per-epoch loss curve). The decoder
    is discarded. Zero epochs returns a bit-identical copy.
    """
    from .training import OptimizerState, adam_step

    cfg.validate()
    if params.frozen:
        raise FrozenParamsError("cannot pretrain a frozen encoder")
    if isinstance(data, GeneExpressionMatrix):
        data = data.to_dense()
    x_all, _ = _as_batch(params, np.atleast_2d(data))
    out = params.copy()
    if cfg.epochs == 0:
        return out, []

    g = params.config.input_dim
    d = params.config.embedding_dim
    rng = rng_for(cfg.seed, "ssl")
    bound = 1.0 / np.sqrt(d)
    dec_w = rng.uniform(-bound, bound, size=(g, d)).astype(params.dtype)
    dec_b = np.zeros(g, dtype=params.dtype)

    trainable = dict(out.trainable_params())
    trainable["dec_w"] = dec_w
    trainable["dec_b"] = dec_b
    state = OptimizerState.for_params(trainable)

    losses = []
    n = x_all.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            batch = x_all[order[lo:lo + cfg.batch_size]]
            mask = rng.random(batch.shape) < cfg.mask_fraction
            masked = np.where(mask, 0.0, batch).astype(params.dtype)
            emb, cache = forward_cache(out, masked)
            recon = emb @ dec_w.T + dec_b
            diff = recon - batch
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite reconstruction loss")
            d_recon = (2.0 / diff.size) * diff.astype(params.dtype)
            grads = {
                "dec_w": d_recon.T @ emb,
                "dec_b": d_recon.sum(axis=0),
            }
            d_emb = d_recon @ dec_w
            _, base_grads = backward_base(out, cache, d_emb)
            grads.update(base_grads)
            adam_step(state, trainable, grads, cfg.lr)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return out, losses


@dataclass(frozen=True)
class Embedding:
    """One encoded cell with its source tag and provenance."""

    vector: np.ndarray
    source: str  # "standard" or "lora-enhanced"
    provenance: dict = field(default_factory=dict)


def encode_matrix(params: EncoderParams, matrix, plugin=None) -> np.ndarray:
    """Batch encode a matrix (or raw array) into embedding rows."""
    x = matrix.to_dense() if isinstance(matrix, GeneExpressionMatrix) else matrix
    x2, single = _as_batch(params, x)
    emb, _ = forward_cache(params, x2, plugin)
    return emb[0] if single else emb


def encode_dataset(params: EncoderParams, plugin, matrix) -> list[Embedding]:
    """Per-cell embeddings tagged standard or lora-enhanced."""
    emb = encode_matrix(params, matrix, plugin)
    source = "standard" if plugin is None else "lora-enhanced"
    provenance = {"encoder": params.version_id()}
    if plugin is not None:
        provenance["plugin"] = f"{plugin.plugin_id}:v{plugin.version}"
    return [Embedding(emb[i], source, provenance) for i in range(emb.shape[0])]


def save_encoder(params: EncoderParams, path) -> None:
    """Versioned binary weights plus a JSON manifest sidecar."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params.weights)))
        for w in params.weights:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_dim": params.config.input_dim,
        "hidden_dims": list(params.config.hidden_dims),
        "embedding_dim": params.config.embedding_dim,
        "activation": params.config.activation,
        "seed": params.seed,
        "frozen": params.frozen,
        "digest": params.digest(),
    }
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_encoder(path) -> EncoderParams:
    with open(str(path) + ".manifest.json") as fh:
        manifest = json.load(fh)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ShapeError(f"{path} is not an encoder file (bad magic)")
    fmt, n_layers = struct.unpack_from("<II", raw, len(MAGIC))
    if fmt != FORMAT_VERSION:
        raise ShapeError(f"unsupported encoder format version {fmt}")
    off = len(MAGIC) + 8
    shapes = []
    for _ in range(n_layers):
        out_dim, in_dim = struct.unpack_from("<II", raw, off)
        shapes.append((out_dim, in_dim))
        off += 8
    weights, biases = [], []
    for out_dim, in_dim in shapes:
        w = np.frombuffer(raw, dtype="<f4", count=out_dim * in_dim, offset=off)
        off += 4 * out_dim * in_dim
        b = np.frombuffer(raw, dtype="<f4", count=out_dim, offset=off)
        off += 4 * out_dim
        weights.append(w.reshape(out_dim, in_dim).astype(np.float32))
        biases.append(b.astype(np.float32))
    config = EncoderConfig(
        manifest["input_dim"], tuple(manifest["hidden_dims"]),
        manifest["embedding_dim"], manifest["activation"],
    )
    params = EncoderParams(config, weights, biases, manifest["frozen"], manifest["seed"])
    if params.digest() != manifest["digest"]:
        raise ShapeError(f"{path} does not match its manifest digest")
    return params
