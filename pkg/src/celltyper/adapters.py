"""Low-rank adapter plugins with mixture-of-experts routing.

A frozen base layer W0 is augmented as W0 + sum_i g(x)_i * B_i A_i where
each expert holds two thin factors, A (rank x in_dim) and B (out_dim x
rank), and g is a dense softmax gate computed from the layer input. B is
zero at init so a fresh plugin is an exact identity on top of the base
model. The factored update is never materialized as a full delta matrix;
both forward and backward work through the thin factors.

A plugin bundles one adapted layer per encoder hidden layer, the gate
networks, and a reserved-capacity classification head whose rows are bound
to labels in activation order. Registry versions strictly increase per
retrain and older versions stay retrievable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, RegistryError, ShapeError
from .util import rng_for, softmax

MAGIC = b"CTPLG\x00"
FORMAT_VERSION = 1

DEFAULT_EXPERTS = 5
DEFAULT_RANK = 8
DEFAULT_ALPHA = 16.0
HEAD_CAPACITY = 200


@dataclass
class LoraExpert:
    """One low-rank factor pair; the update is scaling * B @ A."""

    A: np.ndarray  # (rank, in_dim)
    B: np.ndarray  # (out_dim, rank)
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoraExpert":
        return LoraExpert(self.A.copy(), self.B.copy(), self.alpha)


@dataclass
class GatingNetwork:
    """Dense per-sample router, logits = x @ weight."""

    weight: np.ndarray  # (in_dim, n_experts)

    def copy(self) -> "GatingNetwork":
        return GatingNetwork(self.weight.copy())


@dataclass
class AdaptedLayer:
    experts: list[LoraExpert]
    gate: GatingNetwork

    def copy(self) -> "AdaptedLayer":
        return AdaptedLayer([e.copy() for e in self.experts], self.gate.copy())


@dataclass
class ClassificationHead:
    """Reserved-capacity linear head; row i is bound to labels[i].

    active mirrors the bound rows. Masked rows get probability exactly zero
    and can never win the argmax.
    """

    weight: np.ndarray  # (capacity, embedding_dim)
    bias: np.ndarray  # (capacity,)
    active: np.ndarray  # (capacity,) bool
    labels: list[int] = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.weight.shape[1]

    def row_of(self, label: int) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ShapeError(f"label {label} is not bound to any head row") from None

    def copy(self) -> "ClassificationHead":
        return ClassificationHead(self.weight.copy(), self.bias.copy(),
                                  self.active.copy(), list(self.labels))


def init_expert(out_dim: int, in_dim: int, rank: int, alpha: float,
                rng: np.random.Generator, dtype=np.float32) -> LoraExpert:
    if not (1 <= rank <= min(out_dim, in_dim)):
        raise ShapeError(f"rank {rank} not in 1..min({out_dim},{in_dim})")
    bound = 1.0 / np.sqrt(in_dim)
    A = rng.uniform(-bound, bound, size=(rank, in_dim)).astype(dtype)
    B = np.zeros((out_dim, rank), dtype=dtype)
    return LoraExpert(A, B, float(alpha))


def init_head(capacity: int, embedding_dim: int, rng: np.random.Generator,
              dtype=np.float32) -> ClassificationHead:
    bound = 1.0 / np.sqrt(embedding_dim)
    weight = rng.uniform(-bound, bound, size=(capacity, embedding_dim)).astype(dtype)
    bias = np.zeros(capacity, dtype=dtype)
    return ClassificationHead(weight, bias, np.zeros(capacity, dtype=bool))


@dataclass
class MoeLoraPlugin:
    plugin_id: str
    kind: str  # "tissue-specific" or "tissue-assignment"
    target_tissue: int | None
    layers: list[AdaptedLayer]
    head: ClassificationHead
    version: int = 1
    provenance: dict = field(default_factory=dict)

    @property
    def n_experts(self) -> int:
        return len(self.layers[0].experts)

    @property
    def rank(self) -> int:
        return self.layers[0].experts[0].rank

    @property
    def alpha(self) -> float:
        return self.layers[0].experts[0].alpha

    def copy(self) -> "MoeLoraPlugin":
        return MoeLoraPlugin(
            self.plugin_id, self.kind, self.target_tissue,
            [l.copy() for l in self.layers], self.head.copy(),
            self.version, dict(self.provenance),
        )

    def trainable_params(self) -> dict[str, np.ndarray]:
        """Name -> array views, insertion order stable for the optimizer."""
        params: dict[str, np.ndarray] = {}
        for li, layer in enumerate(self.layers):
            for ei, ex in enumerate(layer.experts):
                params[f"layer{li}.expert{ei}.A"] = ex.A
                params[f"layer{li}.expert{ei}.B"] = ex.B
            params[f"layer{li}.gate"] = layer.gate.weight
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params


def init_plugin(layer_shapes: list[tuple[int, int]], embedding_dim: int, kind: str,
                target_tissue: int | None = None, n_experts: int = DEFAULT_EXPERTS,
                rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA,
                head_capacity: int = HEAD_CAPACITY, seed: int = 0,
                plugin_id: str | None = None, dtype=np.float32) -> MoeLoraPlugin:
    """Fresh plugin over the given (out_dim, in_dim) hidden-layer shapes.

    Gate weights start at zero so routing is uniform until trained; with
    B = 0 the whole plugin is an exact identity at init.
    """
    if kind not in ("tissue-specific", "tissue-assignment"):
        raise ShapeError(f"unknown plugin kind '{kind}'")
    if n_experts < 1:
        raise ShapeError("need at least one expert")
    rng = rng_for(seed, f"plugin-init:{kind}:{target_tissue}")
    layers = []
    for out_dim, in_dim in layer_shapes:
        experts = [init_expert(out_dim, in_dim, rank, alpha, rng, dtype)
                   for _ in range(n_experts)]
        gate = GatingNetwork(np.zeros((in_dim, n_experts), dtype=dtype))
        layers.append(AdaptedLayer(experts, gate))
    head = init_head(head_capacity, embedding_dim, rng, dtype)
    if plugin_id is None:
        plugin_id = "tissue-assignment" if kind == "tissue-assignment" else f"tissue-{target_tissue}"
    return MoeLoraPlugin(plugin_id, kind, target_tissue, layers, head)


def gate(gn: GatingNetwork, x: np.ndarray) -> np.ndarray:
    """Routing weights for each sample; rows sum to one."""
    x2 = np.atleast_2d(x)
    if x2.shape[1] != gn.weight.shape[0]:
        raise ShapeError(f"gate expects inputs of dim {gn.weight.shape[0]}, got {x2.shape[1]}")
    g = softmax(x2 @ gn.weight, axis=1)
    return g[0] if x.ndim == 1 else g


def lora_forward(w0: np.ndarray, b0: np.ndarray, expert: LoraExpert, x: np.ndarray) -> np.ndarray:
    """Single-expert adapted layer, base + scaling * (x A^T) B^T."""
    x2 = np.atleast_2d(x)
    out = x2 @ w0.T + b0 + expert.scaling * ((x2 @ expert.A.T) @ expert.B.T)
    return out[0] if x.ndim == 1 else out


def adapted_forward(w0: np.ndarray, b0: np.ndarray, layer: AdaptedLayer, x: np.ndarray,
                    gate_override: np.ndarray | None = None) -> np.ndarray:
    out, _ = adapted_forward_cache(w0, b0, layer, np.atleast_2d(x), gate_override)
    return out[0] if x.ndim == 1 else out


def adapted_forward_cache(w0: np.ndarray, b0: np.ndarray, layer: AdaptedLayer, x: np.ndarray,
                          gate_override: np.ndarray | None = None):
    """Batch adapted forward returning the cache needed for backward.

    gate_override replaces the computed routing weights (used for routing
    diagnostics); gradients then skip the gate.
    """
    if x.ndim != 2:
        raise ShapeError("adapted_forward_cache expects a batch (2-d input)")
    if x.shape[1] != w0.shape[1]:
        raise ShapeError(f"layer expects inputs of dim {w0.shape[1]}, got {x.shape[1]}")
    if gate_override is None:
        g = gate(layer.gate, x)
        overridden = False
    else:
        g = np.broadcast_to(np.asarray(gate_override, dtype=x.dtype),
                            (x.shape[0], len(layer.experts))).copy()
        overridden = True
    out = x @ w0.T + b0
    us, vs = [], []
    for i, ex in enumerate(layer.experts):
        u = x @ ex.A.T
        v = u @ ex.B.T
        us.append(u)
        vs.append(v)
        out = out + ex.scaling * g[:, i:i + 1] * v
    return out, (x, g, us, vs, overridden)


@dataclass
class LayerGrads:
    dA: list[np.ndarray]
    dB: list[np.ndarray]
    dgate: np.ndarray | None


def adapted_backward(w0: np.ndarray, layer: AdaptedLayer, cache, d_out: np.ndarray):
    """Gradients of the adapted layer. Returns (d_input, LayerGrads).

    The base W0 and b0 are frozen by contract so their gradients are not
    produced here.
    """
    x, g, us, vs, overridden = cache
    dx = d_out @ w0
    dg = np.empty_like(g)
    d_as, d_bs = [], []
    for i, ex in enumerate(layer.experts):
        dv = ex.scaling * g[:, i:i + 1] * d_out
        d_bs.append(dv.T @ us[i])
        du = dv @ ex.B
        d_as.append(du.T @ x)
        dx = dx + du @ ex.A
        dg[:, i] = ex.scaling * np.sum(d_out * vs[i], axis=1)
    dgate = None
    if not overridden:
        dlogits = g * (dg - np.sum(dg * g, axis=1, keepdims=True))
        dgate = x.T @ dlogits
        dx = dx + dlogits @ layer.gate.weight.T
    return dx, LayerGrads(d_as, d_bs, dgate)


class ParamCount(tuple):
    """(base, adapter, gate) parameter counts; adapter includes the gate."""

    def __new__(cls, base: int, adapter: int, gate: int):
        return super().__new__(cls, (base, adapter, gate))

    base = property(lambda self: self[0])
    adapter = property(lambda self: self[1])
    gate = property(lambda self: self[2])


def param_count(out_dim: int, in_dim: int, rank: int, n_experts: int) -> ParamCount:
    """Trainable counts for one adapted layer vs full fine-tuning."""
    if min(out_dim, in_dim, rank, n_experts) < 1:
        raise ShapeError("dims, rank and expert count must be positive")
    base = out_dim * in_dim
    experts = n_experts * (out_dim * rank + rank * in_dim)
    gate_params = in_dim * n_experts
    return ParamCount(base, experts + gate_params, gate_params)


def masked_logits(head: ClassificationHead, logits: np.ndarray) -> np.ndarray:
    """Set inactive rows to -inf; errors when nothing is active."""
    if not head.active.any():
        raise CapacityError("classification head has no active classes")
    out = np.array(logits, dtype=np.float64, copy=True)
    out[..., ~head.active] = -np.inf
    return out


def head_logits(head: ClassificationHead, e: np.ndarray) -> np.ndarray:
    e2 = np.atleast_2d(e)
    if e2.shape[1] != head.embedding_dim:
        raise ShapeError(
            f"head expects embeddings of dim {head.embedding_dim}, got {e2.shape[1]}"
        )
    out = e2 @ head.weight.T + head.bias
    return out[0] if e.ndim == 1 else out


def predict(head: ClassificationHead, e: np.ndarray):
    """Argmax class for one embedding with the full active-class distribution.

    Returns (label, probs) where probs spans all head rows, inactive rows
    exactly zero, and label is the external class bound to the winning row.
    """
    labels, _, probs = predict_batch(head, np.atleast_2d(e))
    return int(labels[0]), probs[0]


def predict_batch(head: ClassificationHead, E: np.ndarray):
    """Vectorized predict. Returns (labels, top_probs, probs)."""
    logits = masked_logits(head, head_logits(head, np.atleast_2d(E)))
    probs = softmax(logits, axis=1)
    probs[:, ~head.active] = 0.0
    rows = np.argmax(probs, axis=1)
    labels = np.asarray([head.labels[r] if r < len(head.labels) else -1 for r in rows],
                        dtype=np.int64)
    top = probs[np.arange(len(rows)), rows]
    return labels, top, probs


def activate_class(head: ClassificationHead, label: int) -> int:
    """Bind a new label to the next free head row; returns the row index."""
    if label in head.labels:
        raise ShapeError(f"label {label} is already bound to row {head.labels.index(label)}")
    row = len(head.labels)
    if row >= head.capacity or head.active.all():
        raise CapacityError(
            f"classification head is full ({head.capacity} classes active)"
        )
    head.labels.append(int(label))
    head.active[row] = True
    return row


class PluginRegistry:
    """Versioned plugin storage, per tissue plus one assignment slot."""

    def __init__(self):
        self._tissue: dict[int, list[MoeLoraPlugin]] = {}
        self._assignment: list[MoeLoraPlugin] = []

    def register_plugin(self, plugin: MoeLoraPlugin) -> int:
        if plugin.kind == "tissue-assignment":
            history = self._assignment
        else:
            if plugin.target_tissue is None:
                raise RegistryError("tissue-specific plugin must name a target tissue")
            history = self._tissue.setdefault(plugin.target_tissue, [])
        if history and plugin.version <= history[-1].version:
            raise RegistryError(
                f"plugin version {plugin.version} does not increase on latest "
                f"{history[-1].version}"
            )
        history.append(plugin)
        return plugin.version

    def latest_for_tissue(self, tissue: int) -> MoeLoraPlugin:
        history = self._tissue.get(tissue)
        if not history:
            raise RegistryError(f"no plugin registered for tissue {tissue}")
        return history[-1]

    def get_for_tissue(self, tissue: int, version: int) -> MoeLoraPlugin:
        for p in self._tissue.get(tissue, []):
            if p.version == version:
                return p
        raise RegistryError(f"no version {version} plugin for tissue {tissue}")

    def latest_assignment(self) -> MoeLoraPlugin:
        if not self._assignment:
            raise RegistryError("no tissue-assignment plugin registered")
        return self._assignment[-1]

    def tissues(self) -> list[int]:
        return sorted(self._tissue)

    def versions_summary(self) -> dict:
        out = {str(t): h[-1].version for t, h in sorted(self._tissue.items())}
        if self._assignment:
            out["assignment"] = self._assignment[-1].version
        return out

    def copy(self) -> "PluginRegistry":
        other = PluginRegistry()
        other._tissue = {t: [p.copy() for p in h] for t, h in self._tissue.items()}
        other._assignment = [p.copy() for p in self._assignment]
        return other


def check_compatible(plugin: MoeLoraPlugin, layer_shapes: list[tuple[int, int]],
                     embedding_dim: int) -> None:
    """Reject plugins built for a different encoder geometry."""
    got = [(l.experts[0].B.shape[0], l.experts[0].A.shape[1]) for l in plugin.layers]
    if got != [tuple(s) for s in layer_shapes]:
        raise ShapeError(
            f"plugin '{plugin.plugin_id}' adapts layers {got}, encoder has {layer_shapes}"
        )
    if plugin.head.embedding_dim != embedding_dim:
        raise ShapeError(
            f"plugin '{plugin.plugin_id}' head expects dim {plugin.head.embedding_dim}, "
            f"encoder produces {embedding_dim}"
        )


def _write_array(fh, a: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_array(buf: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    a = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return a.reshape(shape).astype(np.float32), offset + 4 * count


def save_plugin(plugin: MoeLoraPlugin, path) -> None:
    """Binary plugin file: JSON header then 32-bit LE float blobs.

    Blob order is, per layer, each expert's A then B, then the gate weight;
    then head weight, head bias, and the active mask as a packed bit vector.
    """
    header = {
        "plugin_id": plugin.plugin_id,
        "kind": plugin.kind,
        "target_tissue": plugin.target_tissue,
        "version": plugin.version,
        "n_experts": plugin.n_experts,
        "rank": plugin.rank,
        "alpha": plugin.alpha,
        "layer_shapes": [[l.experts[0].B.shape[0], l.experts[0].A.shape[1]]
                         for l in plugin.layers],
        "head_capacity": plugin.head.capacity,
        "embedding_dim": plugin.head.embedding_dim,
        "labels": list(plugin.head.labels),
        "provenance": plugin.provenance,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for layer in plugin.layers:
            for ex in layer.experts:
                _write_array(fh, ex.A)
                _write_array(fh, ex.B)
            _write_array(fh, layer.gate.weight)
        _write_array(fh, plugin.head.weight)
        _write_array(fh, plugin.head.bias)
        packed = np.packbits(plugin.head.active.astype(np.uint8))
        fh.write(struct.pack("<I", len(packed)))
        fh.write(packed.tobytes())


def load_plugin(path) -> MoeLoraPlugin:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ShapeError(f"{path} is not a plugin file (bad magic)")
    fmt, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if fmt != FORMAT_VERSION:
        raise ShapeError(f"unsupported plugin format version {fmt}")
    off = len(MAGIC) + 8
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    buf = memoryview(raw)
    n, r, alpha = header["n_experts"], header["rank"], header["alpha"]
    layers = []
    for out_dim, in_dim in header["layer_shapes"]:
        experts = []
        for _ in range(n):
            A, off = _read_array(buf, off, (r, in_dim))
            B, off = _read_array(buf, off, (out_dim, r))
            experts.append(LoraExpert(A, B, alpha))
        gw, off = _read_array(buf, off, (in_dim, n))
        layers.append(AdaptedLayer(experts, GatingNetwork(gw)))
    cap, d = header["head_capacity"], header["embedding_dim"]
    weight, off = _read_array(buf, off, (cap, d))
    bias, off = _read_array(buf, off, (cap,))
    (plen,) = struct.unpack_from("<I", raw, off)
    off += 4
    packed = np.frombuffer(buf, dtype=np.uint8, count=plen, offset=off)
    active = np.unpackbits(packed, count=cap).astype(bool)
    head = ClassificationHead(weight, bias, active, [int(x) for x in header["labels"]])
    return MoeLoraPlugin(
        header["plugin_id"], header["kind"], header["target_tissue"],
        layers, head, header["version"], header["provenance"],
    )
