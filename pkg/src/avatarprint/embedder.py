"""Window embedding model.

Maps a fixed-length window of per-frame features to a compact L2-normalized
embedding: optional per-frame graph encoder over facial landmarks, multi-head
temporal attention pooling (learned query vectors over key/value projections
of the frames), a linear map back to the frame-feature dimension, and a final
projection head. Gradients are derived analytically; no autodiff framework is
involved, which keeps the arithmetic inspectable and lets tests compare every
coordinate against finite differences.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .feature_store import NormalizationParams


class EmbedderError(ValueError):
    pass


class NonFiniteError(EmbedderError):
    """A non-finite value appeared; carries the layer where it surfaced."""

    def __init__(self, layer: str, detail: str = ""):
        super().__init__(f"non-finite value in {layer}" + (f": {detail}" if detail else ""))
        self.layer = layer


# -- landmark adjacency ----------------------------------------------------


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected landmark topology; node indices are 0-based."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.num_nodes < 1:
            raise EmbedderError("graph needs at least one node")
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise EmbedderError(f"self-loop ({i},{i}); every node aggregates itself already")
            if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise EmbedderError(f"edge ({i},{j}) out of range for {self.num_nodes} nodes")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise EmbedderError(f"duplicate edge ({i},{j})")
            seen.add(key)

    @property
    def is_connected(self) -> bool:
        if self.num_nodes == 1:
            return True
        adj: dict[int, list[int]] = {i: [] for i in range(self.num_nodes)}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == self.num_nodes

    def norm_matrix(self) -> np.ndarray:
        """Row-normalized aggregation over each node plus its neighbors."""
        mat = np.eye(self.num_nodes)
        for i, j in self.edges:
            mat[i, j] = 1.0
            mat[j, i] = 1.0
        return mat / mat.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"num_nodes": self.num_nodes, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdjacencyGraph":
        return cls(int(d["num_nodes"]), tuple((int(i), int(j)) for i, j in d["edges"]))


def load_adjacency(path: str | Path, num_nodes: int | None = None) -> AdjacencyGraph:
    """Read an edge-list CSV ("i,j" per line, 0-based). Node count defaults
    to 1 + the largest index seen."""
    path = Path(path)
    edges: list[tuple[int, int]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise EmbedderError(f"{path}:{lineno}: expected 'i,j', got {row!r}")
            try:
                i, j = int(row[0]), int(row[1])
            except ValueError:
                raise EmbedderError(f"{path}:{lineno}: non-integer node index {row!r}") from None
            edges.append((i, j))
    if num_nodes is None:
        if not edges:
            raise EmbedderError(f"{path}: empty edge list and no node count given")
        num_nodes = 1 + max(max(e) for e in edges)
    return AdjacencyGraph(num_nodes, tuple(edges))


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class GraphEncoderConfig:
    layers: int = 1
    hidden_dim: int = 32
    adjacency: str | None = None  # path the graph was loaded from, informational

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise EmbedderError("graph encoder needs >= 1 layer")
        if self.hidden_dim < 1:
            raise EmbedderError("graph hidden_dim must be >= 1")


@dataclass(frozen=True)
class EmbedderConfig:
    """Shape of the model.

    input_dim is the per-frame dimension as stored; with a graph encoder it
    must equal 2 x num_nodes and the attention block then runs on the graph
    encoder's hidden_dim instead.
    """

    input_dim: int
    heads: int = 4
    attention_dim: int = 64
    projection_dim: int = 16
    window_len: int = 32
    graph: GraphEncoderConfig | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise EmbedderError("input_dim must be >= 1")
        if self.heads < 1 or self.attention_dim % self.heads != 0:
            raise EmbedderError(
                f"heads ({self.heads}) must divide attention_dim ({self.attention_dim})"
            )
        if self.window_len < 2 or self.window_len % 2 != 0:
            raise EmbedderError("window_len must be an even number >= 2")
        if self.projection_dim >= self.attn_input_dim:
            raise EmbedderError(
                f"projection_dim ({self.projection_dim}) must be smaller than the "
                f"attention input dimension ({self.attn_input_dim})"
            )

    @property
    def attn_input_dim(self) -> int:
        return self.graph.hidden_dim if self.graph is not None else self.input_dim

    @property
    def head_dim(self) -> int:
        return self.attention_dim // self.heads

    def to_dict(self) -> dict:
        d = {
            "input_dim": self.input_dim,
            "heads": self.heads,
            "attention_dim": self.attention_dim,
            "projection_dim": self.projection_dim,
            "window_len": self.window_len,
            "seed": self.seed,
            "graph": None,
        }
        if self.graph is not None:
            d["graph"] = {
                "layers": self.graph.layers,
                "hidden_dim": self.graph.hidden_dim,
                "adjacency": self.graph.adjacency,
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmbedderConfig":
        graph = None
        if d.get("graph"):
            g = d["graph"]
            graph = GraphEncoderConfig(int(g["layers"]), int(g["hidden_dim"]), g.get("adjacency"))
        return cls(
            input_dim=int(d["input_dim"]),
            heads=int(d["heads"]),
            attention_dim=int(d["attention_dim"]),
            projection_dim=int(d["projection_dim"]),
            window_len=int(d["window_len"]),
            graph=graph,
            seed=int(d.get("seed", 0)),
        )


# -- parameters --------------------------------------------------------------


def _param_shapes(config: EmbedderConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, a = config.heads, config.head_dim
    dim = config.attn_input_dim
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if config.graph is not None:
        in_dim = 2
        for layer in range(config.graph.layers):
            shapes.append((f"graph.l{layer}.weight", (in_dim, config.graph.hidden_dim)))
            shapes.append((f"graph.l{layer}.bias", (config.graph.hidden_dim,)))
            in_dim = config.graph.hidden_dim
    shapes += [
        ("attn.query", (h, a)),
        ("attn.key", (h, dim, a)),
        ("attn.value", (h, dim, a)),
        ("attn.out", (config.attention_dim, dim)),
        ("proj.weight", (dim, config.projection_dim)),
        ("proj.bias", (config.projection_dim,)),
    ]
    return shapes


class EmbedderParams:
    """All weights in one flat float64 vector with named views.

    Views share memory with ``flat``: optimizer updates on the flat vector
    are immediately visible through the named arrays and vice versa.
    """

    def __init__(
        self,
        config: EmbedderConfig,
        flat: np.ndarray,
        normalization: NormalizationParams | None = None,
        graph: AdjacencyGraph | None = None,
    ):
        if (config.graph is None) != (graph is None):
            raise EmbedderError("graph topology must be supplied iff the config has one")
        if graph is not None and config.input_dim != 2 * graph.num_nodes:
            raise EmbedderError(
                f"input_dim {config.input_dim} incompatible with {graph.num_nodes} "
                f"landmark nodes (expected {2 * graph.num_nodes})"
            )
        self.config = config
        self.shapes = _param_shapes(config)
        total = sum(int(np.prod(s)) for _, s in self.shapes)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise EmbedderError(f"flat parameter vector has {flat.shape}, expected ({total},)")
        if not np.all(np.isfinite(flat)):
            raise NonFiniteError("parameters")
        self.flat = flat
        self.normalization = normalization
        self.graph = graph
        self.views: dict[str, np.ndarray] = {}
        pos = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            self.views[name] = self.flat[pos : pos + size].reshape(shape)
            pos += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> "EmbedderParams":
        return EmbedderParams(self.config, self.flat.copy(), self.normalization, self.graph)


def init_params(
    config: EmbedderConfig,
    normalization: NormalizationParams | None = None,
    graph: AdjacencyGraph | None = None,
) -> EmbedderParams:
    """Seeded initialization: zero biases, scaled Gaussian weights, unit
    Gaussian query vectors. Deterministic for a given config.seed."""
    rng = np.random.default_rng(config.seed)
    chunks = []
    for name, shape in _param_shapes(config):
        if name.endswith(".bias"):
            chunks.append(np.zeros(shape))
        elif name == "attn.query":
            chunks.append(rng.standard_normal(shape))
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[1]
            chunks.append(rng.standard_normal(shape) / np.sqrt(fan_in))
    flat = np.concatenate([c.ravel() for c in chunks])
    return EmbedderParams(config, flat, normalization, graph)


# -- graph encoder -----------------------------------------------------------


@dataclass
class _GraphState:
    aggregated: list[np.ndarray] = field(default_factory=list)  # per layer: (N, L, in)
    activated: list[np.ndarray] = field(default_factory=list)  # per layer: (N, L, out)


def graph_encode(
    params: EmbedderParams, frames_landmarks: np.ndarray, state: _GraphState | None = None
) -> np.ndarray:
    """Encode frames of landmark points, (N, L, 2) -> (N, hidden_dim).

    Each layer averages every node with its neighbors (degree-normalized),
    applies a learned linear map and tanh; the frame descriptor is the mean
    over nodes after the last layer.
    """
    cfg = params.config.graph
    graph = params.graph
    if cfg is None or graph is None:
        raise EmbedderError("model has no graph encoder")
    frames_landmarks = np.asarray(frames_landmarks, dtype=np.float64)
    if frames_landmarks.ndim != 3 or frames_landmarks.shape[1:] != (graph.num_nodes, 2):
        raise EmbedderError(
            f"expected (N, {graph.num_nodes}, 2) landmark frames, "
            f"got {frames_landmarks.shape}"
        )
    norm = graph.norm_matrix()
    hidden = frames_landmarks
    for layer in range(cfg.layers):
        aggregated = np.einsum("kl,nlc->nkc", norm, hidden)
        pre = aggregated @ params[f"graph.l{layer}.weight"] + params[f"graph.l{layer}.bias"]
        hidden = np.tanh(pre)
        if state is not None:
            state.aggregated.append(aggregated)
            state.activated.append(hidden)
    return hidden.mean(axis=1)


def _graph_backward(
    params: EmbedderParams, state: _GraphState, d_desc: np.ndarray, grads: dict[str, np.ndarray]
) -> None:
    """Accumulate graph-encoder gradients given d(loss)/d(descriptor), (N, hidden)."""
    cfg = params.config.graph
    graph = params.graph
    assert cfg is not None and graph is not None
    norm = graph.norm_matrix()
    d_hidden = np.repeat(d_desc[:, None, :], graph.num_nodes, axis=1) / graph.num_nodes
    for layer in range(cfg.layers - 1, -1, -1):
        d_pre = d_hidden * (1.0 - state.activated[layer] ** 2)
        grads[f"graph.l{layer}.weight"] += np.einsum(
            "nki,nkj->ij", state.aggregated[layer], d_pre
        )
        grads[f"graph.l{layer}.bias"] += d_pre.sum(axis=(0, 1))
        d_agg = d_pre @ params[f"graph.l{layer}.weight"].T
        d_hidden = np.einsum("kl,nkc->nlc", norm, d_agg)


# -- forward / backward ------------------------------------------------------


@dataclass
class _ForwardState:
    attn_input: np.ndarray  # (B, F, dim)
    keys: np.ndarray  # (B, H, F, a)
    values: np.ndarray  # (B, H, F, a)
    weights: np.ndarray  # (B, H, F)
    pooled: np.ndarray  # (B, A) concatenated head outputs
    zhat: np.ndarray  # (B, dim)
    z_raw: np.ndarray  # (B, d) before normalization
    norms: np.ndarray  # (B,)
    z: np.ndarray  # (B, d)
    graph: _GraphState | None = None


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(layer)


def forward_batch(params: EmbedderParams, windows: np.ndarray) -> tuple[np.ndarray, _ForwardState]:
    """Embed a batch of windows (B, F, input_dim) -> L2-normalized (B, d).

    Returns the embeddings together with the cached intermediates needed by
    backward_batch.
    """
    cfg = params.config
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] != cfg.window_len or windows.shape[2] != cfg.input_dim:
        raise EmbedderError(
            f"expected windows of shape (B, {cfg.window_len}, {cfg.input_dim}), "
            f"got {windows.shape}"
        )
    _check_finite(windows, "input")
    batch, frames = windows.shape[0], windows.shape[1]

    graph_state: _GraphState | None = None
    if cfg.graph is not None:
        graph_state = _GraphState()
        landmarks = windows.reshape(batch * frames, cfg.input_dim // 2, 2)
        desc = graph_encode(params, landmarks, graph_state)
        attn_input = desc.reshape(batch, frames, cfg.graph.hidden_dim)
        _check_finite(attn_input, "graph_encoder")
    else:
        attn_input = windows

    scale = 1.0 / np.sqrt(cfg.head_dim)
    keys = np.einsum("bfd,hda->bhfa", attn_input, params["attn.key"])
    values = np.einsum("bfd,hda->bhfa", attn_input, params["attn.value"])
    logits = np.einsum("bhfa,ha->bhf", keys, params["attn.query"]) * scale
    _check_finite(logits, "attention_logits")
    logits = logits - logits.max(axis=2, keepdims=True)
    expw = np.exp(logits)
    weights = expw / expw.sum(axis=2, keepdims=True)

    pooled = np.einsum("bhf,bhfa->bha", weights, values).reshape(batch, cfg.attention_dim)
    zhat = pooled @ params["attn.out"]
    z_raw = zhat @ params["proj.weight"] + params["proj.bias"]
    _check_finite(z_raw, "projection")
    norms = np.linalg.norm(z_raw, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NonFiniteError("l2_normalize", "zero or non-finite embedding norm")
    z = z_raw / norms[:, None]

    state = _ForwardState(
        attn_input=attn_input, keys=keys, values=values, weights=weights,
        pooled=pooled, zhat=zhat, z_raw=z_raw, norms=norms, z=z, graph=graph_state,
    )
    return z, state


def forward(params: EmbedderParams, window: np.ndarray) -> np.ndarray:
    """Embed one window (F, input_dim) -> (d,)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise EmbedderError(f"expected a 2-D window, got shape {window.shape}")
    z, _ = forward_batch(params, window[None])
    return z[0]


def attention_weights(params: EmbedderParams, window: np.ndarray) -> np.ndarray:
    """Per-head attention weights over the frames of one window, (H, F)."""
    _, state = forward_batch(params, np.asarray(window, dtype=np.float64)[None])
    return state.weights[0]


def backward_batch(
    params: EmbedderParams, state: _ForwardState, d_z: np.ndarray
) -> np.ndarray:
    """Gradient of a scalar loss wrt all parameters, given d(loss)/d(z).

    d_z has the shape of the embeddings (B, d). Returns a flat vector aligned
    with params.flat.
    """
    cfg = params.config
    batch = d_z.shape[0]
    grads = {name: np.zeros(shape) for name, shape in params.shapes}

    # L2 normalization: z = u/|u|, dL/du = (dz - z (z . dz)) / |u|
    inner = np.einsum("bd,bd->b", state.z, d_z)
    d_raw = (d_z - state.z * inner[:, None]) / state.norms[:, None]

    grads["proj.bias"] += d_raw.sum(axis=0)
    grads["proj.weight"] += state.zhat.T @ d_raw
    d_zhat = d_raw @ params["proj.weight"].T

    grads["attn.out"] += state.pooled.T @ d_zhat
    d_pooled = (d_zhat @ params["attn.out"].T).reshape(batch, cfg.heads, cfg.head_dim)

    d_weights = np.einsum("bha,bhfa->bhf", d_pooled, state.values)
    d_values = np.einsum("bhf,bha->bhfa", state.weights, d_pooled)

    # softmax: dlogits = w * (dw - sum_f w*dw)
    mix = np.einsum("bhf,bhf->bh", state.weights, d_weights)
    d_logits = state.weights * (d_weights - mix[:, :, None])
    d_logits *= 1.0 / np.sqrt(cfg.head_dim)

    grads["attn.query"] += np.einsum("bhf,bhfa->ha", d_logits, state.keys)
    d_keys = np.einsum("bhf,ha->bhfa", d_logits, params["attn.query"])

    grads["attn.key"] += np.einsum("bfd,bhfa->hda", state.attn_input, d_keys)
    grads["attn.value"] += np.einsum("bfd,bhfa->hda", state.attn_input, d_values)

    if cfg.graph is not None:
        d_input = np.einsum("bhfa,hda->bfd", d_keys, params["attn.key"])
        d_input += np.einsum("bhfa,hda->bfd", d_values, params["attn.value"])
        d_desc = d_input.reshape(batch * cfg.window_len, cfg.graph.hidden_dim)
        assert state.graph is not None
        _graph_backward(params, state.graph, d_desc, grads)

    flat = np.concatenate([grads[name].ravel() for name, _ in params.shapes])
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("gradient")
    return flat


# -- triplet loss --------------------------------------------------------------


def triplet_loss(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float = 0.2
) -> float:
    """max(0, |a-p|^2 - |a-n|^2 + margin) for one triplet of embeddings."""
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if not (anchor.shape == positive.shape == negative.shape) or anchor.ndim != 1:
        raise EmbedderError(
            f"triplet embeddings must share one dimension, got "
            f"{anchor.shape}/{positive.shape}/{negative.shape}"
        )
    d_pos = float(np.sum((anchor - positive) ** 2))
    d_neg = float(np.sum((anchor - negative) ** 2))
    return max(0.0, d_pos - d_neg + margin)


def triplet_batch(
    params: EmbedderParams,
    anchors: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float = 0.2,
) -> tuple[float, np.ndarray, float]:
    """Mean triplet loss over a batch of windows plus its parameter gradient.

    anchors/positives/negatives are (B, F, input_dim). Returns (loss, flat
    gradient, fraction of active triplets).
    """
    batch = anchors.shape[0]
    if not (anchors.shape == positives.shape == negatives.shape):
        raise EmbedderError("triplet window batches must have identical shapes")
    stacked = np.concatenate([anchors, positives, negatives], axis=0)
    z, state = forward_batch(params, stacked)
    za, zp, zn = z[:batch], z[batch : 2 * batch], z[2 * batch :]

    d_pos = np.sum((za - zp) ** 2, axis=1)
    d_neg = np.sum((za - zn) ** 2, axis=1)
    terms = d_pos - d_neg + margin
    active = terms > 0.0
    loss = float(np.maximum(terms, 0.0).mean())

    coeff = active.astype(np.float64)[:, None] * (2.0 / batch)
    d_z = np.concatenate(
        [coeff * (zn - zp), coeff * (zp - za), coeff * (za - zn)], axis=0
    )
    grad = backward_batch(params, state, d_z)
    return loss, grad, float(active.mean())


# -- checkpoint I/O -------------------------------------------------------------

_CKPT_MAGIC = b"AVCK"


def save_checkpoint(params: EmbedderParams, path: str | Path) -> None:
    """Write config + normalization + graph as a JSON header followed by the
    raw float64 parameter vector. Round trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": 1,
        "config": params.config.to_dict(),
        "normalization": params.normalization.to_dict() if params.normalization else None,
        "graph": params.graph.to_dict() if params.graph else None,
        "param_count": params.size,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> EmbedderParams:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise EmbedderError(f"{path}: not a model checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        raw = fh.read()
    config = EmbedderConfig.from_dict(header["config"])
    norm = (
        NormalizationParams.from_dict(header["normalization"])
        if header.get("normalization")
        else None
    )
    graph = AdjacencyGraph.from_dict(header["graph"]) if header.get("graph") else None
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if flat.size != header["param_count"]:
        raise EmbedderError(
            f"{path}: parameter vector has {flat.size} values, "
            f"header promises {header['param_count']}"
        )
    return EmbedderParams(config, flat, norm, graph)
