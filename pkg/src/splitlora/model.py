"""Frozen toy networks, the cut-layer split and the two halves of a training pass.

Activations are kept as flattened token rows: a batch of ``b`` sequences
of length ``T`` travels as a ``(b*T) x width`` matrix. A model is an
optional embedding, a trunk of ``dense_tanh`` or
``simplified_transformer_block`` layers, and an optional output head. The
cut index counts trunk layers only: the client part is the embedding plus
the first ``cut`` trunk layers, the server part is the rest plus the head.

Each frozen weight that can carry an adapter is a *site*; its id is
``8 * layer_index + slot``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ParameterError, ShapeError, StateError, StructureError
from .lora import AdapterGrad, AdapterSet, LoraAdapter, adapter_backward, adapter_forward, init_adapter
from .numerics import Matrix, SeededRng, frozen, gaussian_init

EMBEDDING = "embedding"
DENSE_TANH = "dense_tanh"
TRANSFORMER = "simplified_transformer_block"
OUTPUT_HEAD = "output_head"
LAYER_KINDS = (EMBEDDING, DENSE_TANH, TRANSFORMER, OUTPUT_HEAD)
TRUNK_KINDS = (DENSE_TANH, TRANSFORMER)

SITE_STRIDE = 8
# adapter-capable weights per kind, in slot order
SITE_NAMES = {
    EMBEDDING: ("tok",),
    DENSE_TANH: ("w",),
    TRANSFORMER: ("wq", "wk", "wv", "wo", "w1", "w2"),
    OUTPUT_HEAD: ("w",),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"{self.kind}: dims must be >= 1")
        if self.kind == TRANSFORMER:
            if self.input_dim != self.output_dim:
                raise ConfigError("transformer block must keep its width")
            if self.hidden is None or self.hidden < 1:
                raise ConfigError("transformer block needs hidden >= 1")

    def weight_shapes(self, seq_len: int) -> dict[str, tuple[int, int]]:
        d, m = self.input_dim, self.output_dim
        if self.kind == EMBEDDING:
            return {"tok": (d, m), "pos": (seq_len, m)}
        if self.kind == DENSE_TANH:
            return {"w": (d, m), "bias": (1, m)}
        if self.kind == TRANSFORMER:
            h = self.hidden
            return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, h), "w2": (h, d)}
        return {"w": (d, m)}


def toy_architecture(vocab: int, width: int, hidden: int, blocks: int,
                     block_kind: str = TRANSFORMER) -> list[LayerSpec]:
    """embedding -> ``blocks`` trunk layers of constant width -> output head."""
    if block_kind not in TRUNK_KINDS:
        raise ConfigError(f"trunk layers must be one of {TRUNK_KINDS}, got {block_kind!r}")
    trunk = [LayerSpec(block_kind, width, width, hidden if block_kind == TRANSFORMER else None)
             for _ in range(blocks)]
    return [LayerSpec(EMBEDDING, vocab, width), *trunk, LayerSpec(OUTPUT_HEAD, width, vocab)]


@dataclass(frozen=True, eq=False)
class Layer:
    index: int
    spec: LayerSpec
    weights: dict
    seq_len: int

    @property
    def kind(self) -> str:
        return self.spec.kind

    def site_id(self, name: str) -> int:
        return SITE_STRIDE * self.index + SITE_NAMES[self.kind].index(name)

    def sites(self) -> list[tuple[int, str, int, int]]:
        """(site_id, weight name, d, m) for each adapter-capable weight."""
        return [(self.site_id(n), n, *self.weights[n].shape) for n in SITE_NAMES[self.kind]]

    def dense_products(self) -> list[tuple[str, int, int]]:
        """(name, d_in, d_out) of the dense products a forward pass performs."""
        if self.kind == EMBEDDING:
            return []  # table lookup
        return [(n, *self.weights[n].shape) for n in SITE_NAMES[self.kind]]


@dataclass(frozen=True, eq=False)
class BaseModel:
    layers: tuple[Layer, ...]
    vocab_size: int
    seq_len: int

    @property
    def trunk(self) -> tuple[Layer, ...]:
        return tuple(l for l in self.layers if l.kind in TRUNK_KINDS)

    @property
    def num_blocks(self) -> int:
        return len(self.trunk)

    def sites(self) -> list[tuple[int, str, int, int]]:
        return [s for l in self.layers for s in l.sites()]

    def weights_bytes(self) -> bytes:
        return b"".join(w.tobytes() for l in self.layers for _, w in sorted(l.weights.items()))


@dataclass(frozen=True, eq=False)
class SplitModel:
    model: BaseModel
    client_part: tuple[Layer, ...]
    server_part: tuple[Layer, ...]
    cut_layer: int

    @property
    def client_site_ids(self) -> set[int]:
        return {s[0] for l in self.client_part for s in l.sites()}

    @property
    def server_site_ids(self) -> set[int]:
        return {s[0] for l in self.server_part for s in l.sites()}

    @property
    def cut_width(self) -> int:
        return self.client_part[-1].spec.output_dim


def build_model(arch: Sequence[LayerSpec], vocab: int, seq_len: int,
                sigma: float | None, rng: SeededRng) -> BaseModel:
    """Draw frozen weights for ``arch``.

    ``sigma=None`` scales each dense weight by ``1/sqrt(fan_in)``, embedding
    tables by 1 and biases by 0.1; the residual-branch outputs of transformer
    blocks (``wo``, ``w2``) get a further ``1/sqrt(2 * blocks)`` so the
    LayerNorm-free residual stream stays bounded with depth.
    """
    arch = list(arch)
    if not arch:
        raise ConfigError("empty architecture")
    if seq_len < 1 or vocab < 1:
        raise ConfigError("vocab and seq_len must be >= 1")
    for i, spec in enumerate(arch):
        if spec.kind == EMBEDDING and (i != 0 or spec.input_dim != vocab):
            raise ConfigError("embedding must be the first layer and read the vocabulary")
        if spec.kind == OUTPUT_HEAD and i != len(arch) - 1:
            raise ConfigError("output head must be the last layer")
        if i and arch[i - 1].output_dim != spec.input_dim:
            raise ConfigError(f"layer {i - 1} outputs {arch[i - 1].output_dim} but layer {i} "
                              f"expects {spec.input_dim}")
    if arch[-1].kind == OUTPUT_HEAD and arch[-1].output_dim != vocab:
        raise ConfigError("output head must emit vocab_size logits")
    if arch[0].kind != EMBEDDING and seq_len != 1:
        raise ConfigError("feature-input models (no embedding) require seq_len 1")
    residual = 1.0 / math.sqrt(2 * max(1, sum(s.kind in TRUNK_KINDS for s in arch)))
    layers = []
    for i, spec in enumerate(arch):
        weights = {}
        for name, (d, m) in spec.weight_shapes(seq_len).items():
            if sigma is not None:
                s = sigma
            elif spec.kind == EMBEDDING:
                s = 1.0
            elif name == "bias":
                s = 0.1
            else:
                s = 1.0 / math.sqrt(d)
                if spec.kind == TRANSFORMER and name in ("wo", "w2"):
                    s *= residual
            weights[name] = frozen(gaussian_init(d, m, s, rng))
        layers.append(Layer(i, spec, weights, seq_len))
    return BaseModel(tuple(layers), vocab, seq_len)


def split(model: BaseModel, cut_layer: int) -> SplitModel:
    trunk = model.trunk
    if not 1 <= cut_layer <= len(trunk) - 1:
        raise ParameterError(f"cut layer {cut_layer} outside [1, {len(trunk) - 1}]")
    boundary = trunk[cut_layer - 1].index + 1
    return SplitModel(model, model.layers[:boundary], model.layers[boundary:], cut_layer)


def init_adapters(model: BaseModel, rank: int, alpha: float | None, sigma: float, rng: SeededRng,
                  targets: Sequence[str] | None = None, include_embedding: bool = False,
                  include_head: bool = False) -> AdapterSet:
    """Adapters for every selected site, drawn in ascending site order.

    By default every dense weight inside each trunk layer gets one;
    ``targets`` restricts by weight name.
    """
    out = []
    for layer in model.layers:
        if layer.kind == EMBEDDING and not include_embedding:
            continue
        if layer.kind == OUTPUT_HEAD and not include_head:
            continue
        for site_id, name, d, m in layer.sites():
            if targets is not None and name not in targets:
                continue
            out.append(init_adapter(site_id, d, m, rank, alpha, sigma, rng))
    return AdapterSet(tuple(out))


# ---------------------------------------------------------------- layer kernels

def _lin(h: Matrix, W: Matrix, adapter: LoraAdapter | None) -> Matrix:
    return h @ W if adapter is None else adapter_forward(h, W, adapter)


def _lin_back(h, g, W, adapter, grads, site_id):
    if adapter is None:
        return g @ W.T
    ga, gb, gh = adapter_backward(h, g, W, adapter)
    grads[site_id] = AdapterGrad(ga, gb)
    return gh


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def _layer_forward(layer: Layer, h, adapters: AdapterSet):
    w = layer.weights
    ad = lambda name: adapters.get(layer.site_id(name))
    kind = layer.kind
    if kind == EMBEDDING:
        tokens = np.asarray(h)
        if tokens.ndim != 2 or tokens.shape[1] != layer.seq_len:
            raise ShapeError(f"token grid must be b x {layer.seq_len}, got {tokens.shape}")
        onehot = np.zeros((tokens.size, layer.spec.input_dim))
        onehot[np.arange(tokens.size), tokens.reshape(-1)] = 1.0
        pos = np.tile(w["pos"], (tokens.shape[0], 1))
        return _lin(onehot, w["tok"], ad("tok")) + pos, (onehot,)
    if h.ndim != 2 or h.shape[1] != layer.spec.input_dim:
        raise ShapeError(f"layer {layer.index} ({kind}) expects width {layer.spec.input_dim}, "
                         f"got input of shape {h.shape}")
    if kind == DENSE_TANH:
        out = np.tanh(_lin(h, w["w"], ad("w")) + w["bias"])
        return out, (h, out)
    if kind == OUTPUT_HEAD:
        return _lin(h, w["w"], ad("w")), (h,)
    T = layer.seq_len
    rows, d = h.shape
    if rows % T:
        raise ShapeError(f"{rows} activation rows are not whole sequences of length {T}")
    n = rows // T
    q = _lin(h, w["wq"], ad("wq")).reshape(n, T, d)
    k = _lin(h, w["wk"], ad("wk")).reshape(n, T, d)
    v = _lin(h, w["wv"], ad("wv")).reshape(n, T, d)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))
    scores[:, _causal_mask(T)] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).reshape(rows, d)
    h1 = h + _lin(ctx, w["wo"], ad("wo"))
    u = np.tanh(_lin(h1, w["w1"], ad("w1")))
    out = h1 + _lin(u, w["w2"], ad("w2"))
    return out, (h, q, k, v, p, ctx, h1, u)


def _layer_backward(layer: Layer, cache, g, adapters: AdapterSet, grads: dict):
    w = layer.weights
    ad = lambda name: adapters.get(layer.site_id(name))
    sid = layer.site_id
    kind = layer.kind
    if kind == EMBEDDING:
        (onehot,) = cache
        _lin_back(onehot, g, w["tok"], ad("tok"), grads, sid("tok"))
        return None
    if kind == DENSE_TANH:
        h, out = cache
        gz = g * (1.0 - out * out)
        return _lin_back(h, gz, w["w"], ad("w"), grads, sid("w"))
    if kind == OUTPUT_HEAD:
        (h,) = cache
        return _lin_back(h, g, w["w"], ad("w"), grads, sid("w"))
    h, q, k, v, p, ctx, h1, u = cache
    n, T, d = q.shape
    gu = _lin_back(u, g, w["w2"], ad("w2"), grads, sid("w2"))
    gz = gu * (1.0 - u * u)
    gh1 = g + _lin_back(h1, gz, w["w1"], ad("w1"), grads, sid("w1"))
    gctx = _lin_back(ctx, gh1, w["wo"], ad("wo"), grads, sid("wo")).reshape(n, T, d)
    gp = gctx @ v.transpose(0, 2, 1)
    gv = p.transpose(0, 2, 1) @ gctx
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * (1.0 / math.sqrt(d))
    gq = gs @ k
    gk = gs.transpose(0, 2, 1) @ q
    gh = gh1 + _lin_back(h, gq.reshape(n * T, d), w["wq"], ad("wq"), grads, sid("wq"))
    gh = gh + _lin_back(h, gk.reshape(n * T, d), w["wk"], ad("wk"), grads, sid("wk"))
    gh = gh + _lin_back(h, gv.reshape(n * T, d), w["wv"], ad("wv"), grads, sid("wv"))
    return gh


# ---------------------------------------------------------------- passes

@dataclass(eq=False)
class ForwardCache:
    layer_indices: tuple[int, ...]
    adapters: AdapterSet
    layer_caches: list
    rows: int
    consumed: bool = False


def _check_sites(adapters: AdapterSet, allowed: set[int], where: str) -> None:
    stray = [s for s in adapters.site_ids if s not in allowed]
    if stray:
        raise StructureError(f"adapter sites {stray} do not belong to the {where}")


def forward_layers(layers: Sequence[Layer], adapters: AdapterSet, x) -> tuple[Matrix, ForwardCache]:
    h = x
    caches = []
    for layer in layers:
        h, c = _layer_forward(layer, h, adapters)
        caches.append(c)
    return h, ForwardCache(tuple(l.index for l in layers), adapters, caches, h.shape[0])


def backward_layers(layers: Sequence[Layer], adapters: AdapterSet, cache: ForwardCache,
                    g: Matrix) -> tuple[Matrix | None, dict[int, AdapterGrad]]:
    if cache.consumed:
        raise StateError("forward cache was already used for a backward pass")
    if cache.layer_indices != tuple(l.index for l in layers):
        raise StateError("forward cache belongs to a different layer range")
    if cache.adapters is not adapters:
        raise StateError("adapters changed since the forward pass that produced this cache")
    if g.shape[0] != cache.rows:
        raise ShapeError(f"gradient has {g.shape[0]} rows, forward pass produced {cache.rows}")
    grads: dict[int, AdapterGrad] = {}
    for layer, c in zip(reversed(layers), reversed(cache.layer_caches)):
        g = _layer_backward(layer, c, g, adapters, grads)
    cache.consumed = True
    return g, dict(sorted(grads.items()))


def model_forward(model: BaseModel, adapters: AdapterSet, x) -> tuple[Matrix, ForwardCache]:
    """Monolithic forward of the whole (unsplit) model."""
    _check_sites(adapters, {s[0] for s in model.sites()}, "model")
    return forward_layers(model.layers, adapters, x)


def model_backward(model: BaseModel, adapters: AdapterSet, cache: ForwardCache,
                   g_logits: Matrix) -> dict[int, AdapterGrad]:
    return backward_layers(model.layers, adapters, cache, g_logits)[1]


def client_forward(split_model: SplitModel, adapters: AdapterSet, x) -> tuple[Matrix, ForwardCache]:
    """Cut-layer activations of one client's batch."""
    _check_sites(adapters, split_model.client_site_ids, "client part")
    return forward_layers(split_model.client_part, adapters, x)


def server_forward(split_model: SplitModel, adapters: AdapterSet, S: Matrix) -> tuple[Matrix, ForwardCache]:
    """Logits for every row of the client-ordered concatenation ``S``."""
    _check_sites(adapters, split_model.server_site_ids, "server part")
    if S.ndim != 2 or S.shape[1] != split_model.cut_width:
        raise ShapeError(f"activations of shape {S.shape} do not match cut width {split_model.cut_width}")
    return forward_layers(split_model.server_part, adapters, S)


def server_backward(split_model: SplitModel, adapters: AdapterSet, cache: ForwardCache,
                    g_logits: Matrix, client_rows: Sequence[int]):
    """Server adapter gradients and the activation gradient sliced per client."""
    if sum(client_rows) != cache.rows:
        raise ShapeError(f"client row counts {list(client_rows)} do not cover {cache.rows} rows")
    dS, grads = backward_layers(split_model.server_part, adapters, cache, g_logits)
    bounds = np.cumsum([0, *client_rows])
    return grads, [dS[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def client_backward(split_model: SplitModel, adapters: AdapterSet, cache: ForwardCache,
                    ds: Matrix) -> dict[int, AdapterGrad]:
    if ds.ndim != 2 or ds.shape[1] != split_model.cut_width:
        raise ShapeError(f"activation gradient of shape {ds.shape} does not match cut width "
                         f"{split_model.cut_width}")
    return backward_layers(split_model.client_part, adapters, cache, ds)[1]


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class LossReport:
    mean_ce: float
    ppl: float
    per_client_mean_ce: tuple[float, ...]
    weights: tuple[float, ...] = field(default=())


def compute_loss(logits: Matrix, labels, client_row_slices: Sequence[tuple[int, int]],
                 weights: Sequence[float] | None = None) -> tuple[LossReport, Matrix]:
    """Cross-entropy over the concatenated rows and its gradient w.r.t. the logits.

    The objective is ``sum_i w_i * mean_ce_i`` over client slices. With
    ``weights=None`` the weights are each slice's share of the rows, which
    makes it the plain mean over all rows; the caller passes data-size
    shares when client datasets differ in size.
    """
    labels = np.asarray(labels).reshape(-1)
    rows, vocab = logits.shape
    if labels.shape[0] != rows:
        raise ShapeError(f"{labels.shape[0]} labels for {rows} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise DataError(f"labels must lie in [0, {vocab}), got range [{labels.min()}, {labels.max()}]")
    pos = 0
    for a, b in client_row_slices:
        if a != pos or b <= a:
            raise ShapeError(f"client slices {list(client_row_slices)} must tile the rows in order")
        pos = b
    if pos != rows:
        raise ShapeError(f"client slices cover {pos} of {rows} rows")
    sizes = [b - a for a, b in client_row_slices]
    if weights is None:
        weights = [n / rows for n in sizes]
    weights = tuple(float(w) for w in weights)
    if len(weights) != len(sizes):
        raise ParameterError(f"{len(weights)} weights for {len(sizes)} client slices")

    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ar = np.arange(rows)
    ce = lse - z[ar, labels]
    g = np.exp(z - lse[:, None])
    g[ar, labels] -= 1.0
    per_client = []
    mean_ce = 0.0
    for (a, b), w in zip(client_row_slices, weights):
        ce_i = float(ce[a:b].sum() / (b - a))
        per_client.append(ce_i)
        mean_ce += w * ce_i
        g[a:b] *= w / (b - a)
    if not math.isfinite(mean_ce) or mean_ce > 700.0:
        raise NumericError(f"loss diverged (mean cross-entropy {mean_ce})")
    return LossReport(mean_ce, math.exp(mean_ce), tuple(per_client), weights), g


def evaluate(model: BaseModel, adapters: AdapterSet, x, y, chunk: int = 256) -> float:
    """Mean cross-entropy of the adapted model over a whole dataset."""
    total = 0.0
    rows = 0
    n = len(x)
    for start in range(0, n, chunk):
        logits, _ = model_forward(model, adapters, x[start:start + chunk])
        rep, _ = compute_loss(logits, y[start:start + chunk], [(0, logits.shape[0])])
        total += rep.mean_ce * logits.shape[0]
        rows += logits.shape[0]
    return total / rows
