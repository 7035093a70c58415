"""Query-based attribute classification head.

Three parallel decoders consume whole-image, cropped, and masked feature
maps. Decoder queries are built per context by projecting the concatenation
of a text embedding (super-class in grouped mode, attribute in class-wise
mode) with a pooled adapter output vector. Per-attribute logits are inner
products between projected attribute text embeddings and the decoder output
assigned to the attribute's group; the three context logits are averaged.

All fixture inputs are constants; gradients flow only through the
projection, decoder, and consistency-head parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import Batch
from .fixtures import EmbeddingFixture
from .hierarchy import AttributeHierarchy
from .numerics import Parameter, Tensor

CONTEXTS = ("img", "crop", "mask")
QUERY_MODES = ("superclass", "classwise")
POOL_MODES = ("mean", "max", "obj", "att", "att_obj")

LN_EPS = 1e-5


class ModelError(Exception):
    pass


@dataclass
class ModelDims:
    d: int = 256
    d_ff: int = 2048
    n_heads: int = 1

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ModelError(f"d={self.d} not divisible by n_heads={self.n_heads}")


@dataclass
class DecoderBlock:
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    ffn_in: Parameter  # [d_ff, d]
    ffn_out: Parameter  # [d, d_ff]
    ln1_scale: Parameter
    ln1_offset: Parameter
    ln2_scale: Parameter
    ln2_offset: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.ffn_in, self.ffn_out,
                self.ln1_scale, self.ln1_offset, self.ln2_scale, self.ln2_offset]


@dataclass
class ContextStack:
    feat_proj: Parameter  # [d, d_v]
    query_proj: Parameter  # [d, 2*d_q]
    blocks: list[DecoderBlock]

    def parameters(self) -> list[Parameter]:
        out = [self.feat_proj, self.query_proj]
        for b in self.blocks:
            out.extend(b.parameters())
        return out


@dataclass
class ModelParameters:
    dims: ModelDims
    d_q: int
    d_v: int
    text_proj: Parameter  # [d, d_q], shared logit projection
    scr_head: Parameter  # [d_q, d], maps averaged queries into text space
    contexts: dict[str, ContextStack]

    def parameters(self) -> list[Parameter]:
        out = [self.text_proj, self.scr_head]
        for name in CONTEXTS:
            out.extend(self.contexts[name].parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


def _uniform_init(rng: np.random.Generator, shape: tuple[int, int], name: str) -> Parameter:
    bound = 1.0 / math.sqrt(shape[-1])
    return Parameter(rng.uniform(-bound, bound, size=shape), name)


def init_parameters(
    dims: ModelDims, d_q: int, d_v: int, seed: int, n_blocks: int = 3
) -> ModelParameters:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; layer-norm
    scales start at 1, offsets at 0."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    d, d_ff = dims.d, dims.d_ff
    text_proj = _uniform_init(rng, (d, d_q), "text_proj")
    scr_head = _uniform_init(rng, (d_q, d), "scr_head")
    contexts = {}
    for ctx in CONTEXTS:
        blocks = []
        for b in range(n_blocks):
            pfx = f"{ctx}.block{b}"
            blocks.append(
                DecoderBlock(
                    w_q=_uniform_init(rng, (d, d), f"{pfx}.w_q"),
                    w_k=_uniform_init(rng, (d, d), f"{pfx}.w_k"),
                    w_v=_uniform_init(rng, (d, d), f"{pfx}.w_v"),
                    w_o=_uniform_init(rng, (d, d), f"{pfx}.w_o"),
                    ffn_in=_uniform_init(rng, (d_ff, d), f"{pfx}.ffn_in"),
                    ffn_out=_uniform_init(rng, (d, d_ff), f"{pfx}.ffn_out"),
                    ln1_scale=Parameter(np.ones(d), f"{pfx}.ln1_scale"),
                    ln1_offset=Parameter(np.zeros(d), f"{pfx}.ln1_offset"),
                    ln2_scale=Parameter(np.ones(d), f"{pfx}.ln2_scale"),
                    ln2_offset=Parameter(np.zeros(d), f"{pfx}.ln2_offset"),
                )
            )
        contexts[ctx] = ContextStack(
            feat_proj=_uniform_init(rng, (d, d_v), f"{ctx}.feat_proj"),
            query_proj=_uniform_init(rng, (d, 2 * d_q), f"{ctx}.query_proj"),
            blocks=blocks,
        )
    return ModelParameters(
        dims=dims, d_q=d_q, d_v=d_v, text_proj=text_proj, scr_head=scr_head, contexts=contexts
    )


# --- constant-side preprocessing ------------------------------------------


def pool_qformer(
    z_hat: np.ndarray,
    obj_emb: np.ndarray | None,
    attr_embs: np.ndarray | None,
    mode: str = "att_obj",
) -> np.ndarray:
    """Collapse the adapter's output rows to a single visual vector.

    mean/max pool elementwise. ``obj`` keeps the row with the highest inner
    product against the object text embedding; ``att`` keeps the row with
    the highest mean inner product against all attribute embeddings;
    ``att_obj`` averages those two rows.
    """
    z = np.asarray(z_hat, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ModelError(f"z_hat must be [n_z, d_q] with n_z >= 1, got {z.shape}")
    if mode == "mean":
        return z.mean(axis=0)
    if mode == "max":
        return z.max(axis=0)
    if mode == "obj":
        return z[int(np.argmax(z @ np.asarray(obj_emb)))]
    if mode == "att":
        scores = (np.asarray(attr_embs) @ z.T).mean(axis=0)
        return z[int(np.argmax(scores))]
    if mode == "att_obj":
        row_obj = z[int(np.argmax(z @ np.asarray(obj_emb)))]
        scores = (np.asarray(attr_embs) @ z.T).mean(axis=0)
        row_att = z[int(np.argmax(scores))]
        return 0.5 * (row_obj + row_att)
    raise ModelError(f"unknown pool mode {mode!r}")


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average a binary HxW grid down to h x w, threshold at 0.5.

    Cells whose covered fraction is exactly 0.5 round up to 1.
    """
    m = np.asarray(mask, dtype=np.float64)
    big_h, big_w = m.shape
    wy = _overlap_weights(big_h, h)
    wx = _overlap_weights(big_w, w)
    fractions = wy @ m @ wx.T
    return (fractions >= 0.5).astype(np.float64)


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] fractional-overlap matrix whose rows average exactly."""
    scale = n_in / n_out
    wts = np.zeros((n_out, n_in))
    for r in range(n_out):
        lo, hi = r * scale, (r + 1) * scale
        for p in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            wts[r, p] = min(hi, p + 1) - max(lo, p)
    return wts / scale


def mask_feature_map(f_crop: np.ndarray, mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero feature rows whose resized mask bit is background."""
    f = np.asarray(f_crop, dtype=np.float64)
    if f.shape[0] != h * w:
        raise ModelError(f"feature map has {f.shape[0]} rows, expected {h * w}")
    bits = resize_mask(mask, h, w).reshape(-1)
    return f * bits[:, None]


# --- differentiable path ---------------------------------------------------


def init_queries(
    text_emb: np.ndarray,
    v: np.ndarray,
    query_proj: Parameter,
    mode: str = "superclass",
) -> Tensor:
    """Project [text embedding ; pooled visual vector] rows into query space.

    ``superclass`` mode feeds super-class embeddings (one query per group);
    ``classwise`` feeds attribute embeddings (one query per attribute).
    ``text_emb`` may be [N_q, d_q] with v [d_q], or batched [B, N_q, d_q]
    with v [B, d_q].
    """
    emb = np.asarray(text_emb, dtype=np.float64)
    vv = np.asarray(v, dtype=np.float64)
    if mode not in QUERY_MODES:
        raise ModelError(f"unknown query mode {mode!r}")
    if emb.shape[-1] != vv.shape[-1]:
        raise ModelError(f"embedding dim {emb.shape[-1]} != pooled vector dim {vv.shape[-1]}")
    if 2 * emb.shape[-1] != query_proj.shape[-1]:
        raise ModelError(
            f"query projection expects concat dim {query_proj.shape[-1]}, got {2 * emb.shape[-1]}"
        )
    tiled = np.broadcast_to(vv[..., None, :], emb.shape)
    concat = np.concatenate([emb, tiled], axis=-1)
    return nm.matmul(Tensor(concat), nm.transpose_last(query_proj))


def _layer_norm(x: Tensor, scale: Parameter, offset: Parameter) -> Tensor:
    mu = nm.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = nm.tmean(centered * centered, axis=-1, keepdims=True)
    return centered / nm.tsqrt(var + LN_EPS) * scale + offset


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [..., n, d] -> [..., h, n, d/h]
    *lead, n, d = x.shape
    parts = nm.reshape(x, (*lead, n, n_heads, d // n_heads))
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return Tensor(parts.data.transpose(order), ((parts, lambda g: g.transpose(_argsort(order))),))


def _merge_heads(x: Tensor) -> Tensor:
    # [..., h, n, dh] -> [..., n, h*dh]
    *lead, h, n, dh = x.shape
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    moved = Tensor(x.data.transpose(order), ((x, lambda g: g.transpose(_argsort(order))),))
    return nm.reshape(moved, (*lead, n, h * dh))


def _argsort(order: tuple[int, ...]) -> tuple[int, ...]:
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


def decode_context(queries: Tensor, f_tilde: Tensor, blocks: list[DecoderBlock],
                   n_heads: int = 1) -> Tensor:
    """Run the per-context decoder stack.

    Each block: cross-attention from the queries onto the projected feature
    map (scores scaled by 1/sqrt(d_head)), residual, layer norm; then a
    two-layer FFN with ReLU, residual, layer norm.
    """
    x = queries
    d = x.shape[-1]
    scale = 1.0 / math.sqrt(d // n_heads)
    for blk in blocks:
        q = nm.matmul(x, nm.transpose_last(blk.w_q))
        k = nm.matmul(f_tilde, nm.transpose_last(blk.w_k))
        v = nm.matmul(f_tilde, nm.transpose_last(blk.w_v))
        if n_heads > 1:
            q, k, v = (_split_heads(t, n_heads) for t in (q, k, v))
        weights = nm.softmax_rows(nm.matmul(q, nm.transpose_last(k)) * scale)
        attended = nm.matmul(weights, v)
        if n_heads > 1:
            attended = _merge_heads(attended)
        attn_out = nm.matmul(attended, nm.transpose_last(blk.w_o))
        x = _layer_norm(x + attn_out, blk.ln1_scale, blk.ln1_offset)
        hidden = nm.relu(nm.matmul(x, nm.transpose_last(blk.ffn_in)))
        ffn_out = nm.matmul(hidden, nm.transpose_last(blk.ffn_out))
        x = _layer_norm(x + ffn_out, blk.ln2_scale, blk.ln2_offset)
    return x


@dataclass
class ForwardOutputs:
    """Batched forward results; tensors stay attached to the graph."""

    context_logits: dict[str, Tensor]  # each [B, N_a]
    context_queries: dict[str, Tensor]  # each [B, N_q, d]
    c_bar: Tensor  # [B, N_a]
    q_bar: Tensor  # [B, N_q, d]
    n_query_rows: int
    contexts: tuple[str, ...]

    def scores(self) -> np.ndarray:
        """Plain sigmoid prediction scores (no retrieval enhancement)."""
        return 1.0 / (1.0 + np.exp(-self.c_bar.data))


@dataclass
class PreparedBatch:
    """Constant tensors derived from a Batch, ready for the graph."""

    query_input: np.ndarray  # [B, N_q, d_q] text side of the query concat
    pooled: np.ndarray  # [B, d_q]
    feats: dict[str, np.ndarray]  # context -> [B, hw, d_v]
    labels: np.ndarray  # [B, N_a]
    scr_targets: np.ndarray  # [B, N_s, d_q]
    scr_active: np.ndarray  # [B, N_s] 0/1
    size: int


def prepare_batch(
    batch: Batch,
    fixture: EmbeddingFixture,
    hierarchy: AttributeHierarchy,
    query_mode: str = "superclass",
    pool_mode: str = "att_obj",
) -> PreparedBatch:
    """Precompute every constant the forward pass needs for a batch."""
    dims = fixture.dims
    pooled = np.stack(
        [
            pool_qformer(
                batch.z_hat[i],
                fixture.obj_text_emb[batch.object_indices[i]],
                fixture.attr_text_emb,
                pool_mode,
            )
            for i in range(len(batch))
        ]
    )
    text_side = fixture.super_text_emb if query_mode == "superclass" else fixture.attr_text_emb
    query_input = np.broadcast_to(text_side, (len(batch), *text_side.shape)).copy()

    masked = np.stack(
        [
            mask_feature_map(batch.f_crop[i], batch.masks[i], dims.h, dims.w)
            for i in range(len(batch))
        ]
    )
    feats = {"img": batch.f_img, "crop": batch.f_crop, "mask": masked}

    active = np.ones((len(batch), hierarchy.n_super))
    for j, name in enumerate(hierarchy.super_classes):
        if name == "other":
            active[:, j] = 0.0
    # all-zero mask-token rows carry no prompt and are excluded from SCR
    zero_rows = np.all(batch.mask_token_feats == 0.0, axis=2)
    active[zero_rows] = 0.0

    return PreparedBatch(
        query_input=query_input,
        pooled=pooled,
        feats=feats,
        labels=batch.labels,
        scr_targets=batch.mask_token_feats,
        scr_active=active,
        size=len(batch),
    )


def forward(
    prepared: PreparedBatch,
    fixture: EmbeddingFixture,
    hierarchy: AttributeHierarchy,
    params: ModelParameters,
    query_mode: str = "superclass",
    multi_context: bool = True,
) -> ForwardOutputs:
    """Batched forward pass over all active contexts.

    Returns per-context logits, their average, and the per-group query
    average used by the consistency loss. With multi_context off only the
    crop path runs and stands in for the average.
    """
    contexts = CONTEXTS if multi_context else ("crop",)
    n_heads = params.dims.n_heads

    text_proj_t = nm.matmul(
        Tensor(fixture.attr_text_emb), nm.transpose_last(params.text_proj)
    )  # [N_a, d]

    if query_mode == "superclass":
        gather = np.zeros((hierarchy.n_attrs, hierarchy.n_super))
        gather[np.arange(hierarchy.n_attrs), hierarchy.delta] = 1.0
        gather_t = Tensor(gather)
    elif query_mode == "classwise":
        gather_t = None
    else:
        raise ModelError(f"unknown query mode {query_mode!r}")

    ctx_logits: dict[str, Tensor] = {}
    ctx_queries: dict[str, Tensor] = {}
    for ctx in contexts:
        stack = params.contexts[ctx]
        queries = init_queries(prepared.query_input, prepared.pooled, stack.query_proj, query_mode)
        f_tilde = nm.matmul(Tensor(prepared.feats[ctx]), nm.transpose_last(stack.feat_proj))
        q_hat = decode_context(queries, f_tilde, stack.blocks, n_heads)  # [B, N_q, d]
        per_attr = q_hat if gather_t is None else nm.matmul(gather_t, q_hat)  # [B, N_a, d]
        logits = nm.tsum(text_proj_t * per_attr, axis=-1)  # [B, N_a]
        ctx_logits[ctx] = logits
        ctx_queries[ctx] = q_hat

    inv = 1.0 / len(contexts)
    c_bar = ctx_logits[contexts[0]]
    q_bar = ctx_queries[contexts[0]]
    for ctx in contexts[1:]:
        c_bar = c_bar + ctx_logits[ctx]
        q_bar = q_bar + ctx_queries[ctx]
    c_bar = c_bar * inv
    q_bar = q_bar * inv

    return ForwardOutputs(
        context_logits=ctx_logits,
        context_queries=ctx_queries,
        c_bar=c_bar,
        q_bar=q_bar,
        n_query_rows=prepared.query_input.shape[1],
        contexts=contexts,
    )


def query_allocation(n_attrs: int, n_super: int, d_q: int, d: int, query_mode: str) -> dict:
    """Query memory budget per context for a given mode.

    Counts the concatenated input rows plus the projected query rows, in
    float64 bytes. Used to assert the grouped-query scalability advantage
    without materializing anything.
    """
    rows = n_super if query_mode == "superclass" else n_attrs
    bytes_per_context = rows * (2 * d_q + d) * 8
    return {"rows": rows, "bytes_per_context": bytes_per_context}
