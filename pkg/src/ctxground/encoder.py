"""The two contextual branches: token/positional embeddings for text,
RoI features plus a spatial MLP for image regions, each followed by a
stack of multi-head self-attention encoder layers.

Both branches share the same post-norm encoder block (residual, then
layer norm, GELU feed-forward). The text branch adds a learned
positional table; the image branch optionally adds a spatial embedding
computed from each region's normalized location and size, so object
order carries no information (permutation equivariance).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    constant,
    dropout,
    gelu,
    layer_norm,
    matmul,
    parameter,
    softmax_lastdim,
    take_rows,
)

__all__ = [
    "BranchConfig",
    "default_text_config",
    "default_image_config",
    "model_label",
    "parse_model_label",
    "LinearParams",
    "LayerNormParams",
    "AttentionParams",
    "EncoderLayerParams",
    "TextEmbeddings",
    "SpatialMLP",
    "TextBranchParams",
    "ImageBranchParams",
    "BranchInput",
    "init_text_branch",
    "init_image_branch",
    "embed_tokens",
    "normalize_box",
    "normalize_boxes",
    "spatial_embed",
    "multi_head_self_attention",
    "encoder_layer",
    "encode_branch",
]

INIT_STD = 0.02
LN_EPS = 1e-5

# Padded object slots still flow through the embedding stage, so they
# carry a harmless unit box instead of a degenerate one.
PAD_BOX = (0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class BranchConfig:
    """Shape of one encoder branch.

    `max_positions` applies to the text branch only; `use_spatial`
    (whether the absolute spatial embedding is added) to the image
    branch only. `ffn_dim` defaults to 4x the hidden size.
    """

    num_layers: int
    num_heads: int
    hidden_dim: int
    ffn_dim: Optional[int] = None
    dropout_p: float = 0.4
    max_positions: Optional[int] = None
    use_spatial: Optional[bool] = None

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.hidden_dim < 1:
            raise ValueError("layers, heads and hidden_dim must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        elif self.ffn_dim < 1:
            raise ValueError("ffn_dim must be positive")
        if self.max_positions is not None and self.max_positions < 1:
            raise ValueError("max_positions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        out = {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "dropout_p": self.dropout_p,
        }
        if self.max_positions is not None:
            out["max_positions"] = self.max_positions
        if self.use_spatial is not None:
            out["use_spatial"] = self.use_spatial
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BranchConfig":
        return cls(**d)


def default_text_config() -> BranchConfig:
    """BERT-base-shaped text branch: 12 layers, 12 heads, 768 wide."""
    return BranchConfig(num_layers=12, num_heads=12, hidden_dim=768,
                        ffn_dim=3072, dropout_p=0.4, max_positions=512)


def default_image_config() -> BranchConfig:
    """Best-performing image branch: 1 layer, 2 heads, 2048 wide, spatial on."""
    return BranchConfig(num_layers=1, num_heads=2, hidden_dim=2048,
                        ffn_dim=8192, dropout_p=0.4, use_spatial=True)


def model_label(image_cfg: BranchConfig) -> str:
    """Run label `L{layers}-H{heads}[-abs]` derived from the image branch."""
    label = f"L{image_cfg.num_layers}-H{image_cfg.num_heads}"
    if image_cfg.use_spatial:
        label += "-abs"
    return label


def parse_model_label(label: str) -> tuple[int, int, bool]:
    """Inverse of :func:`model_label`; returns (layers, heads, use_spatial)."""
    m = re.fullmatch(r"L(\d+)-H(\d+)(-abs)?", label)
    if m is None:
        raise ValueError(f"not a valid model label: {label!r}")
    return int(m.group(1)), int(m.group(2)), m.group(3) is not None


# -- parameter containers ----------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor                 # [in, out]
    bias: Optional[Tensor] = None  # [out]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    output: LinearParams


@dataclass
class EncoderLayerParams:
    attention: AttentionParams
    attention_norm: LayerNormParams
    ffn_in: LinearParams
    ffn_out: LinearParams
    ffn_norm: LayerNormParams


@dataclass
class TextEmbeddings:
    token_table: Tensor     # [vocab, d]
    position_table: Tensor  # [max_positions, d]
    norm: LayerNormParams


@dataclass
class SpatialMLP:
    """Two-layer MLP mapping a normalized 5-d box descriptor to the branch width."""

    fc1: LinearParams  # 5 -> hidden
    fc2: LinearParams  # hidden -> d
    activation: str = "gelu"


@dataclass
class TextBranchParams:
    embeddings: TextEmbeddings
    layers: list[EncoderLayerParams] = field(default_factory=list)


@dataclass
class ImageBranchParams:
    input_proj: Optional[LinearParams]  # present iff feature_dim != hidden_dim
    spatial: Optional[SpatialMLP]       # present iff use_spatial
    embed_norm: LayerNormParams
    layers: list[EncoderLayerParams] = field(default_factory=list)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype,
                 std: float = INIT_STD, with_bias: bool = True) -> LinearParams:
    weight = parameter(rng.normal(0.0, std, (fan_in, fan_out)), dtype=dtype)
    bias = parameter(np.zeros(fan_out), dtype=dtype) if with_bias else None
    return LinearParams(weight=weight, bias=bias)


def _init_layer_norm(dim: int, dtype) -> LayerNormParams:
    return LayerNormParams(gain=parameter(np.ones(dim), dtype=dtype),
                           bias=parameter(np.zeros(dim), dtype=dtype))


def _init_encoder_layer(rng, cfg: BranchConfig, dtype, std: float) -> EncoderLayerParams:
    d = cfg.hidden_dim
    return EncoderLayerParams(
        attention=AttentionParams(
            query=_init_linear(rng, d, d, dtype, std),
            # A key bias is inert under softmax (it shifts every logit in
            # a row equally), so the attention keeps none.
            key=_init_linear(rng, d, d, dtype, std, with_bias=False),
            value=_init_linear(rng, d, d, dtype, std),
            output=_init_linear(rng, d, d, dtype, std),
        ),
        attention_norm=_init_layer_norm(d, dtype),
        ffn_in=_init_linear(rng, d, cfg.ffn_dim, dtype, std),
        ffn_out=_init_linear(rng, cfg.ffn_dim, d, dtype, std),
        ffn_norm=_init_layer_norm(d, dtype),
    )


def init_text_branch(cfg: BranchConfig, vocab_size: int, rng: np.random.Generator,
                     dtype=np.float32, std: float = INIT_STD) -> TextBranchParams:
    """Randomly initialized text branch (normal, std 0.02); no pretrained import."""
    if cfg.max_positions is None:
        raise ValueError("text branch config needs max_positions")
    d = cfg.hidden_dim
    embeddings = TextEmbeddings(
        token_table=parameter(rng.normal(0.0, std, (vocab_size, d)), dtype=dtype),
        position_table=parameter(rng.normal(0.0, std, (cfg.max_positions, d)), dtype=dtype),
        norm=_init_layer_norm(d, dtype),
    )
    layers = [_init_encoder_layer(rng, cfg, dtype, std) for _ in range(cfg.num_layers)]
    return TextBranchParams(embeddings=embeddings, layers=layers)


def init_image_branch(cfg: BranchConfig, feature_dim: int, rng: np.random.Generator,
                      dtype=np.float32, std: float = INIT_STD) -> ImageBranchParams:
    """Image branch; a learned input projection is added only when the
    incoming RoI feature width differs from the branch width."""
    d = cfg.hidden_dim
    input_proj = None if feature_dim == d else _init_linear(rng, feature_dim, d, dtype, std)
    spatial = None
    if cfg.use_spatial:
        spatial = SpatialMLP(fc1=_init_linear(rng, 5, d, dtype, std),
                             fc2=_init_linear(rng, d, d, dtype, std))
    embed_norm = _init_layer_norm(d, dtype)
    layers = [_init_encoder_layer(rng, cfg, dtype, std) for _ in range(cfg.num_layers)]
    return ImageBranchParams(input_proj=input_proj, spatial=spatial,
                             embed_norm=embed_norm, layers=layers)


# -- inputs -------------------------------------------------------------------


@dataclass
class BranchInput:
    """One padded batch for a single branch.

    Text mode: `token_ids` is [batch, seq] ints. Image mode: `features`
    is [batch, objects, feature_dim], `boxes` [batch, objects, 4] in
    pixels and `sizes` [batch, 2] as (width, height). `valid_mask`
    delimits real positions in either mode.
    """

    valid_mask: np.ndarray
    token_ids: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    boxes: Optional[np.ndarray] = None
    sizes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if not self.valid_mask.any(axis=-1).all():
            raise ValueError("every sequence needs at least one valid position")
        if (self.token_ids is None) == (self.features is None):
            raise ValueError("provide exactly one of token_ids (text) or features (image)")
        if self.features is not None:
            if self.boxes is None or self.sizes is None:
                raise ValueError("image input needs boxes and sizes")
            self.features = np.asarray(self.features)
            self.boxes = np.asarray(self.boxes, dtype=np.float64)
            self.sizes = np.asarray(self.sizes, dtype=np.float64)
            for b in range(self.boxes.shape[0]):
                w, h = self.sizes[b]
                for o in range(self.boxes.shape[1]):
                    if self.valid_mask[b, o]:
                        _validate_box(self.boxes[b, o], w, h)
        else:
            self.token_ids = np.asarray(self.token_ids, dtype=np.int64)

    @property
    def is_text(self) -> bool:
        return self.token_ids is not None


def _validate_box(box, width: float, height: float) -> None:
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate box {(x1, y1, x2, y2)}")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise ValueError(
            f"box {(x1, y1, x2, y2)} outside image bounds {(width, height)}"
        )


def normalize_box(box, width: float, height: float) -> np.ndarray:
    """Scale-free 5-d descriptor: corners over image size plus relative area."""
    _validate_box(box, width, height)
    x1, y1, x2, y2 = (float(v) for v in box)
    return np.array([
        x1 / width,
        y1 / height,
        x2 / width,
        y2 / height,
        (x2 - x1) * (y2 - y1) / (width * height),
    ])


def normalize_boxes(boxes: np.ndarray, sizes: np.ndarray,
                    valid_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorized :func:`normalize_box` over [batch, objects, 4] boxes.

    Only positions marked valid are validated; padded slots are assumed
    to carry :data:`PAD_BOX`.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    w = sizes[:, 0][:, None]
    h = sizes[:, 1][:, None]
    if valid_mask is not None:
        for b in range(boxes.shape[0]):
            for o in range(boxes.shape[1]):
                if valid_mask[b, o]:
                    _validate_box(boxes[b, o], sizes[b, 0], sizes[b, 1])
    out = np.empty(boxes.shape[:-1] + (5,), dtype=np.float64)
    out[..., 0] = boxes[..., 0] / w
    out[..., 1] = boxes[..., 1] / h
    out[..., 2] = boxes[..., 2] / w
    out[..., 3] = boxes[..., 3] / h
    out[..., 4] = (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1]) / (w * h)
    return out


# -- forward ------------------------------------------------------------------

_ACTIVATIONS = {
    "gelu": gelu,
    "identity": lambda t: t,
}


def _linear(x: Tensor, p: LinearParams) -> Tensor:
    out = matmul(x, p.weight)
    return out if p.bias is None else out + p.bias


def spatial_embed(nbox, mlp: SpatialMLP) -> Tensor:
    """Embed normalized box descriptors ([..., 5]) into the branch width."""
    arr = np.asarray(nbox, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    act = _ACTIVATIONS[mlp.activation]
    out = _linear(act(_linear(constant(arr, dtype=mlp.fc1.weight.dtype), mlp.fc1)), mlp.fc2)
    return out.reshape(out.shape[1:]) if squeeze else out


def embed_tokens(ids, embeddings: TextEmbeddings, training: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 dropout_p: float = 0.0) -> Tensor:
    """Token + learned positional embedding, layer norm, then dropout.

    `ids` is a single sequence or a [batch, seq] array; position index
    is the 0-based offset within the sequence.
    """
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    batch, seq = ids.shape
    vocab = embeddings.token_table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token id out of range for vocab of size {vocab}")
    if seq > embeddings.position_table.shape[0]:
        raise ValueError(
            f"sequence length {seq} exceeds max positions {embeddings.position_table.shape[0]}"
        )
    d = embeddings.token_table.shape[1]
    tok = take_rows(embeddings.token_table, ids.reshape(-1)).reshape((batch, seq, d))
    pos = take_rows(embeddings.position_table, np.arange(seq))
    x = tok + pos
    x = layer_norm(x, embeddings.norm.gain, embeddings.norm.bias, eps=LN_EPS)
    if training and dropout_p > 0.0:
        x = dropout(x, dropout_p, training, rng)
    return x.reshape((seq, d)) if squeeze else x


def multi_head_self_attention(x: Tensor, mask: np.ndarray, cfg: BranchConfig,
                              params: AttentionParams, training: bool = False,
                              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Scaled dot-product self-attention with `cfg.num_heads` parallel heads.

    `mask` marks valid key positions; masked positions receive zero
    attention everywhere. Outputs at masked query positions are
    unspecified and must not be read downstream.
    """
    squeeze = len(x.shape) == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    batch, seq, d = x.shape
    if d != cfg.hidden_dim:
        raise ValueError(f"input width {d} does not match config hidden_dim {cfg.hidden_dim}")
    heads, head_dim = cfg.num_heads, cfg.head_dim

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape((batch, seq, heads, head_dim)).transpose((0, 2, 1, 3))

    q = split_heads(_linear(x, params.query))
    k = split_heads(_linear(x, params.key))
    v = split_heads(_linear(x, params.value))

    logits = matmul(q, k.swap_last_axes()) * (1.0 / math.sqrt(head_dim))
    attn = softmax_lastdim(logits, mask[:, None, None, :])
    ctx = matmul(attn, v).transpose((0, 2, 1, 3)).reshape((batch, seq, d))
    out = _linear(ctx, params.output)
    return out.reshape((seq, d)) if squeeze else out


def encoder_layer(x: Tensor, mask: np.ndarray, cfg: BranchConfig,
                  params: EncoderLayerParams, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Post-norm encoder block: residual attention, then residual GELU FFN."""
    attn = multi_head_self_attention(x, mask, cfg, params.attention, training, rng)
    if training and cfg.dropout_p > 0.0:
        attn = dropout(attn, cfg.dropout_p, training, rng)
    x = layer_norm(x + attn, params.attention_norm.gain, params.attention_norm.bias, eps=LN_EPS)
    ffn = _linear(gelu(_linear(x, params.ffn_in)), params.ffn_out)
    if training and cfg.dropout_p > 0.0:
        ffn = dropout(ffn, cfg.dropout_p, training, rng)
    return layer_norm(x + ffn, params.ffn_norm.gain, params.ffn_norm.bias, eps=LN_EPS)


def encode_branch(inputs: BranchInput, cfg: BranchConfig, params, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run the full branch: embedding stage, then `cfg.num_layers` encoder layers.

    Returns final hidden states [batch, seq, hidden_dim]; values at
    padded positions are unspecified.
    """
    if inputs.is_text:
        if not isinstance(params, TextBranchParams):
            raise TypeError("text input requires TextBranchParams")
        x = embed_tokens(inputs.token_ids, params.embeddings, training, rng, cfg.dropout_p)
    else:
        if not isinstance(params, ImageBranchParams):
            raise TypeError("image input requires ImageBranchParams")
        feats = constant(inputs.features,
                         dtype=params.embed_norm.gain.dtype)
        x = _linear(feats, params.input_proj) if params.input_proj is not None else feats
        if cfg.use_spatial:
            if params.spatial is None:
                raise ValueError("use_spatial set but no spatial MLP parameters")
            nboxes = normalize_boxes(inputs.boxes, inputs.sizes, inputs.valid_mask)
            x = x + spatial_embed(nboxes, params.spatial)
        x = layer_norm(x, params.embed_norm.gain, params.embed_norm.bias, eps=LN_EPS)
        if training and cfg.dropout_p > 0.0:
            x = dropout(x, cfg.dropout_p, training, rng)
    if len(params.layers) != cfg.num_layers:
        raise ValueError(
            f"parameter stack has {len(params.layers)} layers, config says {cfg.num_layers}"
        )
    for layer in params.layers:
        x = encoder_layer(x, inputs.valid_mask, cfg, layer, training, rng)
    return x
