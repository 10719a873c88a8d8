"""Post-LN Transformer encoder with tied output embeddings and a projection head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import CLS_ID

# attention logit offset for padded keys; finite so the op stays finite-checked
_MASK_OFFSET = -1e9


def scaled_layer(num_layers: int, reference_layer: int, reference_depth: int = 12) -> int:
    return max(1, min(num_layers, math.ceil(num_layers * reference_layer / reference_depth)))


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_size: int = 64
    ffn_size: int = 256
    num_heads: int = 4
    vocab_size: int = 605
    max_positions: int = 64
    universal_layer: int | None = None
    retrieval_layer: int | None = None
    projection_dim: int = 64

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "ffn_size", "num_heads", "vocab_size",
                     "max_positions", "projection_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        # 8-of-12 and 7-of-12 scaled to this depth
        if self.universal_layer is None:
            object.__setattr__(self, "universal_layer", scaled_layer(self.num_layers, 8))
        if self.retrieval_layer is None:
            object.__setattr__(self, "retrieval_layer", scaled_layer(self.num_layers, 7))
        for name in ("universal_layer", "retrieval_layer"):
            v = getattr(self, name)
            if not 1 <= v <= self.num_layers:
                raise ValueError(f"{name} must lie in [1, {self.num_layers}], got {v}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden_size, config.ffn_size
    shapes = {
        "tok_emb": (config.vocab_size, h),
        "pos_emb": (config.max_positions, h),
        "emb_ln.gamma": (h,),
        "emb_ln.beta": (h,),
    }
    for i in range(1, config.num_layers + 1):
        p = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (h, h)
            shapes[p + f"attn.b{w}"] = (h,)
        shapes[p + "ln1.gamma"] = (h,)
        shapes[p + "ln1.beta"] = (h,)
        shapes[p + "ffn.w1"] = (h, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, h)
        shapes[p + "ffn.b2"] = (h,)
        shapes[p + "ln2.gamma"] = (h,)
        shapes[p + "ln2.beta"] = (h,)
    shapes["proj.weight"] = (h, config.projection_dim)
    return shapes


class EncoderParams:
    """Named learnable tensors of one encoder, in a fixed canonical order."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ValueError(f"parameter names do not match config: {sorted(missing) or 'order differs'}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, init_range: float = 0.02) -> "EncoderParams":
        """Weight matrices ~ U[-init_range, init_range]; biases 0; LN gains 1."""
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gamma"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                data = rng.uniform(-init_range, init_range, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad, name=k)
                                           for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in parameter_shapes(self.config).values())


@dataclass
class HiddenStates:
    """``layers[0]`` is the embedding output, ``layers[i]`` the output of layer i."""

    layers: list[Tensor]
    mask: np.ndarray

    @property
    def batched(self) -> bool:
        return self.mask.ndim == 2

    def __len__(self) -> int:
        return len(self.layers)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def _attention(params: EncoderParams, prefix: str, x: Tensor, bias: np.ndarray) -> Tensor:
    cfg = params.config
    b, t, h = x.shape
    nh, dh = cfg.num_heads, cfg.head_dim

    def heads(name):
        y = _linear(x, params[prefix + "w" + name], params[prefix + "b" + name])
        return ag.transpose(ag.reshape(y, (b, t, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ag.softmax(ag.add(scores, Tensor(bias)), axis=-1)
    ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (b, t, h))
    return _linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def encode(params: EncoderParams, tokens, attention_mask=None) -> HiddenStates:
    """Run the encoder over ``(T,)`` or ``(B, T)`` token ids.

    Padding positions (``attention_mask`` False) are excluded as attention
    keys. Every sequence must start with [CLS].
    """
    cfg = params.config
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError(f"encode: tokens must be a nonempty (T,) or (B, T) array, got shape {ids.shape}")
    mask = np.ones(ids.shape, dtype=bool) if attention_mask is None else np.asarray(attention_mask, dtype=bool)
    if single and mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != ids.shape:
        raise ValueError(f"encode: mask shape {mask.shape} does not match tokens {ids.shape}")
    if ids.shape[1] > cfg.max_positions:
        raise ValueError(f"encode: sequence length {ids.shape[1]} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
        raise ValueError(f"encode: unknown token id {bad} (vocab size {cfg.vocab_size})")
    if np.any(ids[:, 0] != CLS_ID):
        raise ValueError("encode: every sequence must start with the [CLS] id")

    b, t = ids.shape
    x = ag.add(ag.embedding_lookup(params["tok_emb"], ids), ag.getitem(params["pos_emb"], slice(0, t)))
    x = ag.layer_norm(x, params["emb_ln.gamma"], params["emb_ln.beta"])
    layers = [x]
    bias = np.where(mask, 0.0, _MASK_OFFSET)[:, None, None, :]
    for i in range(1, cfg.num_layers + 1):
        p = f"layer{i}."
        a = _attention(params, p + "attn.", x, bias)
        x = ag.layer_norm(ag.add(x, a), params[p + "ln1.gamma"], params[p + "ln1.beta"])
        f = _linear(ag.gelu(_linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"])),
                    params[p + "ffn.w2"], params[p + "ffn.b2"])
        x = ag.layer_norm(ag.add(x, f), params[p + "ln2.gamma"], params[p + "ln2.beta"])
        layers.append(x)
    if single:
        layers = [ag.reshape(l, (t, cfg.hidden_size)) for l in layers]
        mask = mask[0]
    return HiddenStates(layers, mask)


def _check_layer(hidden: HiddenStates, layer: int) -> None:
    if not 0 <= layer < len(hidden.layers):
        raise IndexError(f"layer {layer} out of range [0, {len(hidden.layers) - 1}]")


def sequence_repr(hidden: HiddenStates, layer: int, params: EncoderParams) -> Tensor:
    """Projected [CLS] vector at ``layer``: ``(P,)`` or ``(B, P)``."""
    _check_layer(hidden, layer)
    h = hidden.layers[layer]
    cls = ag.getitem(h, (slice(None), 0) if hidden.batched else (slice(0, 1),))
    out = ag.matmul(cls, params["proj.weight"]) if hidden.batched else \
        ag.reshape(ag.matmul(cls, params["proj.weight"]), (params.config.projection_dim,))
    return out


def token_logits(hidden: HiddenStates, position, params: EncoderParams) -> Tensor:
    """Scores over the vocabulary from last-layer vectors, tied to ``tok_emb``.

    ``position`` is an int or int array for an unbatched sequence, or a pair
    ``(batch_indices, positions)`` for a batch.
    """
    last = hidden.layers[-1]
    if hidden.batched:
        rows, cols = (np.asarray(a, dtype=np.int64) for a in position)
        if rows.shape != cols.shape:
            raise ValueError("token_logits: batch and position index arrays differ in shape")
        if cols.size and (cols.min() < 0 or cols.max() >= last.shape[1] or rows.min() < 0
                          or rows.max() >= last.shape[0]):
            raise IndexError(f"token_logits: position out of range for hidden {last.shape[:2]}")
        vecs = ag.getitem(last, (rows, cols))
    else:
        pos = np.asarray(position, dtype=np.int64)
        if pos.size and (pos.min() < 0 or pos.max() >= last.shape[0]):
            raise IndexError(f"token_logits: position {position} out of range for length {last.shape[0]}")
        vecs = ag.getitem(last, pos)
    emb = params["tok_emb"]
    if vecs.ndim == 1:
        return ag.reshape(ag.matmul(ag.reshape(vecs, (1, -1)), ag.transpose(emb, (1, 0))), (emb.shape[0],))
    return ag.matmul(vecs, ag.transpose(emb, (1, 0)))


def layer_mean_repr(hidden: HiddenStates, layer: int, attention_mask=None) -> Tensor:
    """Mean of ``hidden.layers[layer]`` over non-padding positions."""
    _check_layer(hidden, layer)
    mask = hidden.mask if attention_mask is None else np.asarray(attention_mask, dtype=bool)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("layer_mean_repr: attention mask has no unpadded position")
    weights = Tensor((mask / counts)[..., None])
    return ag.sum(ag.mul(hidden.layers[layer], weights), axis=-2)
