"""Desk-scale encoder-decoder transformer with grouped parameters.

Every trainable tensor belongs to exactly one of five groups: the encoder,
the decoder self-attention blocks, the decoder cross-attention blocks, the
decoder feed-forward blocks, and the output projection. The token
embedding is tied to the output projection (one tensor object) and lives
in the output-projection group, as do the final decoder layer norm; each
per-block layer norm belongs to the block it precedes.

The decoder supports a zeroed-encoder mode in which cross-attention reads
an all-zero feature matrix, so it behaves as a pure conditional language
model that never sees audio.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


class ParamGroup(str, Enum):
    ENCODER = "encoder"
    DECODER_SELF_ATTN = "decoder_self_attn"
    DECODER_CROSS_ATTN = "decoder_cross_attn"
    DECODER_FFN = "decoder_ffn"
    OUTPUT_PROJ = "output_proj"


ALL_GROUPS = frozenset(ParamGroup)


class _Zeroed:
    """Sentinel: run cross-attention over an all-zero feature matrix."""

    def __repr__(self):
        return "ZEROED"


ZEROED = _Zeroed()


@dataclass(frozen=True)
class Hyperparams:
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    vocab_size: int = 64
    input_dim: int = 16
    max_frames: int = 96
    max_tokens: int = 48
    zeroed_frames: int = 1
    learned_positions: bool = False

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "enc_layers", "dec_layers", "ffn_dim",
                     "vocab_size", "input_dim", "max_frames", "max_tokens",
                     "zeroed_frames"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"hyperparameter {name} must be an integer >= 1, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        hp = cls(**d)
        hp.validate()
        return hp


@functools.lru_cache(maxsize=32)
def sinusoid_positions(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal position table, (n, d), float64, read-only."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    table = np.zeros((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d - d // 2])
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=64)
def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 on/below the diagonal, -1e30 above."""
    m = np.triu(np.full((n, n), -1e30, dtype=np.float64), k=1)
    m.setflags(write=False)
    return m


class ModelParams:
    """Named parameter map plus hyperparameters and checkpoint lineage."""

    def __init__(self, hp: Hyperparams, tensors: dict[str, Tensor],
                 groups: dict[str, ParamGroup], lineage: list[str], seed: int):
        self.hp = hp
        self.tensors = tensors
        self.groups = groups
        self.lineage = lineage
        self.seed = seed

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def names_in_group(self, group: ParamGroup) -> list[str]:
        return [n for n, g in self.groups.items() if g is group]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        tensors = {}
        for name, t in self.tensors.items():
            nt = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            tensors[name] = nt
        return ModelParams(self.hp, tensors, dict(self.groups), list(self.lineage), self.seed)

    def set_trainable(self, groups: frozenset[ParamGroup]) -> None:
        for name, t in self.tensors.items():
            trainable = self.groups[name] in groups
            t.requires_grad = trainable
            t.data.setflags(write=trainable)

    def unfreeze_all(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.data.setflags(write=True)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _attn_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{r}" for r in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_model(hp: Hyperparams, seed: int) -> ModelParams:
    """Seeded deterministic initialization; same seed gives identical bytes.

    Weight matrices are uniform on +-1/sqrt(fan_in); biases start at zero,
    layer-norm gains at one.
    """
    hp.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    groups: dict[str, ParamGroup] = {}

    def mat(name, rows, cols, group):
        bound = 1.0 / np.sqrt(rows)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=(rows, cols)))
        groups[name] = group

    def vec(name, size, group, fill=0.0):
        tensors[name] = Tensor(np.full(size, fill, dtype=np.float64))
        groups[name] = group

    def norm(prefix, group):
        vec(f"{prefix}.g", hp.d_model, group, fill=1.0)
        vec(f"{prefix}.b", hp.d_model, group, fill=0.0)

    def attn_block(prefix, group):
        for r in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}.{r}", hp.d_model, hp.d_model, group)
        for r in ("bq", "bk", "bv", "bo"):
            vec(f"{prefix}.{r}", hp.d_model, group)

    def ffn_block(prefix, group):
        mat(f"{prefix}.w1", hp.d_model, hp.ffn_dim, group)
        vec(f"{prefix}.b1", hp.ffn_dim, group)
        mat(f"{prefix}.w2", hp.ffn_dim, hp.d_model, group)
        vec(f"{prefix}.b2", hp.d_model, group)

    mat("enc.in_proj.w", hp.input_dim, hp.d_model, ParamGroup.ENCODER)
    vec("enc.in_proj.b", hp.d_model, ParamGroup.ENCODER)
    if hp.learned_positions:
        mat("enc.pos", hp.max_frames, hp.d_model, ParamGroup.ENCODER)
    for i in range(hp.enc_layers):
        norm(f"enc.{i}.ln1", ParamGroup.ENCODER)
        attn_block(f"enc.{i}.attn", ParamGroup.ENCODER)
        norm(f"enc.{i}.ln2", ParamGroup.ENCODER)
        ffn_block(f"enc.{i}.ffn", ParamGroup.ENCODER)
    norm("enc.ln_f", ParamGroup.ENCODER)

    mat("dec.embed", hp.vocab_size, hp.d_model, ParamGroup.OUTPUT_PROJ)
    if hp.learned_positions:
        mat("dec.pos", hp.max_tokens, hp.d_model, ParamGroup.DECODER_SELF_ATTN)
    for i in range(hp.dec_layers):
        norm(f"dec.{i}.ln_sa", ParamGroup.DECODER_SELF_ATTN)
        attn_block(f"dec.{i}.self", ParamGroup.DECODER_SELF_ATTN)
        norm(f"dec.{i}.ln_ca", ParamGroup.DECODER_CROSS_ATTN)
        attn_block(f"dec.{i}.cross", ParamGroup.DECODER_CROSS_ATTN)
        norm(f"dec.{i}.ln_ff", ParamGroup.DECODER_FFN)
        ffn_block(f"dec.{i}.ffn", ParamGroup.DECODER_FFN)
    norm("dec.ln_f", ParamGroup.OUTPUT_PROJ)

    return ModelParams(hp, tensors, groups, ["init"], seed)


# ---------------------------------------------------------------------------
# forward passes


def multi_head_attention(p: ModelParams, prefix: str, x_q: Tensor, x_kv: Tensor,
                         mask: np.ndarray | None = None) -> Tensor:
    """Standard scaled dot-product attention over `n_heads` column slices."""
    hp = p.hp
    d_head = hp.d_model // hp.n_heads
    q = T.add_bias(T.matmul(x_q, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = T.add_bias(T.matmul(x_kv, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = T.add_bias(T.matmul(x_kv, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    heads = []
    for h in range(hp.n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(d_head))
        if mask is not None:
            scores = T.add(scores, Tensor._wrap(mask))
        att = T.softmax(scores, axis=-1)
        heads.append(T.matmul(att, vh))
    ctx = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    return T.add_bias(T.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _ffn(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.add_bias(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return T.add_bias(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _ln(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def encode(p: ModelParams, features: np.ndarray) -> Tensor:
    """Encoder stack over (L, input_dim) synthetic acoustic features."""
    hp = p.hp
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != hp.input_dim:
        raise ShapeError(f"features must be (L, {hp.input_dim}), got {feats.shape}")
    n_frames = feats.shape[0]
    if n_frames < 1:
        raise ShapeError("features need at least one frame")
    if n_frames > hp.max_frames:
        raise ShapeError(f"{n_frames} frames exceeds max_frames={hp.max_frames}")
    h = T.add_bias(T.matmul(Tensor(feats), p["enc.in_proj.w"]), p["enc.in_proj.b"])
    if hp.learned_positions:
        h = T.add(h, T.slice_rows(p["enc.pos"], n_frames))
    else:
        h = T.add(h, Tensor._wrap(sinusoid_positions(hp.max_frames, hp.d_model)[:n_frames]))
    for i in range(hp.enc_layers):
        a_in = _ln(p, f"enc.{i}.ln1", h)
        h = T.add(h, multi_head_attention(p, f"enc.{i}.attn", a_in, a_in))
        h = T.add(h, _ffn(p, f"enc.{i}.ffn", _ln(p, f"enc.{i}.ln2", h)))
    return _ln(p, "enc.ln_f", h)


def decoder_logits(p: ModelParams, prefix_ids, enc) -> Tensor:
    """Causal decoder forward returning (T, V) logits.

    `enc` is either the encoder output tensor or the ZEROED sentinel, in
    which case cross-attention consumes an all-zero (zeroed_frames, d)
    matrix and the result is independent of any audio.
    """
    hp = p.hp
    ids = list(prefix_ids)
    n = len(ids)
    if n < 1:
        raise ShapeError("decoder prefix must contain at least one token")
    if n > hp.max_tokens:
        raise ShapeError(f"prefix length {n} exceeds max_tokens={hp.max_tokens}")
    if enc is ZEROED:
        enc_t = Tensor(np.zeros((hp.zeroed_frames, hp.d_model)))
    elif isinstance(enc, Tensor):
        if enc.data.ndim != 2 or enc.shape[1] != hp.d_model:
            raise ShapeError(f"encoder output must be (L, {hp.d_model}), got {enc.shape}")
        enc_t = enc
    else:
        raise ShapeError("enc must be an encoder-output Tensor or ZEROED")
    embed = p["dec.embed"]
    h = T.embedding(embed, ids)
    if hp.learned_positions:
        h = T.add(h, T.slice_rows(p["dec.pos"], n))
    else:
        h = T.add(h, Tensor._wrap(sinusoid_positions(hp.max_tokens, hp.d_model)[:n]))
    mask = causal_mask(n)
    for i in range(hp.dec_layers):
        sa_in = _ln(p, f"dec.{i}.ln_sa", h)
        h = T.add(h, multi_head_attention(p, f"dec.{i}.self", sa_in, sa_in, mask))
        h = T.add(h, multi_head_attention(p, f"dec.{i}.cross",
                                          _ln(p, f"dec.{i}.ln_ca", h), enc_t))
        h = T.add(h, _ffn(p, f"dec.{i}.ffn", _ln(p, f"dec.{i}.ln_ff", h)))
    h = _ln(p, "dec.ln_f", h)
    return T.matmul(h, T.transpose(embed))


@dataclass
class EncodedExample:
    """Teacher-forcing pair: decoder input ids and right-shifted targets.

    Target positions equal to `pad_id` are ignored by the loss (used to
    mask the force-fed prompt prediction). `features` is None for
    text-only examples.
    """

    input_ids: list[int]
    target_ids: list[int]
    features: np.ndarray | None = None


def loss_stage(p: ModelParams, batch: list[EncodedExample], stage: int,
               pad_id: int) -> Tensor:
    """Mean next-token cross-entropy over the batch for one stage.

    Stage 1 zeroes the encoder (audio, if present, is ignored with a
    warning); stages 2 and 3 encode real features. The loss formula is
    identical across stages; stages differ only in what the trainer
    freezes.
    """
    if stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
    if not batch:
        raise DataError("empty batch")
    if stage == 1 and any(ex.features is not None for ex in batch):
        warnings.warn("stage 1 is text-only; audio features in batch are ignored",
                      stacklevel=2)
    total = None
    n_total = 0
    for ex in batch:
        if stage == 1:
            enc = ZEROED
        else:
            if ex.features is None:
                raise DataError(f"stage {stage} requires paired audio features")
            enc = encode(p, ex.features)
        logits = decoder_logits(p, ex.input_ids, enc)
        ce = T.cross_entropy(logits, ex.target_ids, ignore_index=pad_id)
        n = sum(1 for t in ex.target_ids if t != pad_id)
        n_total += n
        piece = T.scale(ce, float(n))
        total = piece if total is None else T.add(total, piece)
    return T.scale(total, 1.0 / n_total)
