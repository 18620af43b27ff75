"""A small deterministic transformer executor with activation capture.

The stack is pre-norm::

    h' = h + Attn(LN(h))
    h  = h' + MLP(LN(h'))

Residual additions belong to the layer wrapper, so the profiled components are
exactly the norms, the attention core, the MLP core, the embedding lookup and
the LM-head projection.  A forward pass records the input of each of those
components in an :class:`ActivationStore`; :func:`run_component` re-executes
any one of them in isolation on its stored input.

Half precision is emulated: every op result is rounded to the nearest
half-precision value (ties to even) while dot products accumulate in float32.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from compenergy import ops
from compenergy.errors import AddressingError, ConfigError, InputError

LN_EPS = 1e-5
INIT_SCALE = 0.02

# tanh-approximate GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
GELU_C0 = math.sqrt(2.0 / math.pi)
GELU_C1 = 0.044715
# scalar ops per element of gelu() below; tanh itself is 1 exp + 2 muladds + 1 div
GELU_MULADDS = 8
GELU_EXPS = 1
GELU_DIVS = 1


class Arch(str, enum.Enum):
    ENCODER_ONLY = "encoder_only"
    DECODER_ONLY = "decoder_only"


class Precision(str, enum.Enum):
    FP32 = "fp32"
    FP16 = "fp16"


class Mask(str, enum.Enum):
    DENSE = "dense"
    CAUSAL = "causal"


class ComponentKind(str, enum.Enum):
    EMBEDDING = "embedding"
    PRE_ATTN_NORM = "pre_attn_norm"
    ATTENTION = "attention"
    PRE_MLP_NORM = "pre_mlp_norm"
    MLP = "mlp"
    FINAL_NORM = "final_norm"
    LM_HEAD = "lm_head"

    @property
    def in_layer(self) -> bool:
        return self in _LAYER_KINDS

    @property
    def is_norm(self) -> bool:
        return self in (ComponentKind.PRE_ATTN_NORM, ComponentKind.PRE_MLP_NORM,
                        ComponentKind.FINAL_NORM)


_LAYER_KINDS = (ComponentKind.PRE_ATTN_NORM, ComponentKind.ATTENTION,
                ComponentKind.PRE_MLP_NORM, ComponentKind.MLP)


@dataclass(frozen=True)
class ModelConfig:
    arch: Arch = Arch.ENCODER_ONLY
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 512
    max_seq_len: int = 128
    precision: Precision = Precision.FP16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch", _enum(Arch, self.arch, "arch"))
        object.__setattr__(self, "precision", _enum(Precision, self.precision, "precision"))
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim",
                     "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            floor = 0 if name == "num_layers" else 1
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < floor:
                raise ConfigError(f"{name} must be an integer >= {floor}, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim ({self.hidden_dim}) is not divisible by num_heads ({self.num_heads})")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def half(self) -> bool:
        return self.precision is Precision.FP16

    @property
    def mask(self) -> Mask:
        return Mask.CAUSAL if self.arch is Arch.DECODER_ONLY else Mask.DENSE

    def lm_rows(self, seq_len: int) -> int:
        """Rows projected by the LM head: the last position only for decoders."""
        return 1 if self.arch is Arch.DECODER_ONLY else seq_len

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["arch"] = self.arch.value
        d["precision"] = self.precision.value
        return d


def _enum(cls, value, name):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"{name} must be one of {choices}, got {value!r}") from None


@dataclass(frozen=True, order=True)
class ComponentId:
    """Address of a profiled component.  ``layer`` is None outside the layer stack."""

    layer: int | None
    kind: ComponentKind

    def __post_init__(self):
        object.__setattr__(self, "kind", ComponentKind(self.kind))
        if self.kind.in_layer:
            if self.layer is None or self.layer < 0:
                raise AddressingError(f"{self.kind.value} needs a layer index")
        elif self.layer is not None:
            raise AddressingError(f"{self.kind.value} is not inside a layer")

    @property
    def label(self) -> str:
        if self.layer is None:
            return self.kind.value
        return f"layer{self.layer}.{self.kind.value}"

    @classmethod
    def parse(cls, label: str) -> "ComponentId":
        if "." in label:
            prefix, kind = label.split(".", 1)
            if not prefix.startswith("layer") or not prefix[5:].isdigit():
                raise AddressingError(f"bad component label {label!r}")
            return cls(int(prefix[5:]), ComponentKind(kind))
        return cls(None, ComponentKind(label))

    def __str__(self):
        return self.label


def profiled_components(config: ModelConfig) -> list[ComponentId]:
    """All profiled components in execution order (4*L + 3 of them)."""
    ids = [ComponentId(None, ComponentKind.EMBEDDING)]
    for layer in range(config.num_layers):
        ids.extend(ComponentId(layer, kind) for kind in _LAYER_KINDS)
    ids.append(ComponentId(None, ComponentKind.FINAL_NORM))
    ids.append(ComponentId(None, ComponentKind.LM_HEAD))
    return ids


@dataclass(frozen=True)
class NormWeights:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    num_heads: int


@dataclass(frozen=True)
class MlpWeights:
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class LayerWeights:
    attn_norm: NormWeights
    attn: AttentionWeights
    mlp_norm: NormWeights
    mlp: MlpWeights


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: NormWeights
    lm_head_weight: np.ndarray

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "embed.tokens", self.token_embedding
        yield "embed.positions", self.position_embedding
        for i, lw in enumerate(self.layers):
            p = f"layers.{i}."
            yield p + "attn_norm.gamma", lw.attn_norm.gamma
            yield p + "attn_norm.beta", lw.attn_norm.beta
            for name in ("wq", "wk", "wv", "wo"):
                yield p + "attn." + name, getattr(lw.attn, name)
            yield p + "mlp_norm.gamma", lw.mlp_norm.gamma
            yield p + "mlp_norm.beta", lw.mlp_norm.beta
            yield p + "mlp.w1", lw.mlp.w1
            yield p + "mlp.w2", lw.mlp.w2
        yield "final_norm.gamma", self.final_norm.gamma
        yield "final_norm.beta", self.final_norm.beta
        yield "lm_head.weight", self.lm_head_weight

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()


def build_model(config: ModelConfig) -> Model:
    """Allocate all weights, drawn uniformly in [-0.02, 0.02] from ``config.seed``.

    Norm gains are ``1 + u`` so the stack keeps unit-scale activations.
    Under FP16 every weight is rounded to half precision.
    """
    rng = np.random.default_rng(int(config.seed))
    half = config.half
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size

    def uniform(*shape, offset=0.0):
        w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape) + offset
        return ops.store(w, half)

    def norm():
        return NormWeights(gamma=uniform(d, offset=1.0), beta=uniform(d))

    token_embedding = uniform(v, d)
    position_embedding = uniform(config.max_seq_len, d)
    layers = []
    for _ in range(config.num_layers):
        attn_norm = norm()
        attn = AttentionWeights(uniform(d, d), uniform(d, d), uniform(d, d), uniform(d, d),
                                config.num_heads)
        mlp_norm = norm()
        mlp = MlpWeights(uniform(d, f), uniform(f, d))
        layers.append(LayerWeights(attn_norm, attn, mlp_norm, mlp))
    final_norm = norm()
    lm_head_weight = uniform(v, d)
    return Model(config, token_embedding, position_embedding, tuple(layers), final_norm,
                 lm_head_weight)


# -- component ops ----------------------------------------------------------

def embed(model: Model, tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    """Rows ``E[tokens[t]] + P[t]``; shape (seq_len, hidden_dim)."""
    ids = _check_tokens(model.config, tokens)
    rows = model.token_embedding[ids]
    return ops.add(rows, model.position_embedding[: len(ids)], model.config.half)


def _split_heads(t: np.ndarray, heads: int, transpose_last: bool = False) -> np.ndarray:
    seq, d = t.shape
    order = (1, 2, 0) if transpose_last else (1, 0, 2)
    return np.ascontiguousarray(t.reshape(seq, heads, d // heads).transpose(order))


def _softmax_scores(q: np.ndarray, k: np.ndarray, heads: int, mask: Mask,
                    half: bool) -> np.ndarray:
    """Per-head softmax(QK^T / sqrt(d_k)) with max-subtraction, shape (h, seq, seq).

    Causal masking is applied after the dense score computation, so masked
    positions are computed and then suppressed to an exact zero weight.
    """
    seq, d = q.shape
    scores = ops.matmul(_split_heads(q, heads), _split_heads(k, heads, True), half)
    scores = ops.div(scores, np.float32(math.sqrt(d // heads)), half)
    if mask is Mask.CAUSAL:
        future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
        scores = np.where(future, np.float32(-np.inf), scores)
    e = ops.exp(scores - scores.max(axis=-1, keepdims=True), half)
    return ops.div(e, e.sum(axis=-1, keepdims=True, dtype=np.float32), half)


def attention_block(x: np.ndarray, weights: AttentionWeights, mask: Mask | str,
                    half: bool = False) -> np.ndarray:
    """Multi-head scaled dot-product attention followed by the output projection."""
    mask = Mask(mask)
    if x.ndim != 2 or x.shape[1] != weights.wq.shape[0]:
        raise ValueError(f"attention input shape {x.shape} does not match weights")
    seq, d = x.shape
    h = weights.num_heads
    q = ops.matmul(x, weights.wq, half)
    k = ops.matmul(x, weights.wk, half)
    v = ops.matmul(x, weights.wv, half)
    probs = _softmax_scores(q, k, h, mask, half)
    ctx = ops.matmul(probs, _split_heads(v, h), half)
    ctx = np.ascontiguousarray(ctx.transpose(1, 0, 2).reshape(seq, d))
    return ops.matmul(ctx, weights.wo, half)


def attention_weights(x: np.ndarray, weights: AttentionWeights, mask: Mask | str,
                      half: bool = False) -> np.ndarray:
    """The softmax weights attention_block uses, shape (heads, seq, seq)."""
    q = ops.matmul(x, weights.wq, half)
    k = ops.matmul(x, weights.wk, half)
    return _softmax_scores(q, k, weights.num_heads, Mask(mask), half)


def gelu(x: np.ndarray, half: bool = False) -> np.ndarray:
    """tanh-approximate GELU built from tallied primitives (8 muladds, 1 exp, 1 div)."""
    x2 = ops.mul(x, x, half)
    poly = ops.fma(np.float32(GELU_C1), x2, np.float32(1.0), half)
    cx = ops.mul(np.float32(GELU_C0), x, half)
    y = ops.mul(cx, poly, half)
    # tanh(y) = 1 - 2 / (exp(2y) + 1)
    u = ops.exp(ops.mul(np.float32(2.0), y, half), half)
    r = ops.div(np.float32(1.0), ops.store(u + np.float32(1.0), half), half)
    t = ops.fma(np.float32(-2.0), r, np.float32(1.0), half)
    hx = ops.mul(np.float32(0.5), x, half)
    return ops.fma(hx, t, hx, half)


def mlp_block(x: np.ndarray, weights: MlpWeights, half: bool = False) -> np.ndarray:
    """``GELU(x @ W1) @ W2``; shape preserved."""
    if x.ndim != 2 or x.shape[1] != weights.w1.shape[0]:
        raise ValueError(f"mlp input shape {x.shape} does not match weights")
    return ops.matmul(gelu(ops.matmul(x, weights.w1, half), half), weights.w2, half)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS,
               half: bool = False) -> np.ndarray:
    """Row-wise LayerNorm.  With ``half`` the input is cast to single precision,
    normalized there, and cast back, mirroring mixed-precision frameworks."""
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"norm input shape {x.shape} does not match weights")
    xs = ops.to_single(x) if half else x
    centered = xs - xs.mean(axis=-1, keepdims=True, dtype=np.float32)
    var = ops.row_dot(centered, centered) / np.float32(x.shape[1])
    normed = ops.div(centered, np.sqrt(var + np.float32(eps)))
    out = ops.fma(normed, gamma, beta)
    return ops.to_half(out) if half else out


def lm_head(x: np.ndarray, weight: np.ndarray, half: bool = False) -> np.ndarray:
    """Logits ``x @ W_LM^T``; the output softmax is not part of the component."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"lm_head input shape {x.shape} does not match weights")
    return ops.matmul(x, np.ascontiguousarray(weight.T), half)


# -- forward pass and replay ------------------------------------------------

@dataclass
class ActivationStore:
    """Input activation of every profiled component from one forward pass."""

    entries: dict[ComponentId, np.ndarray] = field(default_factory=dict)
    outputs: dict[ComponentId, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, cid: ComponentId) -> np.ndarray:
        try:
            return self.entries[cid]
        except KeyError:
            raise AddressingError(f"no cached activation for {cid}") from None

    def __contains__(self, cid) -> bool:
        return cid in self.entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def seq_len(self) -> int:
        return len(self.entries[ComponentId(None, ComponentKind.EMBEDDING)])


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.size > config.max_seq_len:
        raise InputError(f"sequence of {ids.size} tokens exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    return ids.astype(np.int64)


def run_component(model: Model, cid: ComponentId, x: np.ndarray) -> np.ndarray:
    """Execute one component on ``x``; a pure function of (weights, input)."""
    cfg = model.config
    half = cfg.half
    kind = cid.kind
    if cid.layer is not None and cid.layer >= cfg.num_layers:
        raise AddressingError(f"{cid} is outside a {cfg.num_layers}-layer model")
    x = np.asarray(x)
    if kind is ComponentKind.EMBEDDING:
        if x.ndim != 1:
            raise AddressingError(f"{cid} expects a 1-D token array, got shape {x.shape}")
        with ops.component_scope(cid.label):
            return embed(model, x)
    if x.ndim != 2 or x.shape[1] != cfg.hidden_dim or not 1 <= x.shape[0] <= cfg.max_seq_len:
        raise AddressingError(
            f"{cid} expects input of shape (seq_len, {cfg.hidden_dim}), got {x.shape}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    with ops.component_scope(cid.label):
        if kind is ComponentKind.LM_HEAD:
            rows = x[-cfg.lm_rows(x.shape[0]):]
            return lm_head(np.ascontiguousarray(rows), model.lm_head_weight, half)
        if kind is ComponentKind.FINAL_NORM:
            nw = model.final_norm
            return layer_norm(x, nw.gamma, nw.beta, half=half)
        lw = model.layers[cid.layer]
        if kind is ComponentKind.PRE_ATTN_NORM:
            return layer_norm(x, lw.attn_norm.gamma, lw.attn_norm.beta, half=half)
        if kind is ComponentKind.PRE_MLP_NORM:
            return layer_norm(x, lw.mlp_norm.gamma, lw.mlp_norm.beta, half=half)
        if kind is ComponentKind.ATTENTION:
            return attention_block(x, lw.attn, cfg.mask, half)
        if kind is ComponentKind.MLP:
            return mlp_block(x, lw.mlp, half)
    raise AddressingError(f"unknown component {cid!r}")


def forward_and_cache(model: Model, tokens) -> tuple[np.ndarray, ActivationStore]:
    """Full forward pass; returns logits and the activation store.

    Logits have shape (1, vocab) for decoders (last position only) and
    (seq_len, vocab) for encoders.
    """
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    store = ActivationStore()

    def step(cid, x):
        store.entries[cid] = np.array(x, copy=True)
        out = run_component(model, cid, store.entries[cid])
        store.outputs[cid] = out
        return out

    h = step(ComponentId(None, ComponentKind.EMBEDDING), ids)
    for layer in range(cfg.num_layers):
        a = step(ComponentId(layer, ComponentKind.PRE_ATTN_NORM), h)
        h = ops.store(h + step(ComponentId(layer, ComponentKind.ATTENTION), a), cfg.half)
        b = step(ComponentId(layer, ComponentKind.PRE_MLP_NORM), h)
        h = ops.store(h + step(ComponentId(layer, ComponentKind.MLP), b), cfg.half)
    f = step(ComponentId(None, ComponentKind.FINAL_NORM), h)
    logits = step(ComponentId(None, ComponentKind.LM_HEAD), f)
    return logits, store
