"""From-scratch transformer encoder with exact analytic gradients.

Classical post-layer-norm recipe: token + learned position embeddings,
then per layer {multi-head scaled dot-product self-attention with pad
masking, residual, layer norm, GELU feed-forward, residual, layer norm}.
Attention logits to pad keys are forced to -inf so pad weights are exact
zeros and real positions are invariant to the pad tail.

All math runs in the dtype of the parameters: float32 for training,
float64 (via ``Parameters.astype``) for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .seeding import named_rng
from .tokenizer import TokenSequence

if TYPE_CHECKING:
    from .train import MaskPlan

MODES = ("mlm", "cls", "embed")
LN_EPS = 1e-5
INIT_STD = 0.02

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    hidden: int = 64
    ffn_dim: int = 128
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ContractError(
                f"hidden {self.hidden} not divisible by {self.n_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "n_layers", "n_heads", "hidden", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, in checkpoint manifest order."""
    d, f, v = config.hidden, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (v, d),
        "position_embedding": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.bq"] = (d,)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.bk"] = (d,)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.bv"] = (d,)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    shapes["mlm_head.weight"] = (d, v)
    shapes["mlm_head.bias"] = (v,)
    shapes["cls_head.weight"] = (d, 2)
    shapes["cls_head.bias"] = (2,)
    return shapes


class Parameters:
    """Encoder weights keyed by tensor name in manifest order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            raise ContractError("parameter tensors do not match the config manifest")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ContractError(
                    f"tensor {name} has shape {tensors[name].shape}, expected {shape}"
                )
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["token_embedding"].dtype

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def allclose(self, other: "Parameters") -> bool:
        return all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Normal(0, 0.02^2) weights, zero biases, unit layer-norm gains.

    The MLM head starts all-zero so the first masked-prediction loss is
    exactly ln(vocab_size) under the uniform softmax.
    """
    rng = named_rng(seed, "init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith((".gain",)):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif name == "mlm_head.weight":
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    return Parameters(config, tensors)


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Attention weights indexed [layer][head][query][key]."""

    weights: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class ForwardOutput:
    hidden_states: np.ndarray
    cls_embedding: np.ndarray
    attention: AttentionMap
    n_real: int
    mlm_logits: np.ndarray | None = None
    cls_logits: np.ndarray | None = None


def gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)


def _layernorm(z, gain, bias):
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    zhat = (z - mu) * inv
    return gain * zhat + bias, zhat, inv


def _layernorm_backward(dout, gain, zhat, inv):
    dgain = (dout * zhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbias = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dzh = dout * gain
    dz = inv * (
        dzh
        - dzh.mean(axis=-1, keepdims=True)
        - zhat * (dzh * zhat).mean(axis=-1, keepdims=True)
    )
    return dz, dgain, dbias


def _dropout_mask(rng, shape, rate, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, a, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, a * dh)


def _forward_batch(params, ids, pad_mask, *, train=False, rng=None):
    """Run the encoder over a batch. Returns (hidden, attention, cache).

    ``ids``/``pad_mask`` are (B, T) with T <= config.max_len; attention is
    (L, B, A, T, T).
    """
    cfg = params.config
    t = params.tensors
    ids = np.asarray(ids)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    b, seq_len = ids.shape
    if seq_len > cfg.max_len:
        raise ContractError(f"sequence length {seq_len} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError("token id out of vocabulary range")
    dtype = params.dtype
    rate = cfg.dropout if train else 0.0
    if rate > 0.0 and rng is None:
        raise ContractError("training-mode forward needs an rng for dropout")

    scale = dtype.type(1.0 / math.sqrt(cfg.hidden // cfg.n_heads))
    neg_inf = np.array(-np.inf, dtype=dtype)
    key_bias = np.where(pad_mask[:, None, None, :], dtype.type(0.0), neg_inf)

    x = t["token_embedding"][ids] + t["position_embedding"][:seq_len]
    emb_mask = None
    if rate > 0.0:
        emb_mask = _dropout_mask(rng, x.shape, rate, dtype)
        x = x * emb_mask

    layers = []
    attn_all = np.empty(
        (cfg.n_layers, b, cfg.n_heads, seq_len, seq_len), dtype=dtype
    )
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        x_in = x
        q = _split_heads(x @ t[p + "attn.wq"] + t[p + "attn.bq"], cfg.n_heads)
        k = _split_heads(x @ t[p + "attn.wk"] + t[p + "attn.bk"], cfg.n_heads)
        v = _split_heads(x @ t[p + "attn.wv"] + t[p + "attn.bv"], cfg.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + key_bias
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        ao = ctx @ t[p + "attn.wo"] + t[p + "attn.bo"]
        drop1 = None
        if rate > 0.0:
            drop1 = _dropout_mask(rng, ao.shape, rate, dtype)
            ao = ao * drop1
        z1 = x_in + ao
        h1, zhat1, inv1 = _layernorm(z1, t[p + "ln1.gain"], t[p + "ln1.bias"])
        f1 = h1 @ t[p + "ffn.w1"] + t[p + "ffn.b1"]
        fg = gelu(f1)
        f2 = fg @ t[p + "ffn.w2"] + t[p + "ffn.b2"]
        drop2 = None
        if rate > 0.0:
            drop2 = _dropout_mask(rng, f2.shape, rate, dtype)
            f2 = f2 * drop2
        z2 = h1 + f2
        x, zhat2, inv2 = _layernorm(z2, t[p + "ln2.gain"], t[p + "ln2.bias"])
        attn_all[i] = attn
        layers.append(
            dict(
                x_in=x_in, q=q, k=k, v=v, attn=attn, ctx=ctx,
                zhat1=zhat1, inv1=inv1, h1=h1, f1=f1, fg=fg,
                zhat2=zhat2, inv2=inv2, drop1=drop1, drop2=drop2,
            )
        )

    if not np.isfinite(x).all():
        raise NumericError("non-finite hidden states in forward pass")
    cache = dict(ids=ids, pad_mask=pad_mask, emb_mask=emb_mask, layers=layers, hidden=x)
    return x, attn_all, cache


def _backward_batch(params, cache, d_hidden, grads):
    """Accumulate gradients for the encoder body given d(loss)/d(hidden)."""
    cfg = params.config
    t = params.tensors
    scale = params.dtype.type(1.0 / math.sqrt(cfg.hidden // cfg.n_heads))
    dx = d_hidden
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        c = cache["layers"][i]
        dz2, dg2, db2 = _layernorm_backward(dx, t[p + "ln2.gain"], c["zhat2"], c["inv2"])
        grads[p + "ln2.gain"] += dg2
        grads[p + "ln2.bias"] += db2
        df2 = dz2 if c["drop2"] is None else dz2 * c["drop2"]
        grads[p + "ffn.w2"] += np.einsum("btf,btd->fd", c["fg"], df2)
        grads[p + "ffn.b2"] += df2.sum(axis=(0, 1))
        dfg = df2 @ t[p + "ffn.w2"].T
        df1 = dfg * gelu_grad(c["f1"])
        grads[p + "ffn.w1"] += np.einsum("btd,btf->df", c["h1"], df1)
        grads[p + "ffn.b1"] += df1.sum(axis=(0, 1))
        dh1 = df1 @ t[p + "ffn.w1"].T + dz2

        dz1, dg1, db1 = _layernorm_backward(dh1, t[p + "ln1.gain"], c["zhat1"], c["inv1"])
        grads[p + "ln1.gain"] += dg1
        grads[p + "ln1.bias"] += db1
        dao = dz1 if c["drop1"] is None else dz1 * c["drop1"]
        grads[p + "attn.wo"] += np.einsum("btd,bte->de", c["ctx"], dao)
        grads[p + "attn.bo"] += dao.sum(axis=(0, 1))
        dctx = _split_heads(dao @ t[p + "attn.wo"].T, cfg.n_heads)
        attn = c["attn"]
        dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = _merge_heads(dscores @ c["k"])
        dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ c["q"])
        dv = _merge_heads(dv)
        x_in = c["x_in"]
        grads[p + "attn.wq"] += np.einsum("btd,bte->de", x_in, dq)
        grads[p + "attn.bq"] += dq.sum(axis=(0, 1))
        grads[p + "attn.wk"] += np.einsum("btd,bte->de", x_in, dk)
        grads[p + "attn.bk"] += dk.sum(axis=(0, 1))
        grads[p + "attn.wv"] += np.einsum("btd,bte->de", x_in, dv)
        grads[p + "attn.bv"] += dv.sum(axis=(0, 1))
        dx = (
            dz1
            + dq @ t[p + "attn.wq"].T
            + dk @ t[p + "attn.wk"].T
            + dv @ t[p + "attn.wv"].T
        )

    if cache["emb_mask"] is not None:
        dx = dx * cache["emb_mask"]
    seq_len = dx.shape[1]
    grads["position_embedding"][:seq_len] += dx.sum(axis=0)
    ids = cache["ids"]
    np.add.at(
        grads["token_embedding"], ids.reshape(-1), dx.reshape(-1, dx.shape[-1])
    )


def zero_grads(params: Parameters) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mlm_loss_and_grads(
    params: Parameters,
    ids: np.ndarray,
    pad_mask: np.ndarray,
    plans: Sequence["MaskPlan"],
    *,
    train: bool = False,
    rng=None,
    with_grads: bool = True,
):
    """Masked-token objective over a batch: mean over samples of the mean
    negative log-probability of the original token at masked positions."""
    hidden, _, cache = _forward_batch(params, ids, pad_mask, train=train, rng=rng)
    b = ids.shape[0]
    if len(plans) != b:
        raise ContractError("one mask plan per batch row required")
    idx_b, idx_t, targets, weights = [], [], [], []
    for row, plan in enumerate(plans):
        if plan.k == 0:
            raise ContractError("mask plan with zero positions")
        idx_b.extend([row] * plan.k)
        idx_t.extend(plan.positions)
        targets.extend(plan.original_ids)
        weights.extend([1.0 / (plan.k * b)] * plan.k)
    idx_b = np.asarray(idx_b)
    idx_t = np.asarray(idx_t)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=params.dtype)

    h = hidden[idx_b, idx_t]
    logits = h @ params["mlm_head.weight"] + params["mlm_head.bias"]
    logp = _log_softmax(logits)
    rows = np.arange(len(targets))
    # scalar reduction in float64 so the loss value is precise at float32 scale
    loss = float(
        -(weights.astype(np.float64) * logp[rows, targets].astype(np.float64)).sum()
    )
    if not with_grads:
        return loss, None
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits *= weights[:, None]
    grads = zero_grads(params)
    grads["mlm_head.weight"] += h.T @ dlogits
    grads["mlm_head.bias"] += dlogits.sum(axis=0)
    d_hidden = np.zeros_like(hidden)
    np.add.at(d_hidden, (idx_b, idx_t), dlogits @ params["mlm_head.weight"].T)
    _backward_batch(params, cache, d_hidden, grads)
    return loss, grads


def cls_loss_and_grads(
    params: Parameters,
    ids: np.ndarray,
    pad_mask: np.ndarray,
    labels: Sequence[int],
    *,
    train: bool = False,
    rng=None,
    with_grads: bool = True,
):
    """Binary cross-entropy on the [CLS] classification head."""
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    hidden, _, cache = _forward_batch(params, ids, pad_mask, train=train, rng=rng)
    b = ids.shape[0]
    h0 = hidden[:, 0]
    logits = h0 @ params["cls_head.weight"] + params["cls_head.bias"]
    logp = _log_softmax(logits)
    rows = np.arange(b)
    loss = float(-logp[rows, labels].astype(np.float64).mean())
    if not with_grads:
        return loss, None
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= b
    grads = zero_grads(params)
    grads["cls_head.weight"] += h0.T @ dlogits
    grads["cls_head.bias"] += dlogits.sum(axis=0)
    d_hidden = np.zeros_like(hidden)
    d_hidden[:, 0] = dlogits @ params["cls_head.weight"].T
    _backward_batch(params, cache, d_hidden, grads)
    return loss, grads


def hidden_batch(params: Parameters, ids: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Inference-mode hidden states for a batch."""
    hidden, _, _ = _forward_batch(params, ids, pad_mask, train=False)
    return hidden


def cls_logits_batch(params, ids, pad_mask) -> np.ndarray:
    hidden = hidden_batch(params, ids, pad_mask)
    return hidden[:, 0] @ params["cls_head.weight"] + params["cls_head.bias"]


def forward(
    params: Parameters,
    seq: TokenSequence,
    mode: str = "embed",
    *,
    train: bool = False,
    rng=None,
) -> ForwardOutput:
    """Encode one sequence; heads applied according to ``mode``."""
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    hidden, attn, _ = _forward_batch(
        params, seq.ids[None, :], seq.pad_mask[None, :], train=train, rng=rng
    )
    hs = hidden[0]
    mlm_logits = None
    cls_logits = None
    if mode == "mlm":
        mlm_logits = hs @ params["mlm_head.weight"] + params["mlm_head.bias"]
    elif mode == "cls":
        cls_logits = hs[0] @ params["cls_head.weight"] + params["cls_head.bias"]
    return ForwardOutput(
        hidden_states=hs,
        cls_embedding=hs[0],
        attention=AttentionMap(weights=attn[:, 0]),
        n_real=seq.n_real,
        mlm_logits=mlm_logits,
        cls_logits=cls_logits,
    )


def loss_mlm(output: ForwardOutput, mask_plan: "MaskPlan") -> float:
    """Mean negative log-softmax probability of the original tokens."""
    if output.mlm_logits is None:
        raise ContractError("loss_mlm needs a forward pass in mlm mode")
    if mask_plan.k == 0:
        raise ContractError("mask plan has no masked positions")
    logp = _log_softmax(output.mlm_logits)
    positions = np.asarray(mask_plan.positions)
    targets = np.asarray(mask_plan.original_ids)
    return float(-logp[positions, targets].astype(np.float64).mean())


def loss_cls(output: ForwardOutput, label: int) -> float:
    """Negative log-softmax of the true class over the two logits."""
    if output.cls_logits is None:
        raise ContractError("loss_cls needs a forward pass in cls mode")
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    logp = _log_softmax(output.cls_logits)
    return float(-logp[label])


def backward(params: Parameters, seq: TokenSequence, mode: str, target):
    """Exact analytic gradients of the mode's loss for one sequence.

    Dropout is off; ``target`` is a MaskPlan for mlm or a binary label
    for cls.
    """
    ids = seq.ids[None, :]
    pad = seq.pad_mask[None, :]
    if mode == "mlm":
        _, grads = mlm_loss_and_grads(params, ids, pad, [target])
    elif mode == "cls":
        _, grads = cls_loss_and_grads(params, ids, pad, [target])
    else:
        raise ContractError(f"backward needs mode 'mlm' or 'cls', got {mode!r}")
    return grads
