"""The full network: robust input layer, channel mixing, multi-scale stems,
per-scale bidirectional-scan blocks with gated FFNs, attention pooling,
fusion, and the classifier head.

Parameters live in a flat dict keyed by canonical names (documented in the
README and used verbatim by the checkpoint format); the view dataclasses
below are cheap windows into that dict, sharing the same Tensor objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import BnState, Rng, Tensor
from .numerics import ops
from .ssm import SsmParams, bidirectional_scan, s4d_init


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    window_len: int
    classes: int
    d_model: int = 128
    n_layers: int = 3
    ssm_expand: int = 2
    ffn_expand: int = 4
    state_dim: int = 16
    strides: tuple[int, ...] = (5, 10, 25)
    mixer_expand: int = 2
    p_dropout: float = 0.1
    p_droppath: float = 0.1
    p_channel_dropout: float = 0.1
    ln_eps: float = 1e-5
    dw_kernel: int = 5
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.d_model % 4 != 0:
            raise ConfigError("d_model must be divisible by 4 (pooling hidden d_model/4)")
        if not self.strides:
            raise ConfigError("at least one stride is required")
        if any(s < 1 or s > self.window_len for s in self.strides):
            raise ConfigError(f"strides must lie in [1, window_len]; got {self.strides} "
                              f"for window_len {self.window_len}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigError("strides must be strictly ascending")
        for name in ("p_dropout", "p_droppath", "p_channel_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1); got {v}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise ConfigError("dw_kernel must be odd (centered convolution)")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be 'f32' or 'f64'")
        if min(self.channels, self.window_len, self.d_model, self.n_layers,
               self.ssm_expand, self.ffn_expand, self.state_dim,
               self.mixer_expand) < 1:
            raise ConfigError("all dimensions must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.ssm_expand * self.d_model

    @property
    def d_ffn(self) -> int:
        return self.ffn_expand * self.d_model

    @property
    def n_scales(self) -> int:
        return len(self.strides)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def token_counts(self) -> tuple[int, ...]:
        return tuple(token_count(self.window_len, s) for s in self.strides)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["strides"] = list(self.strides)
        return d

    @staticmethod
    def from_dict(d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "strides" in kwargs:
            kwargs["strides"] = tuple(kwargs["strides"])
        return ModelConfig(**kwargs)


def token_count(length: int, stride: int) -> int:
    """Number of non-overlapping patches: floor((L - s) / s) + 1."""
    if length < stride:
        raise ShapeError(f"scale with stride {stride}: input length {length} is too short")
    return (length - stride) // stride + 1


# ---------------------------------------------------------------------------
# parameter store

BUFFER_SUFFIXES = (".bn.rm", ".bn.rv", ".bn.n")
BUFFER_PREFIXES = ("norm.",)


def is_trainable(name: str) -> bool:
    return not (name.endswith(BUFFER_SUFFIXES) or name.startswith(BUFFER_PREFIXES))


def trainable(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if is_trainable(k)}


def count_parameters(params: Mapping[str, Tensor], trainable_only: bool = True) -> int:
    return sum(v.size for k, v in params.items()
               if (not trainable_only) or is_trainable(k))


INIT_STD = 0.02


def init_params(config: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    """Fresh parameter store: truncated-normal weights (0, 0.02, clipped at
    two sigma), normal positional tables, (1, 0) norm affines, zero biases,
    and the diagonal-real scan initialization."""
    dt = config.np_dtype
    C, D, K = config.channels, config.d_model, config.classes
    Di, Dffn = config.d_inner, config.d_ffn
    rhoC = config.mixer_expand * C

    def w(name, shape):
        return Tensor(rng.split("init", name).truncated_normal(shape, INIT_STD, 2.0, dt))

    def ln(prefix, dim, out):
        out[f"{prefix}.g"] = Tensor(np.ones(dim, dtype=dt))
        out[f"{prefix}.b"] = Tensor(np.zeros(dim, dtype=dt))

    p: dict[str, Tensor] = {}
    ln("mixer.ln", C, p)
    p["mixer.w1"] = w("mixer.w1", (rhoC, C))
    p["mixer.w2"] = w("mixer.w2", (C, rhoC))

    for m, s in enumerate(config.strides, 1):
        lm = token_count(config.window_len, s)
        p[f"stem{m}.conv.w"] = w(f"stem{m}.conv.w", (D, C, s))
        bn = BnState.create(D, dt)
        p[f"stem{m}.bn.g"] = bn.gamma
        p[f"stem{m}.bn.b"] = bn.beta
        p[f"stem{m}.bn.rm"] = bn.running_mean
        p[f"stem{m}.bn.rv"] = bn.running_var
        p[f"stem{m}.bn.n"] = bn.batches
        p[f"stem{m}.pos"] = Tensor(
            rng.split("init", f"stem{m}.pos").normal((lm, D), INIT_STD, dt))

        for i in range(1, config.n_layers + 1):
            pre = f"block{m}.{i}"
            ln(f"{pre}.ln1", D, p)
            p[f"{pre}.in_proj.w"] = w(f"{pre}.in_proj.w", (2 * Di, D))
            p[f"{pre}.in_proj.b"] = Tensor(np.zeros(2 * Di, dtype=dt))
            p[f"{pre}.dwconv.w"] = w(f"{pre}.dwconv.w", (Di, config.dw_kernel))
            for direction in ("ssm_fwd", "ssm_bwd"):
                ssm = s4d_init(Di, config.state_dim,
                               rng.split("init", f"{pre}.{direction}"), dt)
                p.update(ssm.named(f"{pre}.{direction}"))
            ln(f"{pre}.ln_inner", Di, p)
            p[f"{pre}.out_proj.w"] = w(f"{pre}.out_proj.w", (D, Di))
            ln(f"{pre}.ln2", D, p)
            p[f"{pre}.ffn.w_gate"] = w(f"{pre}.ffn.w_gate", (Dffn, D))
            p[f"{pre}.ffn.w_up"] = w(f"{pre}.ffn.w_up", (Dffn, D))
            p[f"{pre}.ffn.w_down"] = w(f"{pre}.ffn.w_down", (D, Dffn))

        p[f"pool{m}.w1"] = w(f"pool{m}.w1", (D // 4, D))
        p[f"pool{m}.w2"] = w(f"pool{m}.w2", (D // 4,))

    M = config.n_scales
    ln("fuse.ln", M * D, p)
    p["fuse.w"] = w("fuse.w", (D, M * D))
    ln("cls.ln", D, p)
    p["cls.w"] = w("cls.w", (K, D))
    p["cls.b"] = Tensor(np.zeros(K, dtype=dt))
    return p


def random_params(config: ModelConfig, rng: Rng, std: float = 0.4) -> dict[str, Tensor]:
    """Generic-point parameter draw for derivative verification.

    The production init leaves the scan branch nearly inactive (its true
    gradients sit below the finite-difference noise floor), so gradient
    checks draw every trainable tensor at O(1) scale instead. Buffers keep
    their initialized values. Not for training."""
    params = init_params(config, rng)
    for name, t in params.items():
        if is_trainable(name):
            t.data = rng.split("generic", name).normal(t.shape, std, t.dtype)
    return params


# ---------------------------------------------------------------------------
# parameter views

@dataclass
class ChannelMixerParams:
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    w2: Tensor


@dataclass
class ScaleStemParams:
    conv_w: Tensor
    bn: BnState
    pos: Tensor

    @property
    def stride(self) -> int:
        return self.conv_w.shape[2]


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    in_proj_w: Tensor
    in_proj_b: Tensor
    dwconv_w: Tensor
    ssm_fwd: SsmParams
    ssm_bwd: SsmParams
    ln_inner_g: Tensor
    ln_inner_b: Tensor
    out_proj_w: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class HeadParams:
    pools: list  # list of (w1, w2) per scale
    fuse_ln_g: Tensor
    fuse_ln_b: Tensor
    fuse_w: Tensor
    cls_ln_g: Tensor
    cls_ln_b: Tensor
    cls_w: Tensor
    cls_b: Tensor


def mixer_view(p: Mapping[str, Tensor]) -> ChannelMixerParams:
    return ChannelMixerParams(p["mixer.ln.g"], p["mixer.ln.b"],
                              p["mixer.w1"], p["mixer.w2"])


def stem_view(p: Mapping[str, Tensor], m: int) -> ScaleStemParams:
    bn = BnState(p[f"stem{m}.bn.g"], p[f"stem{m}.bn.b"], p[f"stem{m}.bn.rm"],
                 p[f"stem{m}.bn.rv"], p[f"stem{m}.bn.n"])
    return ScaleStemParams(p[f"stem{m}.conv.w"], bn, p[f"stem{m}.pos"])


def _ssm_view(p: Mapping[str, Tensor], prefix: str) -> SsmParams:
    return SsmParams(p[f"{prefix}.A_log"], p[f"{prefix}.w_delta"],
                     p[f"{prefix}.b_delta"], p[f"{prefix}.w_b"],
                     p[f"{prefix}.w_c"], p[f"{prefix}.d_skip"])


def block_view(p: Mapping[str, Tensor], m: int, i: int) -> BlockParams:
    pre = f"block{m}.{i}"
    return BlockParams(
        p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"],
        p[f"{pre}.in_proj.w"], p[f"{pre}.in_proj.b"], p[f"{pre}.dwconv.w"],
        _ssm_view(p, f"{pre}.ssm_fwd"), _ssm_view(p, f"{pre}.ssm_bwd"),
        p[f"{pre}.ln_inner.g"], p[f"{pre}.ln_inner.b"], p[f"{pre}.out_proj.w"],
        p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"],
        p[f"{pre}.ffn.w_gate"], p[f"{pre}.ffn.w_up"], p[f"{pre}.ffn.w_down"])


def head_view(p: Mapping[str, Tensor], n_scales: int) -> HeadParams:
    return HeadParams(
        [(p[f"pool{m}.w1"], p[f"pool{m}.w2"]) for m in range(1, n_scales + 1)],
        p["fuse.ln.g"], p["fuse.ln.b"], p["fuse.w"],
        p["cls.ln.g"], p["cls.ln.b"], p["cls.w"], p["cls.b"])


# ---------------------------------------------------------------------------
# stochastic regularizers

def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def _dropout(x: Tensor, p: float, mode: str, rng: Rng | None) -> Tensor:
    if mode != "train" or p <= 0.0:
        return x
    keep = rng.bernoulli(1.0 - p, x.shape).astype(x.dtype) / (1.0 - p)
    return ops.mul(x, keep)


def _droppath(x: Tensor, p: float, mode: str, rng: Rng | None) -> Tensor:
    """Per-sample stochastic depth over [B, ..]; kept paths scaled 1/(1-p)."""
    if mode != "train" or p <= 0.0:
        return x
    mask = rng.bernoulli(1.0 - p, (x.shape[0],)).astype(x.dtype) / (1.0 - p)
    return ops.mul(x, mask.reshape((-1,) + (1,) * (x.ndim - 1)))


def channel_dropout(x: Tensor, p_ch: float, mode: str, rng: Rng | None = None):
    """Drop whole channels (mask shared across time); kept channels are
    rescaled by 1/(1 - p_ch). Returns (output, keep mask)."""
    _check_mode(mode)
    if not 0.0 <= p_ch < 1.0:
        raise ConfigError(f"p_ch must be in [0, 1); got {p_ch}")
    x = ops.astensor(x)
    c = x.shape[-1]
    mask_shape = (c,) if x.ndim == 2 else (x.shape[0], 1, c)
    if mode != "train" or p_ch == 0.0:
        return x, np.ones(mask_shape, dtype=x.dtype)
    keep = rng.bernoulli(1.0 - p_ch, mask_shape).astype(x.dtype)
    return ops.mul(x, keep / (1.0 - p_ch)), keep


# ---------------------------------------------------------------------------
# stages

def channel_mix(x: Tensor, p: ChannelMixerParams, p_do: float = 0.0,
                mode: str = "eval", rng: Rng | None = None,
                ln_eps: float = 1e-5) -> Tensor:
    """Residual two-layer MLP over the channel axis at each timestep."""
    _check_mode(mode)
    x = ops.astensor(x)
    h = ops.layernorm(x, p.ln_g, p.ln_b, ln_eps)
    h = ops.gelu(ops.matmul(h, ops.transpose(p.w1)))
    h = _dropout(h, p_do, mode, rng)
    return ops.add(x, ops.matmul(h, ops.transpose(p.w2)))


def embed_scale(x: Tensor, stem: ScaleStemParams, mode: str = "eval",
                bn_eps: float = 1e-5) -> Tensor:
    """Strided non-overlapping patch conv, batch norm, GELU, then the
    positional table rows [0, L_m)."""
    _check_mode(mode)
    x = ops.astensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    s = stem.stride
    lm = token_count(x.shape[1], s)  # raises on too-short input
    h = ops.conv1d(ops.swapaxes(x, -1, -2), stem.conv_w, stride=s, pad=0)
    h = ops.gelu(ops.batchnorm1d(h, stem.bn, mode, eps=bn_eps))
    h = ops.swapaxes(h, -1, -2)
    h = ops.add(h, stem.pos[:lm])
    return ops.reshape(h, h.shape[1:]) if squeeze else h


def bimamba_block(h: Tensor, p: BlockParams, mode: str = "eval",
                  rng: Rng | None = None, p_dp: float = 0.0,
                  ln_eps: float = 1e-5) -> Tensor:
    """Pre-normalized gated scan block with a residual update.

    Steps: project the normalized input into a scan branch and a gating
    branch; refine the scan branch with a centered depthwise convolution;
    run the bidirectional selective scan; gate, project back, and add.
    """
    _check_mode(mode)
    h = ops.astensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = ops.reshape(h, (1,) + h.shape)
    d_inner = p.dwconv_w.shape[0]
    hn = ops.layernorm(h, p.ln1_g, p.ln1_b, ln_eps)
    proj = ops.add(ops.matmul(hn, ops.transpose(p.in_proj_w)), p.in_proj_b)
    x_ssm = proj[..., :d_inner]
    gate = proj[..., d_inner:]
    pad = (p.dwconv_w.shape[1] - 1) // 2
    x_ssm = ops.silu(ops.swapaxes(
        ops.dwconv1d(ops.swapaxes(x_ssm, -1, -2), p.dwconv_w, pad=pad), -1, -2))
    y_bi = bidirectional_scan(x_ssm, p.ssm_fwd, p.ssm_bwd)
    yn = ops.layernorm(y_bi, p.ln_inner_g, p.ln_inner_b, ln_eps)
    out = ops.matmul(ops.mul(yn, ops.silu(gate)), ops.transpose(p.out_proj_w))
    res = ops.add(h, _droppath(out, p_dp, mode, rng))
    return ops.reshape(res, res.shape[1:]) if squeeze else res


def gated_ffn(h: Tensor, p: BlockParams, mode: str = "eval",
              rng: Rng | None = None, p_dp: float = 0.0,
              ln_eps: float = 1e-5) -> Tensor:
    """Pre-normalized residual feed-forward: down(silu(gate(h)) * up(h))."""
    _check_mode(mode)
    h = ops.astensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = ops.reshape(h, (1,) + h.shape)
    hn = ops.layernorm(h, p.ln2_g, p.ln2_b, ln_eps)
    inner = ops.mul(ops.silu(ops.matmul(hn, ops.transpose(p.w_gate))),
                    ops.matmul(hn, ops.transpose(p.w_up)))
    out = ops.matmul(inner, ops.transpose(p.w_down))
    res = ops.add(h, _droppath(out, p_dp, mode, rng))
    return ops.reshape(res, res.shape[1:]) if squeeze else res


def attention_pool(h: Tensor, w1: Tensor, w2: Tensor):
    """Softmax-weighted token average; returns (descriptor, weights).

    Weights are a softmax over scores w2^T tanh(W1 h_t), so they are
    positive and sum to one over the token axis.
    """
    h = ops.astensor(h)
    scores = ops.matmul(ops.tanh(ops.matmul(h, ops.transpose(w1))), w2)
    alpha = ops.softmax(scores, axis=-1)
    r = ops.sum_(ops.mul(ops.reshape(alpha, alpha.shape + (1,)), h), axis=-2)
    return r, alpha


def fuse_and_classify(rs: Sequence[Tensor], head: HeadParams,
                      ln_eps: float = 1e-5) -> Tensor:
    """Concatenate per-scale descriptors, fuse to the model width, classify."""
    if len(rs) != len(head.pools):
        raise ShapeError(f"fuse_and_classify: expected {len(head.pools)} "
                         f"descriptors, got {len(rs)}")
    cat = ops.concat([ops.astensor(r) for r in rs], axis=-1)
    z = ops.gelu(ops.matmul(ops.layernorm(cat, head.fuse_ln_g, head.fuse_ln_b, ln_eps),
                            ops.transpose(head.fuse_w)))
    zn = ops.layernorm(z, head.cls_ln_g, head.cls_ln_b, ln_eps)
    return ops.add(ops.matmul(zn, ops.transpose(head.cls_w)), head.cls_b)


def forward(x, params: Mapping[str, Tensor], config: ModelConfig,
            mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Logits for a batch of windows [B, L, C] (a single [L, C] window is
    promoted and the batch axis squeezed from the result).

    Eval mode is deterministic; train mode needs an Rng when any dropout
    probability is positive.
    """
    _check_mode(mode)
    x = ops.astensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"forward expects [B, L, C], got {x.shape}")
    if x.shape[1] != config.window_len or x.shape[2] != config.channels:
        raise ShapeError(f"forward: input {x.shape[1:]} does not match the model "
                         f"(window_len={config.window_len}, channels={config.channels}); "
                         f"variable lengths are rejected, not padded")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("forward: input contains non-finite values")
    stochastic = max(config.p_dropout, config.p_droppath, config.p_channel_dropout) > 0
    if mode == "train" and stochastic and rng is None:
        raise ConfigError("forward: train mode with stochastic regularizers needs an rng")

    x, _ = channel_dropout(x, config.p_channel_dropout, mode,
                           rng.split("chdrop") if rng else None)
    x = channel_mix(x, mixer_view(params), config.p_dropout, mode,
                    rng.split("mixer") if rng else None, config.ln_eps)

    descriptors = []
    head = head_view(params, config.n_scales)
    for m in range(1, config.n_scales + 1):
        h = embed_scale(x, stem_view(params, m), mode)
        for i in range(1, config.n_layers + 1):
            blk = block_view(params, m, i)
            h = bimamba_block(h, blk, mode,
                              rng.split("dp", m, i, "ssm") if rng else None,
                              config.p_droppath, config.ln_eps)
            h = gated_ffn(h, blk, mode,
                          rng.split("dp", m, i, "ffn") if rng else None,
                          config.p_droppath, config.ln_eps)
        r, _ = attention_pool(h, *head.pools[m - 1])
        r = _dropout(r, config.p_dropout, mode,
                     rng.split("pool", m) if rng else None)
        descriptors.append(r)

    logits = fuse_and_classify(descriptors, head, config.ln_eps)
    return ops.reshape(logits, logits.shape[1:]) if squeeze else logits


def predict(logits) -> np.ndarray:
    """Argmax class indices; ties resolve to the lowest class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=-1)
