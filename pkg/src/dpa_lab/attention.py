"""Cross-attention, prompt attention, and its decoupled reformulation.

Naming: attn(q_src, kv_src) projects queries from q_src and keys/values from
kv_src, i.e. the vision-to-text direction is attn(f_t, f_v). x_attn is the
bidirectional residual form. prompt_attn is the classic prompt-prepended
variant (PA) over concatenated token sequences, residual included.
lambda_mass computes, per text query row, the softmax weight mass that falls
on prompt keys; decompose_pa rebuilds PA's feature-row output from the two
separate attentions using that mass, which is the algebraic identity the
verifier checks. dpa replaces the mass ratio with a learnable per-dimension
scale initialized to zero, so a fresh task leaves the base model untouched.

Cost accounting (count_flops_* / count_memory_*) follows the convention
documented in dpa_lab.tensor and mirrors these implementations exactly; the
same op sequence run under tensor.cost_meter() reproduces the static counts
to the last FLOP. DPA shares each direction's query projection between the
base branch and the prompt branch; the static counts assume that, and the
cost ordering over PA depends on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyKeysError, ShapeError
from .rng import SplitMix64
from .tensor import (
    Tensor,
    add,
    broadcast_col_vector,
    broadcast_row_vector,
    concat_rows,
    elementwise_mul,
    matmul,
    scale,
    slice_rows,
    softmax_rows,
    tanh_elem,
    transpose,
)

LAMBDA_SCALE_TYPES = ("dim", "task", "constant", "gate")


@dataclass
class AttnParams:
    """Projection triple for one attention direction."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    n_heads: int = 1

    @classmethod
    def init(cls, d: int, rng: SplitMix64, trainable: bool = False, n_heads: int = 1):
        std = 1.0 / math.sqrt(d)
        def mk():
            return Tensor(rng.normal_matrix(d, d, std=std), requires_grad=trainable, is_param=True)
        return cls(mk(), mk(), mk(), n_heads=n_heads)

    @property
    def d(self) -> int:
        return self.w_q.shape[0]


@dataclass
class FusionParams:
    """One bidirectional fusion layer: a v->t and a t->v projection triple."""

    vt: AttnParams
    tv: AttnParams

    @classmethod
    def init(cls, d: int, rng: SplitMix64, trainable: bool = False, n_heads: int = 1):
        return cls(AttnParams.init(d, rng, trainable, n_heads),
                   AttnParams.init(d, rng, trainable, n_heads))


@dataclass
class DpaParams:
    """Learnable per-layer prompt-injection scales, one per direction.

    scale_type selects the ablation variant: "dim" (1 x d, default), "task"
    (1 x 1), "constant" (fixed 1.0, not trainable), "gate" (tanh of a 1 x d
    pre-activation). All trainable variants initialize to exactly zero.
    """

    lam_vt: Tensor
    lam_tv: Tensor
    scale_type: str = "dim"

    @classmethod
    def zeros(cls, d: int, scale_type: str = "dim"):
        if scale_type not in LAMBDA_SCALE_TYPES:
            raise ConfigError(f"unknown lambda scale type {scale_type!r}")
        if scale_type == "task":
            shape = (1, 1)
        else:
            shape = (1, d)
        trainable = scale_type != "constant"
        init = np.ones(shape) if scale_type == "constant" else np.zeros(shape)
        return cls(Tensor(init.copy(), requires_grad=trainable, is_param=True),
                   Tensor(init.copy(), requires_grad=trainable, is_param=True),
                   scale_type)

    def effective(self, which: str, d: int) -> Tensor:
        """The 1 x d multiplier actually applied (on tape)."""
        lam = self.lam_vt if which == "vt" else self.lam_tv
        if self.scale_type == "gate":
            lam = tanh_elem(lam)
        if lam.shape[1] == 1 and d != 1:
            lam = broadcast_col_vector(lam, d)
        return lam

    def trainables(self):
        return [t for t in (self.lam_vt, self.lam_tv) if t.requires_grad]


def _check_d(t: Tensor, params: AttnParams, name: str):
    if t.data.ndim != 2 or t.shape[1] != params.d:
        raise ShapeError(f"{name} has shape {t.shape}, expected (*, {params.d})")


def _proj_q(q_src: Tensor, params: AttnParams) -> Tensor:
    return matmul(q_src, params.w_q)


def _attn_from_q(qp: Tensor, kv_src: Tensor, params: AttnParams) -> Tensor:
    """Single-head attention given an already projected query block."""
    kp = matmul(kv_src, params.w_k)
    vp = matmul(kv_src, params.w_v)
    scores = matmul(qp, transpose(kp))
    scores = scale(scores, 1.0 / math.sqrt(params.d))
    return matmul(softmax_rows(scores), vp)


def _slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    return transpose(slice_rows(transpose(t), start, stop))


def attn(q_src: Tensor, kv_src: Tensor, params: AttnParams) -> Tensor:
    """softmax((q W_q)(kv W_k)^T / sqrt(d_head)) (kv W_v), no residual."""
    _check_d(q_src, params, "q_src")
    _check_d(kv_src, params, "kv_src")
    if kv_src.shape[0] == 0:
        raise EmptyKeysError("attention over zero keys; callers must special-case")
    h = params.n_heads
    if h == 1:
        return _attn_from_q(_proj_q(q_src, params), kv_src, params)
    d = params.d
    if d % h:
        raise ConfigError(f"n_heads={h} does not divide d={d}")
    dh = d // h
    qp = _proj_q(q_src, params)
    kp = matmul(kv_src, params.w_k)
    vp = matmul(kv_src, params.w_v)
    heads = []
    for i in range(h):
        qh = _slice_cols(qp, i * dh, (i + 1) * dh)
        kh = _slice_cols(kp, i * dh, (i + 1) * dh)
        vh = _slice_cols(vp, i * dh, (i + 1) * dh)
        s = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh))
        heads.append(transpose(matmul(softmax_rows(s), vh)))
    return transpose(concat_rows(heads))


def x_attn(f_t: Tensor, f_v: Tensor, params: FusionParams):
    """Bidirectional cross-attention with residual updates."""
    if f_t.shape[0] == 0 or f_v.shape[0] == 0:
        raise EmptyKeysError("x_attn needs nonempty token sets on both sides")
    ft_out = add(f_t, attn(f_t, f_v, params.vt))
    fv_out = add(f_v, attn(f_v, f_t, params.tv))
    return ft_out, fv_out


def prompt_attn(f_t: Tensor, f_v: Tensor, p_t: Tensor, p_v: Tensor, params: FusionParams):
    """Prompt-prepended bidirectional attention (PA), residual included.

    Returns ((l+Lt) x d, (l+Lv) x d); rows 0..l are the prompt-row outputs,
    the remaining rows are the feature-row outputs.
    """
    if p_t.shape[0] != p_v.shape[0]:
        raise ShapeError(f"prompt lengths differ: {p_t.shape} vs {p_v.shape}")
    if p_t.shape[0] == 0:
        return x_attn(f_t, f_v, params)
    ct = concat_rows([p_t, f_t])
    cv = concat_rows([p_v, f_v])
    return x_attn(ct, cv, params)


def _prompt_mass(q_src: Tensor, kv_main: Tensor, kv_prompt: Tensor, params: AttnParams) -> np.ndarray:
    if params.n_heads != 1:
        raise ConfigError("prompt-mass decomposition is defined for single-head attention")
    qp = q_src.data @ params.w_q.data
    inv = 1.0 / math.sqrt(params.d)
    s_p = (qp @ (kv_prompt.data @ params.w_k.data).T) * inv
    s_f = (qp @ (kv_main.data @ params.w_k.data).T) * inv
    m = np.maximum(s_p.max(axis=1, keepdims=True), s_f.max(axis=1, keepdims=True))
    mass_p = np.exp(s_p - m).sum(axis=1, keepdims=True)
    mass_f = np.exp(s_f - m).sum(axis=1, keepdims=True)
    return mass_p / (mass_p + mass_f)


def lambda_mass(f_t: Tensor, f_v: Tensor, p_v: Tensor, params: AttnParams) -> Tensor:
    """Per-query fraction of attention weight on prompt keys, Lt x 1 in [0, 1].

    Uses the same logits and max-shift as softmax over the concatenated key
    set, so prompt_attn's feature rows decompose exactly through it.
    """
    _check_d(f_t, params, "f_t")
    if p_v.shape[0] == 0:
        return Tensor(np.zeros((f_t.shape[0], 1)))
    return Tensor(_prompt_mass(f_t, f_v, p_v, params))


def lambda_ratio(f_t: Tensor, f_v: Tensor, p_v: Tensor, params: AttnParams) -> np.ndarray:
    """The pre-division reweighting ratio mass/(1-mass), for inspection only."""
    lam = _prompt_mass(f_t, f_v, p_v, params)
    return lam / (1.0 - lam)


def decompose_pa(f_t: Tensor, f_v: Tensor, p_t: Tensor, p_v: Tensor, params: FusionParams) -> Tensor:
    """Reconstruct prompt_attn's feature-row v->t output from separate parts.

    f_t + (1 - lam) * attn(f_t, f_v) + lam * attn(f_t, p_v), with lam the
    per-query prompt mass. Must match prompt_attn's feature rows to 1e-10.
    """
    if p_v.shape[0] < 1:
        raise ShapeError("decompose_pa needs at least one prompt row")
    lam = lambda_mass(f_t, f_v, p_v, params.vt)
    d = f_t.shape[1]
    lam_b = broadcast_col_vector(lam, d)
    one_minus = Tensor(1.0 - lam.data)
    base = elementwise_mul(broadcast_col_vector(one_minus, d), attn(f_t, f_v, params.vt))
    inject = elementwise_mul(lam_b, attn(f_t, p_v, params.vt))
    return add(f_t, add(base, inject))


def dpa(f_t: Tensor, f_v: Tensor, p_t: Tensor, p_v: Tensor,
        params: FusionParams, dpa_params: DpaParams):
    """Decoupled prompt attention: base x_attn plus lambda-scaled prompt terms.

    f_t' = f_t + attn(f_t, f_v) + lam_vt * attn(f_t, p_v)
    f_v' = f_v + attn(f_v, f_t) + lam_tv * attn(f_v, p_t)
    No prompt-row outputs are materialized. With lambda = 0 the result is
    bit-identical to x_attn. Zero-length prompts reduce to plain x_attn.
    """
    if params.vt.n_heads != 1 or params.tv.n_heads != 1:
        raise ConfigError("dpa is defined for single-head attention")
    if p_t.shape[0] != p_v.shape[0]:
        raise ShapeError(f"prompt lengths differ: {p_t.shape} vs {p_v.shape}")
    if p_t.shape[0] == 0:
        return x_attn(f_t, f_v, params)
    d = params.vt.d

    qt = _proj_q(f_t, params.vt)
    base_t = _attn_from_q(qt, f_v, params.vt)
    inject_t = _attn_from_q(qt, p_v, params.vt)
    lam_vt = broadcast_row_vector(dpa_params.effective("vt", d), f_t.shape[0])
    ft_out = add(add(f_t, base_t), elementwise_mul(lam_vt, inject_t))

    qv = _proj_q(f_v, params.tv)
    base_v = _attn_from_q(qv, f_t, params.tv)
    inject_v = _attn_from_q(qv, p_t, params.tv)
    lam_tv = broadcast_row_vector(dpa_params.effective("tv", d), f_v.shape[0])
    fv_out = add(add(f_v, base_v), elementwise_mul(lam_tv, inject_v))
    return ft_out, fv_out


# --- static cost model (one bidirectional fusion layer) ----------------------

@dataclass
class FlopReport:
    mechanism: str
    Lt: int
    Lv: int
    l: int
    d: int
    total: int
    per_term: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "mechanism": self.mechanism, "Lt": self.Lt, "Lv": self.Lv,
            "l": self.l, "d": self.d, "total": self.total,
            "per_term": self.per_term,
        }, sort_keys=True)


def _attn_query_rows_flops(nq: int, nk: int, d: int) -> int:
    """Q-projection, scores, scale, softmax, A@V and residual for nq query rows."""
    return 2 * nq * d * d + 4 * nq * nk * d + 6 * nq * nk + nq * d


def count_flops_pa(Lt: int, Lv: int, l: int, d: int) -> FlopReport:
    """Exact FLOPs of one bidirectional PA fusion layer (dim-level convention)."""
    qt, kt = l + Lt, l + Lv
    kv_proj = 4 * kt * d * d + 4 * qt * d * d
    feature = _attn_query_rows_flops(Lt, kt, d) + _attn_query_rows_flops(Lv, qt, d)
    prompt = _attn_query_rows_flops(l, kt, d) + _attn_query_rows_flops(l, qt, d)
    total = kv_proj + feature + prompt
    return FlopReport("pa", Lt, Lv, l, d, total, {
        "kv_proj": kv_proj, "feature_rows": feature, "prompt_rows": prompt,
    })


def count_flops_dpa(Lt: int, Lv: int, l: int, d: int) -> FlopReport:
    """Exact FLOPs of one bidirectional DPA fusion layer (shared Q projection)."""
    if l == 0:
        rep = count_flops_pa(Lt, Lv, 0, d)
        return FlopReport("dpa", Lt, Lv, 0, d, rep.total, rep.per_term)
    kv_proj = 4 * Lv * d * d + 4 * Lt * d * d + 8 * l * d * d
    feature = _attn_query_rows_flops(Lt, Lv, d) + _attn_query_rows_flops(Lv, Lt, d)
    # prompt-branch scores/softmax/A@V reuse the projected queries, then a
    # lambda multiply and one extra residual add per output element
    inject = (4 * Lt * l * d + 6 * Lt * l + 2 * Lt * d) + (4 * Lv * l * d + 6 * Lv * l + 2 * Lv * d)
    total = kv_proj + feature + inject
    return FlopReport("dpa", Lt, Lv, l, d, total, {
        "kv_proj": kv_proj, "feature_rows": feature,
        "prompt_injection": inject, "prompt_rows": 0,
    })


def count_memory_pa(Lt: int, Lv: int, l: int, d: int) -> int:
    """Saved-activation words of one PA layer under the retention rule."""
    qt, kt = l + Lt, l + Lv
    return 4 * qt * d + 4 * kt * d + 4 * qt * kt


def count_memory_dpa(Lt: int, Lv: int, l: int, d: int) -> int:
    if l == 0:
        return count_memory_pa(Lt, Lv, 0, d)
    return 4 * (Lt + Lv) * d + 4 * l * d + 4 * Lt * Lv + 2 * l * (Lt + Lv)
