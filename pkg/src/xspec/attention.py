"""Cross-spectral attention: three 1x1 projections and a patch-level
cross-attention map, with analytic gradients.

Forward for an (RGB, IR) pair with feature maps x_a, x_b of shape (P, c_in):

    f_rgb      = tanh(x_a @ w_rgb    + b_rgb)      RGB-specific subspace
    f_ir       = tanh(x_b @ w_ir     + b_ir)       IR-specific subspace
    f_common_s = tanh(x_s @ w_common + b_common)   shared subspace, s in {a, b}
    A          = log_softmax(alpha * f_rgb @ f_ir.T, rows),  alpha = 1/sqrt(c_out)
    f_out_s    = A @ f_common_s                    same A on both sides

A holds log-probabilities and is used as-is in the output product, so a row
that concentrates all mass on one column contributes zeros.  Setting
prob_space=True switches the product to exp(A); the default is log space.

Spectral separation is structural: w_rgb only ever touches RGB inputs and
w_ir only IR inputs, so a gradient reaching w_ir from an RGB-side loss can
only travel through the attention map, never through a projection of the
RGB image.

All arithmetic is float64; checkpoints store float32.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DomainMismatchError,
    InvalidParamsError,
    MalformedFileError,
    ShapeMismatchError,
    StoreIoError,
)
from .feature_store import Domain, FeatureMap

PARAM_FIELDS = ("w_rgb", "b_rgb", "w_ir", "b_ir", "w_common", "b_common")
CHECKPOINT_VERSION = 1

RGB_SUBSPACE = "rgb"
IR_SUBSPACE = "ir"
COMMON_SUBSPACE = "common"


@dataclass
class AttentionParams:
    """Six trainable arrays: per-spectrum and shared projection weights/biases."""

    w_rgb: np.ndarray
    b_rgb: np.ndarray
    w_ir: np.ndarray
    b_ir: np.ndarray
    w_common: np.ndarray
    b_common: np.ndarray

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c_in, c_out = self.w_rgb.shape if self.w_rgb.ndim == 2 else (0, 0)
        if c_in < 1 or c_out < 1:
            raise InvalidParamsError(f"w_rgb must be (c_in, c_out), got {self.w_rgb.shape}")
        for w in (self.w_ir, self.w_common):
            if w.shape != (c_in, c_out):
                raise InvalidParamsError(f"weight shape {w.shape} != {(c_in, c_out)}")
        for b in (self.b_rgb, self.b_ir, self.b_common):
            if b.shape != (c_out,):
                raise InvalidParamsError(f"bias shape {b.shape} != {(c_out,)}")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParamsError(f"{name} contains non-finite values")

    @property
    def c_in(self) -> int:
        return self.w_rgb.shape[0]

    @property
    def c_out(self) -> int:
        return self.w_rgb.shape[1]

    @property
    def alpha(self) -> float:
        # recomputed, never stored, so it cannot go stale
        return 1.0 / float(np.sqrt(self.c_out))

    @property
    def trainable_count(self) -> int:
        return sum(getattr(self, name).size for name in PARAM_FIELDS)

    def as_tuple(self):
        return tuple(getattr(self, name) for name in PARAM_FIELDS)

    def copy(self) -> "AttentionParams":
        return AttentionParams(*(a.copy() for a in self.as_tuple()))


@dataclass
class ParamGrads:
    w_rgb: np.ndarray
    b_rgb: np.ndarray
    w_ir: np.ndarray
    b_ir: np.ndarray
    w_common: np.ndarray
    b_common: np.ndarray

    def as_tuple(self):
        return tuple(getattr(self, name) for name in PARAM_FIELDS)


def zero_grads(params: AttentionParams) -> ParamGrads:
    return ParamGrads(*(np.zeros_like(a) for a in params.as_tuple()))


def param_count(c_in: int, c_out: int) -> int:
    """Trainable scalar count: three (c_in x c_out) weights plus three biases."""
    return 3 * (c_in * c_out + c_out)


def descriptor_dim(patches: int, c_out: int) -> int:
    return patches * c_out


def init_params(c_in: int, c_out: int, seed: int) -> AttentionParams:
    """Seeded uniform init in [-1/sqrt(c_in), +1/sqrt(c_in)] for all six arrays."""
    if c_in < 1 or c_out < 1:
        raise InvalidParamsError(f"c_in={c_in}, c_out={c_out} must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    bound = 1.0 / np.sqrt(c_in)
    arrays = []
    for name in PARAM_FIELDS:
        shape = (c_in, c_out) if name.startswith("w") else (c_out,)
        arrays.append(rng.uniform(-bound, bound, size=shape))
    return AttentionParams(*arrays)


def project(x: np.ndarray, subspace: str, params: AttentionParams) -> np.ndarray:
    """tanh(x @ w + b) for the chosen subspace; x is (P, c_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.c_in:
        raise ShapeMismatchError(f"input shape {x.shape} incompatible with c_in={params.c_in}")
    if subspace == RGB_SUBSPACE:
        w, b = params.w_rgb, params.b_rgb
    elif subspace == IR_SUBSPACE:
        w, b = params.w_ir, params.b_ir
    elif subspace == COMMON_SUBSPACE:
        w, b = params.w_common, params.b_common
    else:
        raise InvalidParamsError(f"unknown subspace {subspace!r}")
    return np.tanh(x @ w + b)


def cross_attention(f_a: np.ndarray, f_b: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise log-softmax of alpha * f_a @ f_b.T; returns (P, P) log-probs."""
    if f_a.shape != f_b.shape:
        raise ShapeMismatchError(f"projection shapes differ: {f_a.shape} vs {f_b.shape}")
    logits = alpha * (f_a @ f_b.T)
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


@dataclass
class PairActivation:
    """Cached forward state for one (RGB, IR) pair; everything backward needs."""

    x_a: np.ndarray
    x_b: np.ndarray
    f_rgb: np.ndarray
    f_ir: np.ndarray
    f_common_a: np.ndarray
    f_common_b: np.ndarray
    attention: np.ndarray  # (P, P) log-probs
    probs: np.ndarray      # exp(attention), cached for backward
    f_out_a: np.ndarray
    f_out_b: np.ndarray
    prob_space: bool = False


@dataclass
class NegativeActivation:
    """Shared-subspace projection of a negative sample pushed through the
    anchor-positive pair's attention map."""

    x_n: np.ndarray
    f_common_n: np.ndarray
    f_out_n: np.ndarray


@dataclass
class SingleActivation:
    """Self-attention forward of one sample through its own-domain projection;
    used for per-sample descriptors outside the paired loss."""

    x: np.ndarray
    domain: Domain
    f_spec: np.ndarray
    f_common: np.ndarray
    attention: np.ndarray
    probs: np.ndarray
    f_out: np.ndarray
    prob_space: bool = False


def forward_pair(
    x_a: FeatureMap,
    x_b: FeatureMap,
    params: AttentionParams,
    prob_space: bool = False,
) -> PairActivation:
    """Full forward for an (RGB, IR) pair. x_a must be RGB and x_b IR."""
    if x_a.domain is not Domain.RGB:
        raise DomainMismatchError(f"x_a must be RGB, got {x_a.domain.tag}")
    if x_b.domain is not Domain.IR:
        raise DomainMismatchError(f"x_b must be IR, got {x_b.domain.tag}")
    if x_a.data.shape != x_b.data.shape:
        raise ShapeMismatchError(f"pair shapes differ: {x_a.data.shape} vs {x_b.data.shape}")
    a = np.asarray(x_a.data, dtype=np.float64)
    b = np.asarray(x_b.data, dtype=np.float64)
    f_rgb = project(a, RGB_SUBSPACE, params)
    f_ir = project(b, IR_SUBSPACE, params)
    f_common_a = project(a, COMMON_SUBSPACE, params)
    f_common_b = project(b, COMMON_SUBSPACE, params)
    attn = cross_attention(f_rgb, f_ir, params.alpha)
    probs = np.exp(attn)
    mix = probs if prob_space else attn
    return PairActivation(
        x_a=a,
        x_b=b,
        f_rgb=f_rgb,
        f_ir=f_ir,
        f_common_a=f_common_a,
        f_common_b=f_common_b,
        attention=attn,
        probs=probs,
        f_out_a=mix @ f_common_a,
        f_out_b=mix @ f_common_b,
        prob_space=prob_space,
    )


def negative_activation(
    pa: PairActivation, x_n: FeatureMap, params: AttentionParams
) -> NegativeActivation:
    """Project a negative sample into the shared subspace and apply the
    anchor-positive attention map to it."""
    if x_n.data.shape != pa.x_a.shape:
        raise ShapeMismatchError(f"negative shape {x_n.data.shape} != pair shape {pa.x_a.shape}")
    xn = np.asarray(x_n.data, dtype=np.float64)
    f_common_n = project(xn, COMMON_SUBSPACE, params)
    mix = pa.probs if pa.prob_space else pa.attention
    return NegativeActivation(x_n=xn, f_common_n=f_common_n, f_out_n=mix @ f_common_n)


def single_activation(
    x: FeatureMap, params: AttentionParams, prob_space: bool = False
) -> SingleActivation:
    """Self-pair forward: own-domain projection supplies both attention sides."""
    xd = np.asarray(x.data, dtype=np.float64)
    f_spec = project(xd, RGB_SUBSPACE if x.domain is Domain.RGB else IR_SUBSPACE, params)
    f_common = project(xd, COMMON_SUBSPACE, params)
    attn = cross_attention(f_spec, f_spec, params.alpha)
    probs = np.exp(attn)
    mix = probs if prob_space else attn
    return SingleActivation(
        x=xd,
        domain=x.domain,
        f_spec=f_spec,
        f_common=f_common,
        attention=attn,
        probs=probs,
        f_out=mix @ f_common,
        prob_space=prob_space,
    )


def descriptor(pa: PairActivation, side: str) -> np.ndarray:
    """Row-major flattening of one side's attended output map."""
    if side == "a":
        return pa.f_out_a.reshape(-1)
    if side == "b":
        return pa.f_out_b.reshape(-1)
    raise InvalidParamsError(f"side must be 'a' or 'b', got {side!r}")


def single_descriptor(x: FeatureMap, params: AttentionParams, prob_space: bool = False) -> np.ndarray:
    return single_activation(x, params, prob_space).f_out.reshape(-1)


def _mix_backward(grad_mix: np.ndarray, probs: np.ndarray, prob_space: bool) -> np.ndarray:
    # gradient through the (log-)softmax to the raw logits
    if prob_space:
        # softmax: dL = p * (g - sum_j g_j p_j)
        return probs * (grad_mix - (grad_mix * probs).sum(axis=1, keepdims=True))
    # log-softmax: dL = g - p * sum_j g_j
    return grad_mix - probs * grad_mix.sum(axis=1, keepdims=True)


def backward_pair(
    pa: PairActivation,
    grad_out_a: np.ndarray,
    grad_out_b: np.ndarray,
    params: AttentionParams,
    negative: NegativeActivation | None = None,
    grad_out_n: np.ndarray | None = None,
) -> ParamGrads:
    """Analytic gradients of a scalar loss w.r.t. all six parameter arrays.

    grad_out_a / grad_out_b are the loss gradients w.r.t. f_out_a / f_out_b,
    shape (P, c_out).  When the loss also touches a negative branch, pass its
    activation and grad_out_n; the negative only contributes through the
    shared projection and the cached attention map.
    """
    grad_out_a = np.asarray(grad_out_a, dtype=np.float64)
    grad_out_b = np.asarray(grad_out_b, dtype=np.float64)
    if grad_out_a.shape != pa.f_out_a.shape or grad_out_b.shape != pa.f_out_b.shape:
        raise ShapeMismatchError("upstream gradient shape mismatch")
    if (negative is None) != (grad_out_n is None):
        raise InvalidParamsError("negative and grad_out_n must be passed together")

    mix = pa.probs if pa.prob_space else pa.attention
    grad_mix = grad_out_a @ pa.f_common_a.T + grad_out_b @ pa.f_common_b.T
    g_fca = mix.T @ grad_out_a
    g_fcb = mix.T @ grad_out_b
    if negative is not None:
        grad_out_n = np.asarray(grad_out_n, dtype=np.float64)
        grad_mix += grad_out_n @ negative.f_common_n.T
        g_fcn = mix.T @ grad_out_n

    grad_logits = _mix_backward(grad_mix, pa.probs, pa.prob_space)
    alpha = params.alpha
    g_frgb = alpha * (grad_logits @ pa.f_ir)
    g_fir = alpha * (grad_logits.T @ pa.f_rgb)

    # through tanh: dz = df * (1 - f^2)
    gz_rgb = g_frgb * (1.0 - pa.f_rgb**2)
    gz_ir = g_fir * (1.0 - pa.f_ir**2)
    gz_ca = g_fca * (1.0 - pa.f_common_a**2)
    gz_cb = g_fcb * (1.0 - pa.f_common_b**2)

    g = zero_grads(params)
    g.w_rgb += pa.x_a.T @ gz_rgb
    g.b_rgb += gz_rgb.sum(axis=0)
    g.w_ir += pa.x_b.T @ gz_ir
    g.b_ir += gz_ir.sum(axis=0)
    g.w_common += pa.x_a.T @ gz_ca + pa.x_b.T @ gz_cb
    g.b_common += gz_ca.sum(axis=0) + gz_cb.sum(axis=0)
    if negative is not None:
        gz_cn = g_fcn * (1.0 - negative.f_common_n**2)
        g.w_common += negative.x_n.T @ gz_cn
        g.b_common += gz_cn.sum(axis=0)
    return g


def backward_single(
    sa: SingleActivation, grad_out: np.ndarray, params: AttentionParams
) -> ParamGrads:
    """Gradients for the self-pair forward; f_spec feeds both attention sides."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != sa.f_out.shape:
        raise ShapeMismatchError("upstream gradient shape mismatch")
    mix = sa.probs if sa.prob_space else sa.attention
    grad_mix = grad_out @ sa.f_common.T
    g_fc = mix.T @ grad_out
    grad_logits = _mix_backward(grad_mix, sa.probs, sa.prob_space)
    g_fs = params.alpha * (grad_logits @ sa.f_spec + grad_logits.T @ sa.f_spec)
    gz_s = g_fs * (1.0 - sa.f_spec**2)
    gz_c = g_fc * (1.0 - sa.f_common**2)
    g = zero_grads(params)
    if sa.domain is Domain.RGB:
        g.w_rgb += sa.x.T @ gz_s
        g.b_rgb += gz_s.sum(axis=0)
    else:
        g.w_ir += sa.x.T @ gz_s
        g.b_ir += gz_s.sum(axis=0)
    g.w_common += sa.x.T @ gz_c
    g.b_common += gz_c.sum(axis=0)
    return g


def save_checkpoint(params: AttentionParams, path, rng_seed: int = 0) -> None:
    """One-line JSON header, then six float32 blocks in PARAM_FIELDS order."""
    header = json.dumps(
        {
            "c_in": params.c_in,
            "c_out": params.c_out,
            "version": CHECKPOINT_VERSION,
            "rng_seed": rng_seed,
        },
        sort_keys=True,
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8") + b"\n")
            for arr in params.as_tuple():
                fh.write(arr.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise StoreIoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[AttentionParams, int]:
    """Returns (params, rng_seed). Validates header and block lengths."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StoreIoError(f"cannot read {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedFileError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"{path}: bad checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise MalformedFileError(f"{path}: unsupported checkpoint version {header.get('version')}")
    c_in, c_out = header.get("c_in"), header.get("c_out")
    if not isinstance(c_in, int) or not isinstance(c_out, int) or c_in < 1 or c_out < 1:
        raise MalformedFileError(f"{path}: bad dims c_in={c_in}, c_out={c_out}")
    body = raw[nl + 1 :]
    sizes = [
        (c_in, c_out) if name.startswith("w") else (c_out,) for name in PARAM_FIELDS
    ]
    total = sum(int(np.prod(s)) for s in sizes) * 4
    if len(body) != total:
        raise MalformedFileError(f"{path}: body is {len(body)} bytes, expected {total}")
    arrays, off = [], 0
    for shape in sizes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64))
        off += n * 4
    return AttentionParams(*arrays), int(header.get("rng_seed", 0))
