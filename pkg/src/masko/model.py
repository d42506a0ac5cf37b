"""Reconstruction decoder and the full training objective.

The decoder maps a masked image back to a full image of the same size.
Two variants: a two-hidden-layer MLP (the fast desk-scale default) and a
small residual convolutional network (input conv to 16 filters, two
residual blocks of two 3x3 convs, output conv back to one channel).

The objective is masked-reconstruction mean squared error plus a weighted
expected-l0 sparsity term, normalized by the pixel count.  For the
factored samplers the sparsity term is the analytic closed form of their
pre-sigmoid law; for the hypernet it is the per-draw closed form averaged
over the batch; for the concrete baseline it is the logistic closed form.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .distributions import StretchConfig, expected_l0_terms
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .samplers import LEAKY_SLOPE, SamplerOutput, _read_array, _read_exact

DECODER_KINDS = ("mlp", "conv_resnet")


@dataclass
class MlpDecoder:
    w1: np.ndarray  # (h, n*n)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, h)
    b2: np.ndarray  # (h,)
    w3: np.ndarray  # (n*n, h)
    b3: np.ndarray  # (n*n,)
    n: int
    hidden: int


@dataclass
class ConvDecoder:
    k_in: np.ndarray  # (f, 1, 3, 3)
    b_in: np.ndarray  # (f,)
    k1a: np.ndarray  # (f, f, 3, 3)
    b1a: np.ndarray
    k1b: np.ndarray
    b1b: np.ndarray
    k2a: np.ndarray
    b2a: np.ndarray
    k2b: np.ndarray
    b2b: np.ndarray
    k_out: np.ndarray  # (1, f, 3, 3)
    b_out: np.ndarray  # (1,)
    n: int
    filters: int


Decoder = MlpDecoder | ConvDecoder


@dataclass(frozen=True)
class LossBreakdown:
    recon: float  # mean squared reconstruction error
    sparsity: float  # expected-l0, normalized by pixel count
    total: float  # recon + lam_sparse * sparsity
    lam_sparse: float


def decoder_kind(dec: Decoder) -> str:
    return "mlp" if isinstance(dec, MlpDecoder) else "conv_resnet"


def decoder_param_arrays(dec: Decoder) -> list[tuple[str, np.ndarray]]:
    if isinstance(dec, MlpDecoder):
        return [(f, getattr(dec, f)) for f in ("w1", "b1", "w2", "b2", "w3", "b3")]
    fields = ("k_in", "b_in", "k1a", "b1a", "k1b", "b1b", "k2a", "b2a", "k2b", "b2b", "k_out", "b_out")
    return [(f, getattr(dec, f)) for f in fields]


def init_decoder(
    kind: str,
    n: int,
    hidden: int = 256,
    filters: int = 16,
    rng: np.random.Generator | None = None,
) -> Decoder:
    """Uniform fan-in-scaled weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    m = n * n

    def uni(fan_in, shape):
        a = math.sqrt(3.0 / fan_in)
        return rng.uniform(-a, a, size=shape)

    if kind == "mlp":
        return MlpDecoder(
            w1=uni(m, (hidden, m)),
            b1=np.zeros(hidden),
            w2=uni(hidden, (hidden, hidden)),
            b2=np.zeros(hidden),
            w3=uni(hidden, (m, hidden)),
            b3=np.zeros(m),
            n=n,
            hidden=hidden,
        )
    if kind == "conv_resnet":
        f = filters
        return ConvDecoder(
            k_in=uni(9, (f, 1, 3, 3)),
            b_in=np.zeros(f),
            k1a=uni(9 * f, (f, f, 3, 3)),
            b1a=np.zeros(f),
            k1b=uni(9 * f, (f, f, 3, 3)),
            b1b=np.zeros(f),
            k2a=uni(9 * f, (f, f, 3, 3)),
            b2a=np.zeros(f),
            k2b=uni(9 * f, (f, f, 3, 3)),
            b2b=np.zeros(f),
            k_out=uni(9 * f, (1, f, 3, 3)),
            b_out=np.zeros(1),
            n=n,
            filters=f,
        )
    raise ConfigError(f"unknown decoder kind {kind!r}; expected one of {DECODER_KINDS}")


def decoder_forward_bound(dec: Decoder, leaves: dict[str, Tensor], x_obs: Tensor) -> Tensor:
    """Decoder forward over caller-provided leaf tensors."""
    m = dec.n * dec.n
    if x_obs.data.ndim != 2 or x_obs.data.shape[0] != m:
        raise DimensionError(f"expected ({m}, B) input, got {x_obs.shape}")
    if isinstance(dec, MlpDecoder):
        h = dec.hidden
        h1 = ad.leaky_relu(ad.matmul(leaves["w1"], x_obs) + leaves["b1"].reshape((h, 1)), LEAKY_SLOPE)
        h2 = ad.leaky_relu(ad.matmul(leaves["w2"], h1) + leaves["b2"].reshape((h, 1)), LEAKY_SLOPE)
        return ad.matmul(leaves["w3"], h2) + leaves["b3"].reshape((m, 1))

    nb = x_obs.data.shape[1]
    n, f = dec.n, dec.filters
    img = ad.transpose(x_obs).reshape((nb, 1, n, n))

    def conv_bias(x, kname, bname, channels):
        return ad.conv2d(x, leaves[kname]) + leaves[bname].reshape((1, channels, 1, 1))

    c = ad.leaky_relu(conv_bias(img, "k_in", "b_in", f), LEAKY_SLOPE)
    for blk in ("1", "2"):
        t = ad.leaky_relu(conv_bias(c, f"k{blk}a", f"b{blk}a", f), LEAKY_SLOPE)
        t = conv_bias(t, f"k{blk}b", f"b{blk}b", f)
        c = c + t
    out = conv_bias(c, "k_out", "b_out", 1)
    return ad.transpose(out.reshape((nb, m)))


def decoder_forward(tape: Tape, dec: Decoder, x_obs: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Reconstruct from a masked image batch laid out as (n*n, B) columns.

    Returns the reconstruction and the bound parameter leaves.
    """
    leaves = {name: tape.param(arr) for name, arr in decoder_param_arrays(dec)}
    return decoder_forward_bound(dec, leaves, x_obs), leaves


def decoder_apply(dec: Decoder, x_cols: np.ndarray) -> np.ndarray:
    """Non-differentiable convenience forward on a (n*n, B) array."""
    tape = Tape()
    xhat, _ = decoder_forward(tape, dec, tape.constant(x_cols))
    return xhat.data


def objective(
    sampler_out: SamplerOutput,
    x: Tensor,
    dec: Decoder,
    lam_sparse: float,
    cfg: StretchConfig,
    dec_leaves: dict[str, Tensor] | None = None,
) -> tuple[Tensor, LossBreakdown, dict[str, Tensor]]:
    """Masked-reconstruction MSE plus weighted normalized expected-l0.

    ``x`` is the clean batch as (n*n, B) columns on the same tape as the
    sampler output.  Returns the scalar loss tensor, the detached number
    breakdown, and the decoder leaves for the optimizer.  Pass
    ``dec_leaves`` to reuse already-bound decoder tensors.
    """
    tape = x.tape
    if sampler_out.stretched.data.shape != x.data.shape:
        raise DimensionError(
            f"mask {sampler_out.stretched.data.shape} vs batch {x.data.shape}"
        )
    x_obs = sampler_out.stretched * x
    if dec_leaves is None:
        xhat, dec_leaves = decoder_forward(tape, dec, x_obs)
    else:
        xhat = decoder_forward_bound(dec, dec_leaves, x_obs)
    diff = xhat - x
    recon = (diff * diff).mean()

    kind = sampler_out.kind
    if kind in ("vanilla", "independent"):
        if sampler_out.mu is None or sampler_out.row_norm is None:
            raise ContractError("factored sampler output lacks its pre-sigmoid law")
        terms = expected_l0_terms(sampler_out.mu, sampler_out.row_norm, sampler_out.lam, cfg)
    elif kind == "hypernet":
        if sampler_out.w_z is None or sampler_out.b_z is None:
            raise ContractError("hypernet sampler output lacks per-draw maps")
        rn = ad.sqrt((sampler_out.w_z * sampler_out.w_z).sum(axis=2))
        terms = expected_l0_terms(sampler_out.b_z, rn, sampler_out.lam, cfg)
    elif kind == "concrete":
        if sampler_out.log_alpha is None:
            raise ContractError("concrete sampler output lacks its logits")
        t = sampler_out.lam * cfg.log_odds_threshold
        terms = ad.sigmoid_temp(sampler_out.log_alpha - t, 1.0)
    else:
        raise ContractError(f"unknown sampler kind {kind!r}")
    # mean over coordinates (and draws, for per-draw terms) = normalized l0
    sparsity = terms.mean()
    total = recon + lam_sparse * sparsity
    breakdown = LossBreakdown(
        recon=recon.item(),
        sparsity=sparsity.item(),
        total=total.item(),
        lam_sparse=lam_sparse,
    )
    return total, breakdown, dec_leaves


# --- decoder checkpoint blob -------------------------------------------------
#
# kind u8 (0 mlp, 1 conv_resnet) | n u32 | width u32 (hidden or filters)
# then the arrays of `decoder_param_arrays` as float64 LE.

_DEC_HEADER = struct.Struct("<BII")
_DEC_TAGS = {"mlp": 0, "conv_resnet": 1}


def decoder_to_bytes(dec: Decoder) -> bytes:
    width = dec.hidden if isinstance(dec, MlpDecoder) else dec.filters
    buf = io.BytesIO()
    buf.write(_DEC_HEADER.pack(_DEC_TAGS[decoder_kind(dec)], dec.n, width))
    for _, arr in decoder_param_arrays(dec):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def read_decoder(f) -> Decoder:
    tag, n, width = _DEC_HEADER.unpack(_read_exact(f, _DEC_HEADER.size))
    m = n * n
    if tag == 0:
        return MlpDecoder(
            w1=_read_array(f, (width, m)),
            b1=_read_array(f, (width,)),
            w2=_read_array(f, (width, width)),
            b2=_read_array(f, (width,)),
            w3=_read_array(f, (m, width)),
            b3=_read_array(f, (m,)),
            n=n,
            hidden=width,
        )
    if tag == 1:
        fl = width
        return ConvDecoder(
            k_in=_read_array(f, (fl, 1, 3, 3)),
            b_in=_read_array(f, (fl,)),
            k1a=_read_array(f, (fl, fl, 3, 3)),
            b1a=_read_array(f, (fl,)),
            k1b=_read_array(f, (fl, fl, 3, 3)),
            b1b=_read_array(f, (fl,)),
            k2a=_read_array(f, (fl, fl, 3, 3)),
            b2a=_read_array(f, (fl,)),
            k2b=_read_array(f, (fl, fl, 3, 3)),
            b2b=_read_array(f, (fl,)),
            k_out=_read_array(f, (1, fl, 3, 3)),
            b_out=_read_array(f, (1,)),
            n=n,
            filters=fl,
        )
    raise FormatError(f"unknown decoder tag {tag}")
