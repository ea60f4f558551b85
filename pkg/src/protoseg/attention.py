"""Attention heads that enhance encoder features before prototype matching.

Three interchangeable variants plus a pass-through:
  * "sa"   global self-attention over all spatial tokens of a map
  * "lsa"  self-attention restricted to a square window around each position
  * "ca"   cross-attention that lets query tokens attend over support tokens
  * "none" identity

All variants are residual with a zero-initialized output projection, so a
freshly constructed head is exactly the identity map and training starts
from the unenhanced baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, dense, matmul, reshape, softmax_rowwise, transpose
from .errors import ContractViolationError

VARIANTS = ("none", "sa", "lsa", "ca")


@dataclass
class AttentionConfig:
    d_k: int | None = None  # None: use the channel count
    window: int = 5
    residual: bool = True
    learned_cross_projections: bool = False

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ContractViolationError(f"attention window must be odd and >= 1, got {self.window}")


def window_mask(height: int, width: int, window: int) -> np.ndarray:
    """(T,T) boolean mask: token (i,j) may attend to (p,q) iff both offsets
    are within window//2. Out-of-image positions simply do not exist as
    tokens, so border windows are smaller."""
    if window < 1 or window % 2 == 0:
        raise ContractViolationError(f"attention window must be odd and >= 1, got {window}")
    half = window // 2
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[:, None]
    row_ok = np.abs(rows - rows.T) <= half
    col_ok = np.abs(cols - cols.T) <= half
    # (i,j) x (p,q) -> (i,p) row compatibility AND (j,q) column compatibility
    mask = row_ok[:, None, :, None] & col_ok[None, :, None, :]
    return mask.reshape(height * width, height * width)


def _tokens(features: Tensor) -> tuple[Tensor, tuple]:
    if features.ndim != 4:
        raise ContractViolationError(f"attention expects (B,H,W,C) features, got {features.shape}")
    b, h, w, c = features.shape
    return reshape(features, (b, h * w, c)), (b, h, w, c)


def self_attention(
    features: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    residual: bool = True,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention among a map's own tokens.

    `mask`, when given, is a (T,T) boolean validity matrix (the local
    variant); rows renormalize over their remaining entries.
    """
    tokens, (b, h, w, c) = _tokens(features)
    if w_q.shape[0] != c:
        raise ContractViolationError(f"projection expects {w_q.shape[0]} channels, features have {c}")
    d_k = w_q.shape[1]
    q = dense(tokens, w_q)
    k = dense(tokens, w_k)
    v = dense(tokens, w_v)
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d_k))
    weights = softmax_rowwise(scores, axis=-1, mask=mask)
    out = dense(matmul(weights, v), w_o)
    if residual:
        out = tokens + out
    return reshape(out, (b, h, w, c))


def local_self_attention(
    features: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    window: int,
    residual: bool = True,
) -> Tensor:
    """Self-attention with each token restricted to its spatial window."""
    _, h, w, _ = features.shape
    return self_attention(
        features, w_q, w_k, w_v, w_o, residual=residual, mask=window_mask(h, w, window)
    )


def cross_attention(
    query_features: Tensor,
    support_features: Tensor,
    w_o: Tensor,
    w_q: Tensor | None = None,
    w_k: Tensor | None = None,
    w_v: Tensor | None = None,
    residual: bool = True,
) -> Tensor:
    """Query tokens attend over the pooled support token set.

    Support maps (S,H,W,C) flatten into one S*H*W key/value pool shared by
    every query image. By default queries and keys are the raw features
    (identity projections); learned projections are used when given. Only
    the query map is transformed.
    """
    q_tokens, (b, h, w, c) = _tokens(query_features)
    if support_features.ndim != 4 or support_features.shape[3] != c:
        raise ContractViolationError(
            f"support features must be (S,H,W,C) with C={c}, got {support_features.shape}"
        )
    s_tokens = reshape(support_features, (-1, c))  # (M, C)
    learned = w_q is not None
    if learned:
        q = dense(q_tokens, w_q)
        k = dense(s_tokens, w_k)
        v = dense(s_tokens, w_v)
        d = w_q.shape[1]
    else:
        q, k, v = q_tokens, s_tokens, s_tokens
        d = c
    scores = dense(q, transpose(k, (1, 0))) * (1.0 / math.sqrt(d))  # (B,T,M)
    weights = softmax_rowwise(scores, axis=-1)
    out = dense(dense(weights, v), w_o)
    if residual:
        out = q_tokens + out
    return reshape(out, (b, h, w, c))


class AttentionHead:
    """Parameter store + dispatch for one attention variant.

    `enhance(support, query)` returns the transformed pair: "sa"/"lsa"
    transform both maps independently, "ca" transforms the query only, and
    "none" is a pass-through with no parameters.
    """

    def __init__(self, channels: int, variant: str = "none",
                 config: AttentionConfig | None = None, seed: int = 0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ContractViolationError(f"attention variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.config = config or AttentionConfig()
        self.channels = channels
        d_k = self.config.d_k or channels
        self.d_k = d_k
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(channels)

        def proj(rows, cols):
            return Tensor(rng.normal(0.0, scale, size=(rows, cols)).astype(dtype), requires_grad=True)

        self.w_q = self.w_k = self.w_v = self.w_o = None
        if variant in ("sa", "lsa"):
            self.w_q = proj(channels, d_k)
            self.w_k = proj(channels, d_k)
            self.w_v = proj(channels, d_k)
        elif variant == "ca" and self.config.learned_cross_projections:
            self.w_q = proj(channels, d_k)
            self.w_k = proj(channels, d_k)
            self.w_v = proj(channels, d_k)
        if variant != "none":
            out_rows = d_k if (variant != "ca" or self.config.learned_cross_projections) else channels
            self.w_o = Tensor(np.zeros((out_rows, channels), dtype=dtype), requires_grad=True)

    def enhance(self, support_features: Tensor, query_features: Tensor) -> tuple[Tensor, Tensor]:
        if self.variant == "none":
            return support_features, query_features
        if self.variant == "sa":
            return (
                self_attention(support_features, self.w_q, self.w_k, self.w_v, self.w_o,
                               residual=self.config.residual),
                self_attention(query_features, self.w_q, self.w_k, self.w_v, self.w_o,
                               residual=self.config.residual),
            )
        if self.variant == "lsa":
            win = self.config.window
            return (
                local_self_attention(support_features, self.w_q, self.w_k, self.w_v, self.w_o,
                                     win, residual=self.config.residual),
                local_self_attention(query_features, self.w_q, self.w_k, self.w_v, self.w_o,
                                     win, residual=self.config.residual),
            )
        return (
            support_features,
            cross_attention(query_features, support_features, self.w_o,
                            self.w_q, self.w_k, self.w_v, residual=self.config.residual),
        )

    def named_parameters(self, prefix: str = "attention"):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def _named_tensors(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            t = getattr(self, name)
            if t is not None:
                yield name, t

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._named_tensors()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for name, t in self._named_tensors():
            src = state[name]
            if src.shape != t.data.shape:
                raise ContractViolationError(
                    f"checkpoint shape mismatch for {name}: {src.shape} vs {t.data.shape}"
                )
            t.data = src.astype(t.data.dtype, copy=True)
