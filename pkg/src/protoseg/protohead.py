"""Prototype generation by masked average pooling and dense prediction by
cosine-temperature matching.

The head is almost parameter-free: its only (optional) trainable value is
the softmax temperature. Episodes arrive with masks in the episode-local
label space {0..n} where 0 is background; prototypes are stored in that
order, so channel c of every probability map corresponds to local label c.

Resolution conventions: ground-truth masks are nearest-neighbor
downsampled to the feature grid for pooling, and probability maps are
bilinearly upsampled back to image resolution for losses and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    dense,
    l2_normalize,
    reshape,
    softmax_rowwise,
    transpose,
    tsum,
    upsample_bilinear_x2,
)
from .errors import ContractViolationError, EmptyClassError


@dataclass
class ProtoHeadConfig:
    epsilon: float = 1e-6
    temperature: float = 20.0
    temperature_learnable: bool = False
    feature_level: int = 2

    def __post_init__(self):
        if self.epsilon <= 0 or self.temperature <= 0:
            raise ContractViolationError("epsilon and temperature must be positive")
        if self.feature_level not in (2, 3, 4, 5):
            raise ContractViolationError(f"feature_level must be 2..5, got {self.feature_level}")


@dataclass
class PrototypeSet:
    """Stacked prototype vectors, row i belonging to classes[i]."""

    stacked: Tensor  # (n_classes, C)
    classes: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ContractViolationError(f"duplicate episode classes: {self.classes}")
        if self.stacked.shape[0] != len(self.classes):
            raise ContractViolationError("one prototype row per class required")

    def vector(self, class_id: int) -> np.ndarray:
        return self.stacked.data[self.classes.index(class_id)]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def downsample_mask(mask: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor reduction onto the feature grid (top-left sample)."""
    h, w = mask.shape[-2], mask.shape[-1]
    th, tw = target_hw
    if (h, w) == (th, tw):
        return mask
    if h % th or w % tw:
        raise ContractViolationError(
            f"mask {h}x{w} is not an integer multiple of feature grid {th}x{tw}"
        )
    fh, fw = h // th, w // tw
    return mask[..., ::fh, ::fw]


def masked_average_pool(features: Tensor, mask: np.ndarray, class_id: int,
                        epsilon: float = 1e-6) -> Tensor:
    """Mean feature vector over the pixels labeled `class_id`.

    The pixel count in the denominator carries the stabilizing epsilon; the
    numerator is untouched, so a full mask returns the exact spatial mean
    up to the relative epsilon/count bias.
    """
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise ContractViolationError("masked_average_pool takes one image; use build_prototypes")
        features = reshape(features, features.shape[1:])
    if features.ndim != 3:
        raise ContractViolationError(f"expected (H,W,C) features, got {features.shape}")
    mask = downsample_mask(np.asarray(mask), (features.shape[0], features.shape[1]))
    indicator = (mask == class_id).astype(features.data.dtype)
    count = float(indicator.sum())
    if count == 0:
        raise EmptyClassError(f"class {class_id} has no pixels in the provided mask")
    weighted = features * indicator[:, :, None]
    return tsum(weighted, axis=(0, 1)) * (1.0 / (count + epsilon))


def build_prototypes(support_features: Tensor, support_masks: np.ndarray,
                     episode_classes, config: ProtoHeadConfig | None = None,
                     strict: bool = True) -> PrototypeSet:
    """One prototype per episode class, averaged over the supporting images.

    `support_features` is the (S,h,w,C) stack; `support_masks` the (S,H,W)
    label array. A class's prototype averages the per-image pooled vectors
    over exactly those images that contain the class. With `strict` off,
    a class missing from every mask gets a zero prototype instead of an
    error; the reversed training direction needs that fallback because
    predicted masks may drop a class entirely.
    """
    config = config or ProtoHeadConfig()
    if support_features.ndim != 4:
        raise ContractViolationError(f"expected (S,h,w,C) features, got {support_features.shape}")
    s, h, w, c = support_features.shape
    masks = downsample_mask(np.asarray(support_masks), (h, w))
    if masks.shape[0] != s:
        raise ContractViolationError(f"{s} feature maps but {masks.shape[0]} masks")
    classes = tuple(int(x) for x in episode_classes)
    dtype = support_features.data.dtype

    rows = []
    for cid in classes:
        indicator = (masks == cid).astype(dtype)  # (S,h,w)
        counts = indicator.sum(axis=(1, 2))  # pixels per image
        members = counts > 0
        if not members.any():
            if strict:
                raise EmptyClassError(f"class {cid} has no pixels in any support mask")
            rows.append(Tensor(np.zeros((1, c), dtype=dtype)))
            continue
        per_image = tsum(support_features * indicator[:, :, :, None], axis=(1, 2))  # (S,C)
        inv_counts = np.where(members, 1.0 / (counts + config.epsilon), 0.0)
        image_weights = (inv_counts * members / members.sum()).astype(dtype)
        rows.append(reshape(tsum(per_image * image_weights[:, None], axis=0), (1, c)))
    return PrototypeSet(stacked=concat(rows, axis=0), classes=classes)


class ProtoHead:
    """Cosine-matching head with a fixed or learnable temperature."""

    def __init__(self, config: ProtoHeadConfig | None = None, dtype=np.float32):
        self.config = config or ProtoHeadConfig()
        if self.config.temperature_learnable:
            self.temperature = Tensor(
                np.asarray(self.config.temperature, dtype=dtype), requires_grad=True
            )
        else:
            self.temperature = float(self.config.temperature)

    def named_parameters(self, prefix: str = "head"):
        if isinstance(self.temperature, Tensor):
            yield f"{prefix}.temperature", self.temperature

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        if isinstance(self.temperature, Tensor):
            return {"temperature": self.temperature.data}
        return {}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        if isinstance(self.temperature, Tensor):
            self.temperature.data = state["temperature"].astype(
                self.temperature.data.dtype, copy=True)

    # -- matching -------------------------------------------------------------

    def match_prototypes(self, query_features: Tensor, prototypes: PrototypeSet) -> Tensor:
        """Per-pixel class probabilities: softmax over temperature-scaled
        cosine similarity to each prototype. Features and prototypes are
        L2-normalized with a 1e-8 norm floor, so zero vectors are safe."""
        if query_features.shape[-1] != prototypes.stacked.shape[-1]:
            raise ContractViolationError(
                f"feature dim {query_features.shape[-1]} != prototype dim "
                f"{prototypes.stacked.shape[-1]}"
            )
        fn = l2_normalize(query_features, axis=-1)
        pn = l2_normalize(prototypes.stacked, axis=-1)
        cosine = dense(fn, transpose(pn, (1, 0)))  # (..., n_classes)
        return softmax_rowwise(cosine * self.temperature, axis=-1)

    def predict_episode(self, episode, encoder, attention=None) -> "EpisodePrediction":
        """Full forward pipeline for one episode.

        Support and query images run through the same encoder (one shared
        parameter store), optionally through the attention head, then
        prototypes pooled from the support set classify every query pixel.
        Probability maps are returned both at feature resolution (for the
        reversed direction) and upsampled to image resolution.
        """
        level = self.config.feature_level
        support_feats = encoder.extract_features(Tensor(episode.support_images), level)
        query_feats = encoder.extract_features(Tensor(episode.query_images), level)
        if attention is not None:
            support_feats, query_feats = attention.enhance(support_feats, query_feats)
        prototypes = build_prototypes(
            support_feats, episode.support_masks, episode.local_classes, self.config
        )
        probs_feature = self.match_prototypes(query_feats, prototypes)
        probs_image = _upsample_probs(probs_feature, episode.query_images.shape[1])
        return EpisodePrediction(
            query_probs=probs_image,
            prototypes=prototypes,
            query_probs_feature=probs_feature,
            support_features=support_feats,
            query_features=query_feats,
            classes=tuple(int(x) for x in episode.local_classes),
        )

    def predict_reversed(self, prediction: "EpisodePrediction",
                         support_image_hw: int) -> Tensor:
        """Reversed direction: prototypes pooled from query features under
        the query's own predicted (argmax) mask segment the support images.
        Ground-truth query masks are never consulted, so no label leaks."""
        predicted = np.argmax(prediction.query_probs_feature.data, axis=-1)
        reversed_protos = build_prototypes(
            prediction.query_features, predicted, prediction.classes,
            self.config, strict=False,
        )
        probs_feature = self.match_prototypes(prediction.support_features, reversed_protos)
        return _upsample_probs(probs_feature, support_image_hw)


def _upsample_probs(probs: Tensor, target_hw: int) -> Tensor:
    out = probs
    while out.shape[1] < target_hw:
        out = upsample_bilinear_x2(out)
    if out.shape[1] != target_hw:
        raise ContractViolationError(
            f"cannot upsample feature grid {probs.shape[1]} to image size {target_hw}"
        )
    return out


@dataclass
class EpisodePrediction:
    """Everything the losses and metrics need from one episode forward."""

    query_probs: Tensor  # (Q, H, W, n_classes) at image resolution
    prototypes: PrototypeSet
    query_probs_feature: Tensor  # (Q, h, w, n_classes) at feature resolution
    support_features: Tensor
    query_features: Tensor
    classes: tuple[int, ...]

    @property
    def predicted_masks(self) -> np.ndarray:
        return np.argmax(self.query_probs.data, axis=-1)
