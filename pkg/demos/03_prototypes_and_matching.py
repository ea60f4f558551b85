"""
From support masks to a query segmentation
==========================================

The prototypical head needs no trained classifier: it pools each class's
support features into one vector and labels every query pixel by cosine
similarity to those vectors. This demo runs the pipeline one step at a
time on a freshly sampled 2-way 3-shot episode.
"""

from pathlib import Path

import numpy as np

from protoseg.autodiff import no_grad
from protoseg.data import CLASS_NAMES, EpisodeSpec, load_dataset, sample_episode
from protoseg.encoder import Encoder, EncoderConfig
from protoseg.protohead import ProtoHead

dataset = load_dataset(Path(__file__).resolve().parent / "output" / "dataset")
rng = np.random.default_rng(4)

spec = EpisodeSpec(n_ways=2, k_shots=3, n_query=2)
episode = sample_episode(dataset, spec, rng, split="train")
names = [CLASS_NAMES[c] for c in episode.episode_classes]
print(f"episode classes {episode.episode_classes} = {names}")
print(f"support {episode.support_images.shape}, query {episode.query_images.shape}")

# Masks inside an episode use local ids: 0 is background, 1..n are the
# sampled classes in order. class_map records the original dataset ids.
print(f"class map {episode.class_map}")

encoder = Encoder(EncoderConfig(), seed=1).eval()
head = ProtoHead()

with no_grad():
    prediction = head.predict_episode(episode, encoder)

# One prototype per local class, each a pyramid-width vector.
protos = prediction.prototypes
print(f"prototypes {protos.stacked.shape} for classes {protos.classes}")

# match_prototypes scores every query pixel against every prototype; the
# temperature-scaled softmax turns cosine similarities into per-pixel
# probabilities, upsampled back to image resolution.
print(f"query probabilities {prediction.query_probs.shape}")

predicted = prediction.predicted_masks
for q in range(predicted.shape[0]):
    truth = episode.query_masks[q]
    agree = float((predicted[q] == truth).mean())
    print(f"  query {q}: pixel agreement with ground truth {agree:.3f} "
          f"(untrained encoder, so this is a starting point, not a result)")
