"""
Attention heads and the neutral start
=====================================

Three attention variants can refine features before prototypes are pooled:
self-attention (sa) over each map, window-restricted local self-attention
(lsa), and cross-attention (ca) from query tokens to the pooled support
set. All of them initialize their output projection to zero behind a
residual connection, so an untrained head changes nothing; training can
only move predictions away from the baseline, never break it.
"""

from pathlib import Path

import numpy as np

from protoseg.attention import AttentionHead
from protoseg.autodiff import no_grad
from protoseg.data import EpisodeSpec, load_dataset, sample_episode
from protoseg.encoder import Encoder, EncoderConfig
from protoseg.protohead import ProtoHead

dataset = load_dataset(Path(__file__).resolve().parent / "output" / "dataset")
encoder = Encoder(EncoderConfig(), seed=1).eval()
head = ProtoHead()
episode = sample_episode(dataset, EpisodeSpec(n_ways=2, k_shots=3, n_query=1),
                         np.random.default_rng(9), split="train")

with no_grad():
    baseline = head.predict_episode(episode, encoder)

channels = encoder.config.pyramid_channels
for variant in ("sa", "lsa", "ca"):
    attention = AttentionHead(channels, variant, seed=2)
    with no_grad():
        enhanced = head.predict_episode(episode, encoder, attention)
    identical = np.array_equal(enhanced.query_probs.data, baseline.query_probs.data)
    shapes = {name: p.data.shape for name, p in attention.named_parameters()}
    print(f"{variant:>3}: fresh head matches baseline bitwise: {identical}, params {shapes}")

# Perturbing the output projection is what training does; even a small step
# moves the prediction, which is exactly the degree of freedom the
# fine-tuning stage exploits.
attention = AttentionHead(channels, "sa", seed=2)
attention.w_o.data += 0.05
with no_grad():
    nudged = head.predict_episode(episode, encoder, attention)
delta = float(np.abs(nudged.query_probs.data - baseline.query_probs.data).max())
print(f"after nudging w_o: max probability shift {delta:.4f}")
