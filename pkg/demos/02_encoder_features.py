"""
Inside the pyramid encoder
==========================

The encoder stacks five inception-style blocks built from separable
convolutions, then fuses their outputs through a top-down pyramid with
lateral connections. This walk-through shows what each stage produces and
which pyramid level the few-shot head consumes.
"""

from pathlib import Path

import numpy as np

from protoseg.autodiff import Tensor, no_grad
from protoseg.data import load_dataset
from protoseg.encoder import Encoder, EncoderConfig

dataset = load_dataset(Path(__file__).resolve().parent / "output" / "dataset")

# The "desk" default keeps channel counts small enough for CPU work; the
# full-size preset is EncoderConfig.full(). Input sides must divide by 16
# because the bottom-up path halves the grid four times.
config = EncoderConfig()
encoder = Encoder(config, seed=0).eval()
print(f"stage channels {config.stage_channels}, pyramid width {config.pyramid_channels}")

batch = np.stack([dataset.images[i] for i in (0, 1)]).astype(np.float32) / 255.0
x = Tensor(batch[..., None])  # (B, H, W, 1)

with no_grad():
    pyramid = encoder.pyramid(x)

# Each stage halves the previous resolution; the top-down pass brings every
# level back to a shared channel width and adds in the upsampled level above.
for lvl, t in sorted(pyramid.bottom_up.items()):
    print(f"  stage {lvl}: {t.shape}")
for lvl, t in sorted(pyramid.top_down.items()):
    print(f"  pyramid {lvl}: {t.shape}")

# extract_features picks the pyramid level the prototype head works on.
# Level 2 of a 48x48 input is a 24x24 grid: fine enough to localize small
# defects, coarse enough that masked pooling sees stable statistics.
with no_grad():
    features = encoder.extract_features(x, level=2)
print(f"head features: {features.shape}")

count = sum(int(np.prod(p.data.shape)) for _, p in encoder.named_parameters())
print(f"trainable parameters: {count}")
