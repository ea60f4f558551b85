"""
Generating a synthetic defect dataset
=====================================

Every other demo needs labeled images, so this one builds the procedural
dataset: grayscale "pipe wall" textures with up to three defect shapes
drawn into each image and a pixel-accurate mask stored alongside.
"""

import json
from pathlib import Path

import numpy as np

from protoseg.data import CLASS_NAMES, generate_dataset, load_dataset

out = Path(__file__).resolve().parent / "output" / "dataset"

# 150 images at 48x48 take about a second; the trainer demos reuse this
# directory, so the generator is skipped when the metadata file exists.
if not (out / "meta.json").exists():
    generate_dataset(out, num_images=150, image_size=48, seed=11)
    print(f"wrote {out}")

dataset = load_dataset(out)
print(f"{dataset.num_images} images, {len(dataset.meta.splits['train'])} in train, "
      f"{len(dataset.meta.splits['val'])} in val, {len(dataset.meta.splits['test'])} in test")

# Class 0 is background; the other eight are defect types. Pixel shares come
# from the metadata, image counts from the index the episode sampler uses.
freq = dataset.meta.class_frequencies
for cid, name in enumerate(CLASS_NAMES):
    print(f"  {cid} {name:<14} {freq[cid]:>6.3f} of all pixels, "
          f"in {len(dataset.class_index.get(cid, {})):>3} images")

# Images and masks are uint8 arrays on the same grid; the episode sampler
# rescales images to float32 in [0, 1] when it assembles an episode.
image, mask = dataset.images[0], dataset.masks[0]
print(f"image {image.shape} {image.dtype}, mask {mask.shape} {mask.dtype}, "
      f"classes present: {sorted(np.unique(mask).tolist())}")

# The metadata records the generator arguments, so a dataset can always be
# rebuilt bit for bit from the same call.
meta_raw = json.loads((out / "meta.json").read_text())
print("meta:", {k: meta_raw[k] for k in ("num_classes", "image_size", "seed")})
