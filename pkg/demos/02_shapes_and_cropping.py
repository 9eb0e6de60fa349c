# %% [markdown]
# # Shapes dataset and combinatorial cropping
#
# Four classes (disk, square, triangle, ring) with their own colours,
# drawn on a noisy grey background. Weak images only carry a label vector;
# strong ones also have a mask with 255 marking background.

# %%
import tempfile
from pathlib import Path

import numpy as np

from decoseg.augment import StrongExample, combinatorial_crop, expected_count, powerset_nonempty
from decoseg.synth import BACKGROUND, CLASS_NAMES, DatasetConfig, gen_dataset, load_dataset

root = Path(tempfile.mkdtemp()) / "shapes"
manifest = gen_dataset(DatasetConfig(n_weak=20, n_strong=6, n_test=4, seed=1), root)
print(len(manifest["examples"]), "examples written to", root)

# %%
strong = load_dataset(root, "strong")
for ex in strong:
    fg = np.count_nonzero(ex.mask != BACKGROUND)
    print(ex.id, [CLASS_NAMES[c] for c in ex.label_set], f"{fg} foreground pixels")

# %% [markdown]
# ## Label combinations
#
# An image with label set `L` yields one binary mask per nonempty subset
# of `L`, so `2**|L| - 1` of them.

# %%
print(powerset_nonempty([0, 2, 3]))

# %% [markdown]
# For every subset `n_p` boxes enclosing its foreground are sampled, cropped
# and resized back to 64 x 64. The original images are kept as well.

# %%
examples = [StrongExample.from_annotated(e) for e in strong]
n_p = 5
crops = combinatorial_crop(examples, n_p, (64, 64), rng_seed=0)
print(len(crops), "samples;", expected_count([len(e.labels) for e in examples], n_p), "expected")

# %%
first = [c for c in crops if c.source == 0]
for c in first[:8]:
    print(c.labels, c.box, f"fg fraction {c.mask.mean():.2f}")
