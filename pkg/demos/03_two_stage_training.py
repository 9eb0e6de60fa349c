# %% [markdown]
# # Two-stage training, small and quick
#
# Stage one trains the classifier on image-level labels. Stage two freezes
# it and trains the bridging layers plus the segmentation network on
# cropped strong examples. The sizes here are cut down so the whole thing
# runs in a few minutes; `decoseg.experiment.run_desk_experiment` does the
# full-size version.

# %%
import tempfile
import time
from pathlib import Path

import numpy as np

from decoseg.augment import StrongExample, combinatorial_crop
from decoseg.bridging import class_saliency
from decoseg.classnet import ClassNetArch, ClassNetParams, TrainConfig, cls_forward, predict_scores, train_classification
from decoseg.experiment import evaluate, select_strong
from decoseg.inference import label_accuracy, segment_image
from decoseg.segnet import fresh_models, train_segmentation
from decoseg.synth import CLASS_NAMES, DatasetConfig, gen_dataset, load_dataset, stack_images, stack_labels

root = Path(tempfile.mkdtemp()) / "shapes"
gen_dataset(DatasetConfig(n_weak=300, n_strong=20, n_test=30, seed=0), root)
weak, pool, test = (load_dataset(root, s) for s in ("weak", "strong", "test"))

# %% [markdown]
# ## Stage one: classification

# %%
arch = ClassNetArch()
cls = ClassNetParams.init(arch, np.random.default_rng(1))
t0 = time.perf_counter()
cls, hist = train_classification(stack_images(weak), stack_labels(weak), cls,
                                 TrainConfig(lr=0.02, epochs=12), rng_seed=0)
print(f"{time.perf_counter() - t0:.0f} s, loss {hist[0]:.3f} -> {hist[-1]:.3f}")
print("test label accuracy", label_accuracy(predict_scores(stack_images(test), cls), stack_labels(test)))

# %% [markdown]
# ## What the saliency looks like
#
# Summed over channels, the derivative of one class score with respect to
# the last pooling layer is an 8 x 8 map.

# %%
ex = test[0]
_, cache = cls_forward(ex.image[None], cls)
for l in ex.label_set:
    sal = class_saliency(cls, cache, l).data[0].sum(axis=0)
    print(CLASS_NAMES[l])
    print(np.array2string(sal / np.abs(sal).max(), precision=1, suppress_small=True))

# %% [markdown]
# ## Stage two: bridge + segmentation with the classifier frozen

# %%
strong = [StrongExample.from_annotated(e) for e in select_strong(pool, 3, 4)]
samples = combinatorial_crop(strong, 10, (64, 64), rng_seed=0)
bridge, seg = fresh_models(arch, np.random.default_rng(2))
t0 = time.perf_counter()
bridge, seg, hist = train_segmentation(samples, cls, bridge, seg,
                                       TrainConfig(lr=0.05, epochs=100, max_steps=400), rng_seed=0)
print(f"{len(samples)} samples, {time.perf_counter() - t0:.0f} s, loss {hist[0]:.3f} -> {hist[-1]:.3f}")

# %% [markdown]
# ## Inference and IoU

# %%
res = segment_image(test[0].image, cls, bridge, seg)
print("identified:", [CLASS_NAMES[l] for l in res.labels])
print(evaluate(test, cls, bridge, seg, class_names=CLASS_NAMES).table())
