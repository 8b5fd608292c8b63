"""
Pretraining a toy ViT on synthetic images
=========================================

A few epochs on the synthetic corpus are enough to move far above the
1/64 chance level.  Pass a larger image count and epoch count on the
command line to approach the full toy run, e.g.::

    python demos/03_pretrain_toy.py 8192 20
"""

import math
import sys
import time

from droppos.data import synthetic_dataset
from droppos.evaluate import position_accuracy
from droppos.task import TaskConfig
from droppos.train import TrainConfig, pretrain
from droppos.vit import ViTConfig

n_images = int(sys.argv[1]) if len(sys.argv) > 1 else 1024
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 3
out = sys.argv[3] if len(sys.argv) > 3 else "runs/demo"

train = synthetic_dataset(n_images, seed=0, labels=False)
heldout = synthetic_dataset(256, seed=1, labels=False)
config = TrainConfig(epochs=epochs, task=TaskConfig(gamma=0.5, gamma_pos=0.75))

t0 = time.perf_counter()
result = pretrain(config, ViTConfig(), train, out_dir=out)
print(f"trained {len(result.metrics)} steps in {time.perf_counter() - t0:.0f}s")
print(f"first loss {float(result.metrics[0]['loss']):.3f} (ln 64 = {math.log(64):.3f}), "
      f"last loss {float(result.metrics[-1]['loss']):.3f}")

acc = position_accuracy(result.model, heldout, 0.5, 0.75)
print(f"held-out top-1 on dropped positions: {acc:.3f} (chance {1 / 64:.3f})")
print(f"checkpoint and metrics written to {out}/")
