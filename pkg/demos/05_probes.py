"""
Frozen-backbone linear probes
=============================

Train a linear head on frozen encoder features and compare a pretrained
backbone with a freshly initialised one.
"""

import sys

from droppos.data import synthetic_dataset
from droppos.evaluate import linear_class_probe, linear_position_probe
from droppos.task import DropPosModel
from droppos.train import load_checkpoint, model_from_checkpoint

ck = sys.argv[1] if len(sys.argv) > 1 else "runs/demo/checkpoint.dpos"
pretrained = model_from_checkpoint(load_checkpoint(ck))
random_init = DropPosModel(pretrained.cfg, seed=0)

train = synthetic_dataset(1024, seed=0)
heldout = synthetic_dataset(256, seed=1)

for name, model in (("pretrained", pretrained), ("random init", random_init)):
    pos = linear_position_probe(model, train, heldout, epochs=10)
    cls = linear_class_probe(model, train, heldout, epochs=20)
    print(f"{name:>12}: position probe {pos.accuracy:.3f}, quadrant probe {cls.accuracy:.3f}")
