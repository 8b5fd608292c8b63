"""
Accuracy grid and reconstruction renders
========================================

Score a checkpoint over the 4x4 grid of (patch mask ratio, position mask
ratio) and draw where it places each visible patch.  Run
``03_pretrain_toy.py`` first, or pass a checkpoint path.
"""

import sys
from pathlib import Path

import numpy as np

from droppos.data import synthetic_dataset
from droppos.evaluate import accuracy_grid, read_ppm, render_reconstruction
from droppos.train import load_checkpoint, model_from_checkpoint

ck = sys.argv[1] if len(sys.argv) > 1 else "runs/demo/checkpoint.dpos"
model = model_from_checkpoint(load_checkpoint(ck))
heldout = synthetic_dataset(256, seed=1, labels=False)

grid = accuracy_grid(model, heldout, n_images=256)
print("rows: gamma, columns: gamma_pos", grid.gamma_pos)
for g, row in zip(grid.gammas, grid.cells):
    print(f"  {g:.2f}  " + "  ".join(f"{a:.3f}" for a in row))
print(f"average {grid.average:.3f}")

# black: masked patch; white: visible patch put in the wrong place
out = Path(ck).parent / "renders"
out.mkdir(exist_ok=True)
for gamma in (0.0, 0.25, 0.5, 0.75):
    path = out / f"render_gamma{gamma:.2f}.ppm"
    render_reconstruction(model, heldout.images[0], gamma, 0.95, 0, path)
    img = read_ppm(path)
    white = int((img.reshape(-1, 3) == 255).all(axis=1).sum()) // model.cfg.patch_size ** 2
    print(f"{path}: {white} misplaced patches")
