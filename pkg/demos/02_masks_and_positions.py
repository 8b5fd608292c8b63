"""
Dropping patches, then dropping positions
=========================================

Walk through how one image is masked: a random subset of patches stays
visible, and only some of those keep their true positional embedding.
The rest share a single learnable [MASK] embedding and have to be
placed by the model.
"""

import numpy as np

from droppos import task as tk
from droppos.rng import keyed_rng
from droppos.tensor import Tensor
from droppos.vit import ViTConfig, build_sincos_pe

cfg = ViTConfig()
print(f"{cfg.image_size}x{cfg.image_size} image, {cfg.patch_size}px patches -> {cfg.num_patches} patches")

rng = keyed_rng(0)
patch_mask = tk.sample_patch_mask(cfg.num_patches, 0.5, rng)
print("visible patches:", patch_mask.keep_ids)

pos_mask = tk.sample_position_mask(len(patch_mask.keep_ids), 0.75, rng)
anchors = patch_mask.keep_ids[pos_mask.bits == 1]
print(f"{pos_mask.n_keep} anchors keep their position:", anchors)

# assemble the positional sequence fed to the encoder
pe = build_sincos_pe(cfg.grid_size, cfg.grid_size, cfg.embed_dim, np.float64)
p_mask = Tensor(np.full(cfg.embed_dim, 0.123))
seq = tk.assemble_pe(pe, patch_mask, pos_mask, p_mask).data
n_masked = int((seq[1:] == 0.123).all(axis=1).sum())
print(f"assembled PE: {seq.shape[0]} rows ([CLS] + visible), {n_masked} carry the [MASK] embedding")

# targets are softened early in training: neighbours of the true cell get some mass
for sigma in (1.0, 0.5, 0.0):
    w = tk.smoothing_matrix(cfg.grid_size, cfg.grid_size, sigma).w_star
    centre = 3 * cfg.grid_size + 3
    print(f"sigma={sigma}: weight on true cell {w[centre, centre]:.3f}, "
          f"on right neighbour {w[centre, centre + 1]:.3f}")
