"""Position-accuracy grids, reconstruction renders and frozen-backbone probes."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ImageDataset
from .errors import ConfigError, ContractError, FormatError
from .rng import EVAL_MASK, PROBE, keyed_rng
from .task import BatchMasks, DropPosModel, dropped_accuracy, sample_batch_masks
from .tensor import Tensor
from .train import OptimizerState, adamw_step
from .vit import patchify, unpatchify

GRID_GAMMAS = (0.0, 0.25, 0.5, 0.75)
GRID_GAMMA_POS = (0.25, 0.5, 0.75, 0.95)
DEFAULT_EVAL_IMAGES = 1024


def eval_masks(n_images: int, n: int, gamma: float, gamma_pos: float, seed: int, offset: int = 0) -> BatchMasks:
    """Eval masks keyed by image index, independent of the training stream."""
    return sample_batch_masks(n_images, n, gamma, gamma_pos, seed, 0, stream=EVAL_MASK, offset=offset)


def predict(model: DropPosModel, images: np.ndarray, masks: BatchMasks) -> np.ndarray:
    """Position logits ``[B, n_vis, N]`` for normalized images."""
    with T.no_grad():
        logits, _ = model.forward(patchify(images, model.cfg.patch_size), masks)
    return logits.data


def position_accuracy(model: DropPosModel, dataset: ImageDataset, gamma: float, gamma_pos: float,
                      seed: int = 0, n_images: int | None = None, batch_size: int = 256) -> float:
    """Top-1 accuracy over all dropped-PE patches of the first ``n_images``."""
    n_img = len(dataset) if n_images is None else min(n_images, len(dataset))
    if n_img == 0:
        raise ConfigError("position accuracy needs a non-empty dataset")
    n = model.cfg.num_patches
    correct = total = 0
    for start in range(0, n_img, batch_size):
        stop = min(start + batch_size, n_img)
        masks = eval_masks(stop - start, n, gamma, gamma_pos, seed, offset=start)
        if masks.n_keep == masks.ids_vis.shape[1]:
            raise ContractError(f"gamma_pos={gamma_pos} drops no positions out of {masks.ids_vis.shape[1]}")
        imgs = dataset.normalize(dataset.images[start:stop])
        c, t = dropped_accuracy(predict(model, imgs, masks), masks)
        correct += c
        total += t
    return correct / total


@dataclass
class AccuracyGrid:
    gammas: tuple
    gamma_pos: tuple
    cells: np.ndarray   # [len(gammas), len(gamma_pos)]

    @property
    def average(self) -> float:
        return float(self.cells.mean())

    def rows(self) -> list:
        out = [(g, gp, float(self.cells[i, j]))
               for i, g in enumerate(self.gammas) for j, gp in enumerate(self.gamma_pos)]
        return out

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "gamma_pos", "accuracy"])
            for g, gp, acc in self.rows():
                w.writerow([repr(g), repr(gp), repr(acc)])
            w.writerow(["avg", "avg", repr(self.average)])


def accuracy_grid(model: DropPosModel, dataset: ImageDataset, seed: int = 0,
                  gammas=GRID_GAMMAS, gamma_pos=GRID_GAMMA_POS,
                  n_images: int | None = DEFAULT_EVAL_IMAGES) -> AccuracyGrid:
    cells = np.array([[position_accuracy(model, dataset, g, gp, seed, n_images) for gp in gamma_pos]
                      for g in gammas])
    return AccuracyGrid(tuple(gammas), tuple(gamma_pos), cells)


# -- renders ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit.  Float input in [0, 1] is scaled and rounded."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"PPM needs [H, W, 3], got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError(f"not an 8-bit P6 file: {fields[0]!r} maxval {fields[3]!r}")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise FormatError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def compose_render(image: np.ndarray, patch_size: int, ids_vis: np.ndarray,
                   predicted: np.ndarray) -> np.ndarray:
    """Masked patches black, wrongly placed visible patches white, the rest as-is.

    ``predicted[i]`` is the predicted raster position of visible patch
    ``ids_vis[i]``.
    """
    c = image.shape[-1]
    patches = patchify(image, patch_size)
    out = np.zeros_like(patches)
    ids_vis = np.asarray(ids_vis)
    right = np.asarray(predicted) == ids_vis
    out[ids_vis[right]] = patches[ids_vis[right]]
    out[ids_vis[~right]] = 1.0
    return unpatchify(out, patch_size, c)


def render_reconstruction(model: DropPosModel, image: np.ndarray, gamma: float, gamma_pos: float,
                          seed: int, out_path, normalize=None) -> np.ndarray:
    """Predict positions for one raw ``[H, W, C]`` image and write the render as PPM."""
    norm = normalize or (lambda x: ((x - 0.5) / 0.5).astype(np.float32))
    masks = eval_masks(1, model.cfg.num_patches, gamma, gamma_pos, seed)
    logits = predict(model, norm(image[None]), masks)
    pred = logits[0].argmax(axis=-1)
    canvas = compose_render(image, model.cfg.patch_size, masks.ids_vis[0], pred)
    write_ppm(out_path, canvas)
    return canvas


# -- probes -------------------------------------------------------------------------------

def backbone_checksum(model: DropPosModel) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.encoder_params().items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    h.update(model.params["p_mask"].data.tobytes())
    return h.hexdigest()


def patch_features(model: DropPosModel, dataset: ImageDataset, gamma: float, gamma_pos: float,
                   seed: int, stream: int = PROBE, batch_size: int = 256):
    """Frozen encoder features for every image.

    Returns ``(features [M, n_vis, D], cls [M, D], masks)`` where ``masks``
    spans the whole dataset.
    """
    n = model.cfg.num_patches
    feats, clss, all_masks = [], [], []
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        masks = sample_batch_masks(stop - start, n, gamma, gamma_pos, seed, 0, stream=stream, offset=start)
        imgs = dataset.normalize(dataset.images[start:stop])
        with T.no_grad():
            enc = model.encode_visible(patchify(imgs, model.cfg.patch_size), masks)
        feats.append(enc.data[:, 1:])
        clss.append(enc.data[:, 0])
        all_masks.append(masks)
    m0 = all_masks[0]
    merged = BatchMasks(np.concatenate([m.ids_vis for m in all_masks]),
                        np.concatenate([m.pos_shuffle for m in all_masks]),
                        m0.n_keep, m0.gamma, m0.gamma_pos, n)
    return np.concatenate(feats), np.concatenate(clss), merged


@dataclass
class ProbeResult:
    accuracy: float
    history: list = field(default_factory=list)   # (epoch, held-out accuracy)
    n_params: int = 0

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accuracy"])
            for step, acc in self.history:
                w.writerow([step, repr(acc)])


def train_linear_head(x: np.ndarray, y: np.ndarray, n_classes: int, x_eval: np.ndarray, y_eval: np.ndarray,
                      epochs: int, seed: int, lr: float = 1e-2, batch_size: int = 1024,
                      weight_decay: float = 1e-4) -> ProbeResult:
    """Softmax regression trained with AdamW; reports held-out top-1 per epoch."""
    d = x.shape[1]
    rng = keyed_rng(seed, PROBE, 1)
    # standardize with training statistics only
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-6
    xs = ((x - mu) / sd).astype(np.float32)
    xe = ((x_eval - mu) / sd).astype(np.float32)
    params = {"probe.weight": Tensor(np.zeros((d, n_classes), np.float32), requires_grad=True),
              "probe.bias": Tensor(np.zeros(n_classes, np.float32), requires_grad=True)}
    state = OptimizerState.zeros_like(params, beta1=0.9, beta2=0.999, weight_decay=weight_decay)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(xs))
        for start in range(0, len(order), batch_size):
            ids = order[start:start + batch_size]
            logits = T.linear(Tensor(xs[ids]), params["probe.weight"], params["probe.bias"])
            loss = T.cross_entropy(logits, y[ids])
            T.zero_grad(params.values())
            loss.backward()
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr)
        pred = (xe @ params["probe.weight"].data + params["probe.bias"].data).argmax(axis=1)
        history.append((epoch + 1, float((pred == y_eval).mean())))
    n_params = sum(p.size for p in params.values())
    return ProbeResult(history[-1][1] if history else 0.0, history, n_params)


def _dropped_rows(feats: np.ndarray, masks: BatchMasks):
    drop = masks.anchors == 0
    return feats[drop], masks.targets[drop]


def linear_position_probe(model: DropPosModel, train_set: ImageDataset, eval_set: ImageDataset,
                          pe_mask_ratio: float = 0.75, epochs: int = 20, gamma: float = 0.0,
                          seed: int = 0) -> ProbeResult:
    """Frozen-encoder linear classifier of patch position on dropped-PE patches."""
    before = backbone_checksum(model)
    f_tr, _, m_tr = patch_features(model, train_set, gamma, pe_mask_ratio, seed)
    f_ev, _, m_ev = patch_features(model, eval_set, gamma, pe_mask_ratio, seed + 1)
    x, y = _dropped_rows(f_tr, m_tr)
    xe, ye = _dropped_rows(f_ev, m_ev)
    res = train_linear_head(x, y, model.cfg.num_patches, xe, ye, epochs, seed)
    if backbone_checksum(model) != before:
        raise AssertionError("probe training modified the backbone")
    return res


def linear_class_probe(model: DropPosModel, train_set: ImageDataset, eval_set: ImageDataset,
                       epochs: int = 50, seed: int = 0) -> ProbeResult:
    """Linear classifier on mean-pooled patch features of the full image (all PEs kept)."""
    if train_set.labels is None or eval_set.labels is None:
        raise ConfigError("class probe needs labeled data")
    before = backbone_checksum(model)
    f_tr, _, _ = patch_features(model, train_set, 0.0, 0.0, seed)
    f_ev, _, _ = patch_features(model, eval_set, 0.0, 0.0, seed + 1)
    k = int(max(train_set.labels.max(), eval_set.labels.max())) + 1
    res = train_linear_head(f_tr.mean(axis=1), train_set.labels, k, f_ev.mean(axis=1),
                            eval_set.labels, epochs, seed, batch_size=256)
    if backbone_checksum(model) != before:
        raise AssertionError("probe training modified the backbone")
    return res
