"""DropPos pretext task: masking, PE dropping, decoder, targets and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import vit
from .errors import ConfigError, ContractError
from .rng import TRAIN_MASK, keyed_rng
from .tensor import Tensor
from .vit import ViTConfig

COS_EPS = 1e-8
SIGMA_CACHE_TOL = 1e-4


def keep_count(n: int, ratio: float) -> int:
    """Round-half-up of ``(1 - ratio) * n``.

    The 1e-9 slack absorbs binary representation error, so e.g. ratio 0.9
    on n=5 gives 1 (0.5 rounds up) rather than 0.
    """
    return int(math.floor((1.0 - ratio) * n + 0.5 + 1e-9))


@dataclass
class PatchMask:
    bits: np.ndarray
    gamma: float
    keep_ids: np.ndarray


@dataclass
class PositionMask:
    """Anchor bits over the visible sequence plus the shuffle that produced them.

    ``ids_shuffle[:k]`` are the anchors (k = number of kept PEs), and
    ``argsort(ids_shuffle)`` restores the visible order after concatenating
    the kept PEs with [MASK] rows.
    """

    bits: np.ndarray
    gamma_pos: float
    ids_shuffle: np.ndarray

    @property
    def n_keep(self) -> int:
        return int(self.bits.sum())

    @property
    def ids_restore(self) -> np.ndarray:
        return np.argsort(self.ids_shuffle, kind="stable")


def sample_patch_mask(n: int, gamma: float, rng: np.random.Generator) -> PatchMask:
    """Shuffle the ``n`` patch indices and keep the first ``(1-gamma) n``."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    k = keep_count(n, gamma)
    if k < 1:
        raise ConfigError(f"gamma={gamma} leaves no visible patch out of {n}")
    keep = np.sort(rng.permutation(n)[:k])
    bits = np.zeros(n, dtype=np.int8)
    bits[keep] = 1
    return PatchMask(bits, gamma, keep)


def sample_position_mask(n_vis: int, gamma_pos: float, rng: np.random.Generator) -> PositionMask:
    if not 0.0 <= gamma_pos <= 1.0:
        raise ConfigError(f"gamma_pos must lie in [0, 1], got {gamma_pos}")
    k = keep_count(n_vis, gamma_pos)
    shuffle = rng.permutation(n_vis)
    bits = np.zeros(n_vis, dtype=np.int8)
    bits[shuffle[:k]] = 1
    return PositionMask(bits, gamma_pos, shuffle)


def gather(seq, keep_ids):
    """Rows of ``seq`` at strictly increasing ``keep_ids``."""
    keep_ids = np.asarray(keep_ids)
    n = len(seq)
    if keep_ids.size and (keep_ids.min() < 0 or keep_ids.max() >= n):
        raise ContractError(f"gather index out of range for length {n}: {keep_ids}")
    if keep_ids.size > 1 and np.any(np.diff(keep_ids) <= 0):
        raise ContractError("gather ids must be strictly increasing")
    if isinstance(seq, Tensor):
        return seq[keep_ids]
    return np.asarray(seq)[keep_ids]


@dataclass
class BatchMasks:
    """Stacked per-image masks for one batch (all images share the ratios)."""

    ids_vis: np.ndarray       # [B, n_vis] sorted visible patch indices
    pos_shuffle: np.ndarray   # [B, n_vis] permutation of visible slots
    n_keep: int               # anchors per image
    gamma: float
    gamma_pos: float
    num_patches: int = 0

    @property
    def anchors(self) -> np.ndarray:
        """[B, n_vis] 1 where the true PE is kept (M_pos)."""
        out = np.zeros(self.ids_vis.shape, dtype=np.int8)
        np.put_along_axis(out, self.pos_shuffle[:, : self.n_keep], 1, axis=1)
        return out

    @property
    def targets(self) -> np.ndarray:
        return self.ids_vis

    def item(self, b: int) -> tuple[PatchMask, PositionMask]:
        n = int(self.num_patches)
        bits = np.zeros(n, dtype=np.int8)
        bits[self.ids_vis[b]] = 1
        return (PatchMask(bits, self.gamma, self.ids_vis[b].copy()),
                PositionMask(self.anchors[b], self.gamma_pos, self.pos_shuffle[b].copy()))


def sample_batch_masks(batch: int, n: int, gamma: float, gamma_pos: float, seed: int,
                       step: int, stream: int = TRAIN_MASK, offset: int = 0) -> BatchMasks:
    """One generator per image keyed by ``(seed, stream, step, offset + b)``."""
    ids_vis, shuffles = [], []
    for b in range(batch):
        rng = keyed_rng(seed, stream, step, offset + b)
        pm = sample_patch_mask(n, gamma, rng)
        qm = sample_position_mask(len(pm.keep_ids), gamma_pos, rng)
        ids_vis.append(pm.keep_ids)
        shuffles.append(qm.ids_shuffle)
    n_vis = len(ids_vis[0])
    return BatchMasks(np.stack(ids_vis), np.stack(shuffles), keep_count(n_vis, gamma_pos),
                      gamma, gamma_pos, num_patches=n)


def assemble_pe_batch(pe: np.ndarray, ids_vis: np.ndarray, pos_shuffle: np.ndarray,
                      n_keep: int, p_mask: Tensor) -> Tensor:
    """Batched PE assembly: gather, keep anchors, append [MASK], restore.

    Returns ``[B, n_vis + 1, D]`` with row 0 the [CLS] PE.
    """
    b, n_vis = ids_vis.shape
    d = pe.shape[1]
    if pos_shuffle.shape != ids_vis.shape:
        raise ContractError(f"position mask shape {pos_shuffle.shape} != visible ids {ids_vis.shape}")
    bidx = np.arange(b)[:, None]
    p_vis = pe[1:][ids_vis]                                   # [B, n_vis, D]
    kept = Tensor(p_vis[bidx, pos_shuffle[:, :n_keep]].astype(p_mask.dtype))
    fill = T.broadcast_to(p_mask, (b, n_vis - n_keep, d))
    merged = T.concat([kept, fill], axis=1)
    restored = T.gather_rows(merged, np.argsort(pos_shuffle, axis=1, kind="stable"))
    p0 = Tensor(np.broadcast_to(pe[0].astype(p_mask.dtype), (b, 1, d)))
    return T.concat([p0, restored], axis=1)


def assemble_pe(pe: np.ndarray, mask: PatchMask, pos_mask: PositionMask, p_mask: Tensor) -> Tensor:
    """Final PE sequence ``[n_vis + 1, D]`` for one image."""
    if len(mask.bits) != len(pe) - 1:
        raise ContractError(f"patch mask length {len(mask.bits)} != PE rows {len(pe) - 1}")
    if len(pos_mask.bits) != len(mask.keep_ids):
        raise ContractError(
            f"position mask length {len(pos_mask.bits)} != visible count {len(mask.keep_ids)}")
    out = assemble_pe_batch(pe, mask.keep_ids[None], pos_mask.ids_shuffle[None],
                            pos_mask.n_keep, p_mask)
    return out.reshape(out.shape[1:])


# -- decoder -----------------------------------------------------------------

def init_decoder(cfg: ViTConfig, rng: np.random.Generator) -> dict:
    dd = cfg.decoder_dim
    params = {
        "decoder.embed.weight": vit.trunc_normal(rng, (cfg.embed_dim, dd)),
        "decoder.embed.bias": np.zeros(dd),
    }
    for i in range(cfg.decoder_depth):
        params.update(vit.init_block(rng, f"decoder.blocks.{i}", dd, cfg.mlp_ratio))
    params["decoder.head.weight"] = vit.trunc_normal(rng, (dd, cfg.num_patches))
    params["decoder.head.bias"] = np.zeros(cfg.num_patches)
    return params


def decoder_forward(encoded: Tensor, p: dict, cfg: ViTConfig) -> Tensor:
    """Position logits ``[B, n_vis, N]``; the [CLS] row is dropped before the head."""
    h = T.linear(encoded, p["decoder.embed.weight"], p["decoder.embed.bias"])
    for i in range(cfg.decoder_depth):
        h = vit.block(h, p, f"decoder.blocks.{i}", cfg.decoder_heads)
    h = h[:, 1:] if h.ndim == 3 else h[1:]
    return T.linear(h, p["decoder.head.weight"], p["decoder.head.bias"])


# -- targets and losses --------------------------------------------------------

@dataclass
class SmoothingMatrix:
    w_star: np.ndarray
    sigma: float


def grid_distances(grid_h: int, grid_w: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    dr = rows[:, None] - rows[None, :]
    dc = cols[:, None] - cols[None, :]
    return np.sqrt(dr * dr + dc * dc)


def smoothing_matrix(grid_h: int, grid_w: int, sigma: float) -> SmoothingMatrix:
    """Row-normalized ``exp(-dist / sigma^2)`` over raster grid coordinates.

    ``sigma == 0`` returns the identity (no smoothing).
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be nonnegative, got {sigma}")
    n = grid_h * grid_w
    if sigma == 0:
        return SmoothingMatrix(np.eye(n), 0.0)
    w = np.exp(-grid_distances(grid_h, grid_w) / (sigma * sigma))
    return SmoothingMatrix(w / w.sum(axis=1, keepdims=True), float(sigma))


@dataclass
class SigmaSchedule:
    sigma_0: float = 1.0
    sigma_T: float = 0.0
    total_steps: int = 1


def sigma_at(t: int, schedule: SigmaSchedule) -> float:
    """Linear decay from ``sigma_0`` to ``sigma_T``; clamps past the end."""
    total = max(schedule.total_steps, 1)
    t = min(max(t, 0), total)
    return (t / total) * (schedule.sigma_T - schedule.sigma_0) + schedule.sigma_0


class SmoothingCache:
    """Rebuilds the smoothing matrix only when sigma moves by more than 1e-4."""

    def __init__(self, grid_h: int, grid_w: int):
        self.grid = (grid_h, grid_w)
        self.current: SmoothingMatrix | None = None

    def get(self, sigma: float) -> SmoothingMatrix:
        cur = self.current
        if cur is None or abs(cur.sigma - sigma) > SIGMA_CACHE_TOL or (sigma == 0) != (cur.sigma == 0):
            self.current = smoothing_matrix(*self.grid, sigma)
        return self.current


@dataclass
class AffinityWeights:
    A: np.ndarray
    tau: float


def affinity(f_cls, f, tau: float) -> AffinityWeights:
    """Softmax over visible patches of ``cos(f_cls, f_i) / tau``.

    Accepts ``f_cls [..., D]`` and ``f [..., n, D]``.  The result is a plain
    array: no gradient flows through the weights.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    f_cls = np.asarray(f_cls.data if isinstance(f_cls, Tensor) else f_cls, dtype=np.float64)
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    dots = np.einsum("...nd,...d->...n", f, f_cls)
    norms = (np.maximum(np.linalg.norm(f, axis=-1), COS_EPS)
             * np.maximum(np.linalg.norm(f_cls, axis=-1), COS_EPS)[..., None])
    return AffinityWeights(softmax_np(dots / norms / tau), tau)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def droppos_loss(o: Tensor, y, m_pos, w_star, A=None) -> Tensor:
    """Weighted soft-target cross-entropy over patches with dropped PEs.

    For one image: ``-sum_i sum_j c_i w*(y_i, j) log softmax(o_i)_j / sum_i c_i``
    with ``c_i = (1 - M_pos^i) * a_i``; ``a_i`` is the affinity weight or 1
    when ``A`` is None.  Leading batch axes are averaged.
    """
    if isinstance(w_star, SmoothingMatrix):
        w_star = w_star.w_star
    if isinstance(A, AffinityWeights):
        A = A.A
    y = np.asarray(y)
    m_pos = np.asarray(m_pos)
    if o.shape[:-1] != y.shape or m_pos.shape != y.shape:
        raise ContractError(f"loss shapes disagree: logits {o.shape}, y {y.shape}, M_pos {m_pos.shape}")
    if w_star.shape != (o.shape[-1], o.shape[-1]):
        raise ContractError(f"smoothing matrix {w_star.shape} does not match {o.shape[-1]} classes")
    c = (1.0 - m_pos).astype(np.float64)
    if A is not None:
        c = c * np.asarray(A, dtype=np.float64)
    denom = c.sum(axis=-1, keepdims=True)
    if np.any((1 - m_pos).sum(axis=-1) == 0):
        raise ContractError("no dropped positions in at least one image; resample the position mask")
    n_items = int(np.prod(y.shape[:-1])) if y.ndim > 1 else 1
    weights = w_star[y] * (c / denom / n_items)[..., None]
    logp = T.log_softmax(o, axis=-1)
    return -(logp * weights.astype(o.dtype)).sum()


def plain_position_ce(o: np.ndarray, y: np.ndarray, m_pos: np.ndarray) -> float:
    """Unsmoothed, unweighted CE over dropped patches (mean over them)."""
    o = np.asarray(o, dtype=np.float64)
    shifted = o - o.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, np.asarray(y)[..., None], axis=-1)[..., 0]
    drop = 1 - np.asarray(m_pos)
    return float(-(picked * drop).sum() / drop.sum())


# -- model ---------------------------------------------------------------------

@dataclass
class TaskConfig:
    gamma: float = 0.75
    gamma_pos: float = 0.75
    sigma_0: float = 1.0
    sigma_T: float = 0.0
    tau: float = 0.1
    attentive: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"task.gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gamma_pos <= 1.0:
            raise ConfigError(f"task.gamma_pos must lie in [0, 1], got {self.gamma_pos}")
        if self.sigma_0 < 0 or self.sigma_T < 0:
            raise ConfigError("task.sigma_0 and task.sigma_T must be nonnegative")
        if self.tau <= 0:
            raise ConfigError(f"task.tau must be positive, got {self.tau}")


class DropPosModel:
    """Encoder + decoder parameters, the frozen PE table and the [MASK] PE."""

    def __init__(self, cfg: ViTConfig, seed: int = 0, dtype=np.float32):
        from .rng import INIT
        self.cfg = cfg
        rng = keyed_rng(seed, INIT)
        raw = vit.init_encoder(cfg, rng)
        raw["p_mask"] = vit.trunc_normal(rng, (cfg.embed_dim,))
        raw.update(init_decoder(cfg, rng))
        self.params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()}
        self.pos_embed = vit.build_sincos_pe(cfg.grid_size, cfg.grid_size, cfg.embed_dim, dtype)
        self.pos_embed.flags.writeable = False

    @property
    def dtype(self):
        return self.params["p_mask"].dtype

    def astype(self, dtype) -> DropPosModel:
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        pe = self.pos_embed.astype(dtype)
        pe.flags.writeable = False
        self.pos_embed = pe
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ContractError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def encode_visible(self, patches: np.ndarray, masks: BatchMasks, record: list | None = None) -> Tensor:
        """Encoder output ``[B, n_vis + 1, D]`` for already-patchified images."""
        p = self.params
        b = patches.shape[0]
        vis = patches[np.arange(b)[:, None], masks.ids_vis]
        x = vit.embed_patches(vis, p)
        cls = T.broadcast_to(p["encoder.cls_token"], (b, 1, self.cfg.embed_dim))
        tokens = T.concat([cls, x], axis=1)
        pe = assemble_pe_batch(self.pos_embed, masks.ids_vis, masks.pos_shuffle,
                               masks.n_keep, p["p_mask"])
        return vit.encode(tokens + pe, p, self.cfg, record)

    def forward(self, patches: np.ndarray, masks: BatchMasks) -> tuple[Tensor, Tensor]:
        enc = self.encode_visible(patches, masks)
        return decoder_forward(enc, self.params, self.cfg), enc


@dataclass
class StepResult:
    loss: Tensor
    accuracy: float
    n_dropped: int
    masks: BatchMasks
    logits: np.ndarray = field(repr=False)


def dropped_accuracy(logits: np.ndarray, masks: BatchMasks) -> tuple[int, int]:
    """(correct, total) top-1 over dropped-PE patches."""
    drop = masks.anchors == 0
    pred = logits.argmax(axis=-1)
    return int(((pred == masks.targets) & drop).sum()), int(drop.sum())


def forward_step(model: DropPosModel, images: np.ndarray, task: TaskConfig, sigma: float,
                 seed: int, step: int, cache: SmoothingCache | None = None,
                 masks: BatchMasks | None = None) -> StepResult:
    """Patchify, mask, drop PEs, encode, decode and score one batch.

    ``images`` are normalized ``[B, H, W, C]`` arrays.
    """
    cfg = model.cfg
    patches = vit.patchify(images, cfg.patch_size)
    if masks is None:
        masks = sample_batch_masks(len(images), cfg.num_patches, task.gamma, task.gamma_pos, seed, step)
    if masks.n_keep == masks.ids_vis.shape[1]:
        raise ContractError(
            f"gamma={task.gamma}, gamma_pos={task.gamma_pos} drop no positions; nothing to predict")
    logits, enc = model.forward(patches, masks)
    cache = cache or SmoothingCache(cfg.grid_size, cfg.grid_size)
    w = cache.get(sigma)
    A = affinity(enc.data[:, 0], enc.data[:, 1:], task.tau).A if task.attentive else None
    loss = droppos_loss(logits, masks.targets, masks.anchors, w, A)
    correct, total = dropped_accuracy(logits.data, masks)
    return StepResult(loss, correct / total, total, masks, logits.data)
