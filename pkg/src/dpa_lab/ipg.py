"""Instance-level prompt generation.

Per-category region features are pooled from the frozen model's feature maps
(instance banks), then a gated cross-attention generator turns a learnable
initial prompt into the task's prompt by querying the bank:

    p_dot = softmax(p (I W_k)^T / sqrt(d)) (I W_v)
    p_out = p + alpha * tanh(tau * p_dot)

tau (l x 1) broadcasts over columns, alpha (1 x d) over rows; alpha starts at
zero so a fresh task generates exactly its initial prompt. Finished tasks
freeze their generated prompts and a routing centroid into an append-only
prompt pool; inference picks the entry whose centroid has the highest cosine
similarity with the query image's mean encoder feature.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyBankError, RoutingError
from .rng import SplitMix64, derive
from .serialize import load_tensor, save_tensor
from .tensor import (
    Tensor,
    add,
    broadcast_col_vector,
    broadcast_row_vector,
    elementwise_mul,
    matmul,
    scale,
    softmax_rows,
    tanh_elem,
    transpose,
)

DEFAULT_ROI_GAMMA = 1.69  # region side scale (1.3 squared)


def roi_pool(feature_map, box, gamma: float = DEFAULT_ROI_GAMMA) -> np.ndarray:
    """Mean-pool the feature cells covered by a center-scaled box.

    feature_map is H x W x d (Tensor or array); box is normalized
    (cx, cy, w, h). The box is scaled about its center by gamma, clamped to
    the map, and pooled over every cell its area touches. A degenerate box
    (zero covered cells after clamping) snaps to the nearest cell.
    """
    fmap = feature_map.data if isinstance(feature_map, Tensor) else np.asarray(feature_map)
    if fmap.ndim != 3:
        raise ConfigError(f"roi_pool expects H x W x d, got {fmap.shape}")
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    h, w = fmap.shape[:2]
    cx, cy, bw, bh = (float(v) for v in box)
    bw, bh = bw * gamma, bh * gamma
    x0, x1 = max(cx - bw / 2, 0.0), min(cx + bw / 2, 1.0)
    y0, y1 = max(cy - bh / 2, 0.0), min(cy + bh / 2, 1.0)
    j0, j1 = math.floor(x0 * w), math.ceil(x1 * w) - 1
    i0, i1 = math.floor(y0 * h), math.ceil(y1 * h) - 1
    j0, j1 = max(j0, 0), min(j1, w - 1)
    i0, i1 = max(i0, 0), min(i1, h - 1)
    if i1 < i0 or j1 < j0:
        i0 = i1 = min(max(math.floor(cy * h), 0), h - 1)
        j0 = j1 = min(max(math.floor(cx * w), 0), w - 1)
    return fmap[i0:i1 + 1, j0:j1 + 1].reshape(-1, fmap.shape[2]).mean(axis=0)


@dataclass
class InstanceBank:
    """Per-task, per-layer pooled region features, M per category."""

    task_id: int
    layer_id: int
    class_names: tuple
    vectors: dict  # class name -> (M x d) array
    M: int

    def stacked(self) -> np.ndarray:
        """All vectors as one K x d key matrix, categories in list order."""
        return np.concatenate([self.vectors[c] for c in self.class_names], axis=0)


def _resample(rows: list, M: int, rng: SplitMix64) -> np.ndarray:
    if len(rows) >= M:
        picked = rng.shuffled(range(len(rows)))[:M]
    else:
        picked = list(range(len(rows)))
        picked += [rng.integer(len(rows)) for _ in range(M - len(rows))]
    return np.stack([rows[i] for i in picked], axis=0)


def build_instance_bank(model, dataset, M: int, layer_ids, gamma: float = DEFAULT_ROI_GAMMA,
                        seed: int = 0) -> dict:
    """Instance banks for each requested fusion layer.

    Pools ground-truth boxes on the visual features entering each layer of
    the frozen model (run without prompts, with the task's own class list).
    Deterministic given the seed; categories with fewer than M boxes are
    padded by resampling.
    """
    per_class_rows = {lid: {c: [] for c in dataset.class_names} for lid in layer_ids}
    id_to_name = dict(zip(dataset.category_ids, dataset.class_names))
    for sample in dataset.train:
        grids = model.capture_fusion_inputs(sample.image, list(dataset.class_names))
        for box, label in zip(sample.boxes, sample.labels):
            name = id_to_name[int(label)]
            for lid in layer_ids:
                per_class_rows[lid][name].append(roi_pool(grids[lid], box, gamma))
    banks = {}
    for lid in layer_ids:
        vectors = {}
        for ci, name in enumerate(dataset.class_names):
            rows = per_class_rows[lid][name]
            if not rows:
                raise ConfigError(f"category {name!r} has no boxes in the training split")
            rng = SplitMix64(derive(seed, dataset.task_id, lid, ci))
            vectors[name] = _resample(rows, M, rng)
        banks[lid] = InstanceBank(dataset.task_id, lid, tuple(dataset.class_names), vectors, M)
    return banks


@dataclass
class CcpkiParams:
    """Gated cross-attention generator parameters for one prompt side."""

    w_k: Tensor
    w_v: Tensor
    tau: Tensor    # l x 1, broadcast over columns
    alpha: Tensor  # 1 x d, broadcast over rows; zero at init

    @classmethod
    def init(cls, d: int, l: int, rng: SplitMix64):
        std = 1.0 / math.sqrt(d)
        return cls(
            Tensor(rng.normal_matrix(d, d, std=std), requires_grad=True, is_param=True),
            Tensor(rng.normal_matrix(d, d, std=std), requires_grad=True, is_param=True),
            Tensor(np.ones((l, 1)), requires_grad=True, is_param=True),
            Tensor(np.zeros((1, d)), requires_grad=True, is_param=True),
        )

    def trainables(self):
        return [self.w_k, self.w_v, self.tau, self.alpha]

    def copy(self) -> "CcpkiParams":
        return copy.deepcopy(self)


def ccpki_generate(p_init: Tensor, bank, params: CcpkiParams) -> Tensor:
    """Generate a prompt by querying the instance bank through the gate."""
    if isinstance(bank, InstanceBank):
        keys = Tensor(bank.stacked())
    elif isinstance(bank, Tensor):
        keys = bank
    else:
        keys = Tensor(np.asarray(bank, dtype=np.float64))
    if keys.shape[0] == 0:
        raise EmptyBankError("instance bank is empty")
    d = p_init.shape[1]
    scores = matmul(p_init, transpose(matmul(keys, params.w_k)))
    attn = softmax_rows(scale(scores, 1.0 / math.sqrt(d)))
    p_dot = matmul(attn, matmul(keys, params.w_v))
    gated = tanh_elem(elementwise_mul(broadcast_col_vector(params.tau, d), p_dot))
    update = elementwise_mul(broadcast_row_vector(params.alpha, p_init.shape[0]), gated)
    return add(p_init, update)


def transfer_weights(prev: CcpkiParams, enabled: bool = True,
                     rng: SplitMix64 | None = None) -> CcpkiParams:
    """Next task's generator: deep copy, or fresh init when transfer is off."""
    if enabled:
        return prev.copy()
    if rng is None:
        raise ConfigError("disabled transfer needs an rng for re-initialization")
    d = prev.w_k.shape[0]
    l = prev.tau.shape[0]
    return CcpkiParams.init(d, l, rng)


# --- prompt pool -------------------------------------------------------------

@dataclass
class PoolEntry:
    """Frozen state of one finished task."""

    task_id: int
    class_names: tuple
    centroid: np.ndarray
    prompts_v: list = field(default_factory=list)   # per fusion layer, l x d
    prompts_t: list = field(default_factory=list)
    lambdas_vt: list = field(default_factory=list)  # per fusion layer, 1 x d
    lambdas_tv: list = field(default_factory=list)
    mechanism: str = "dpa"

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.centroid).tobytes())
        for group in (self.prompts_v, self.prompts_t, self.lambdas_vt, self.lambdas_tv):
            for arr in group:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class PromptPool:
    """Append-only store of per-task prompts and routing centroids."""

    def __init__(self):
        self.entries: list[PoolEntry] = []

    def __len__(self):
        return len(self.entries)

    def add(self, entry: PoolEntry):
        self.entries.append(entry)

    def centroids(self) -> np.ndarray:
        return np.stack([e.centroid for e in self.entries], axis=0)

    def digests(self) -> list:
        return [e.digest() for e in self.entries]

    def save(self, directory, hyper: dict | None = None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"task_order": [], "classes": {}, "centroids": {},
                    "mechanisms": {}, "ccpki_hyper": hyper or {}}
        for e in self.entries:
            tid = e.task_id
            manifest["task_order"].append(tid)
            manifest["classes"][str(tid)] = list(e.class_names)
            manifest["centroids"][str(tid)] = [float(v) for v in e.centroid]
            manifest["mechanisms"][str(tid)] = e.mechanism
            for side, group in (("v", e.prompts_v), ("t", e.prompts_t)):
                for lid, arr in enumerate(group):
                    save_tensor(directory / f"prompt_task{tid}_layer{lid}_{side}.bin", arr)
            for side, group in (("vt", e.lambdas_vt), ("tv", e.lambdas_tv)):
                for lid, arr in enumerate(group):
                    save_tensor(directory / f"lambda_task{tid}_layer{lid}_{side}.bin", arr)
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "PromptPool":
        directory = Path(directory)
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
        pool = cls()
        for tid in manifest["task_order"]:
            key = str(tid)
            entry = PoolEntry(
                task_id=tid,
                class_names=tuple(manifest["classes"][key]),
                centroid=np.asarray(manifest["centroids"][key], dtype=np.float64),
                mechanism=manifest["mechanisms"][key],
            )
            for side, target in (("v", entry.prompts_v), ("t", entry.prompts_t)):
                lid = 0
                while (directory / f"prompt_task{tid}_layer{lid}_{side}.bin").exists():
                    target.append(load_tensor(directory / f"prompt_task{tid}_layer{lid}_{side}.bin"))
                    lid += 1
            for side, target in (("vt", entry.lambdas_vt), ("tv", entry.lambdas_tv)):
                lid = 0
                while (directory / f"lambda_task{tid}_layer{lid}_{side}.bin").exists():
                    target.append(load_tensor(directory / f"lambda_task{tid}_layer{lid}_{side}.bin"))
                    lid += 1
            pool.add(entry)
        return pool


def route_task(query_feature: np.ndarray, pool: PromptPool) -> int:
    """Pool index with maximal cosine similarity; ties go to the lowest index."""
    if len(pool) == 0:
        raise RoutingError("routing over an empty prompt pool")
    q = np.asarray(query_feature, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    if qn < 1e-12:
        raise RoutingError("zero-norm query feature")
    best, best_sim = 0, -np.inf
    for i, e in enumerate(pool.entries):
        c = e.centroid
        cn = np.linalg.norm(c)
        sim = -np.inf if cn < 1e-12 else float(q @ c) / (qn * cn)
        if sim > best_sim:
            best, best_sim = i, sim
    return best


def learn_centroid(model, images) -> np.ndarray:
    """Mean of l2-normalized per-image query features, re-normalized."""
    feats = []
    for img in images:
        q = model.route_query(img)
        n = np.linalg.norm(q)
        feats.append(q / n if n > 0 else q)
    mean = np.mean(feats, axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-6:
        warnings.warn("degenerate centroid: normalized features cancel out")
        return mean
    return mean / norm
