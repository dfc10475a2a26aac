"""Miniature vision-language detector.

Pipeline: patch-embedded image tokens and class-name text tokens run through
small self-attention encoders, a stack of bidirectional fusion layers mixes
the two streams (optionally through PA or DPA prompt injection), then a
linear head regresses one box per visual token and classification logits are
the token/text similarity matrix f_v' f_t'^T. Batch size is one image
throughout. All base parameters are frozen after pretraining; continual
methods train only prompt-side state.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .attention import AttnParams, DpaParams, FusionParams, attn, dpa, prompt_attn, x_attn
from .errors import AssignmentError, ConfigError, ShapeError, VocabularyError
from .rng import SplitMix64, derive
from .serialize import load_checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    abs_elem,
    add,
    broadcast_row_vector,
    elementwise_mul,
    gather_rows,
    matmul,
    mean_all,
    scale,
    sigmoid_elem,
    slice_rows,
    softplus_elem,
    sub,
)

MECHANISMS = ("none", "pa", "dpa")
INJECTION_POSITIONS = ("visual", "text", "fusion")


@dataclass
class ToyVlodConfig:
    image_size: int = 32
    patch_size: int = 4
    d: int = 64
    n_vis_layers: int = 2
    n_text_layers: int = 2
    n_fusion_layers: int = 6
    n_heads: int = 1
    prompt_len: int = 10
    prompt_layers: int | None = None          # None = all fusion layers
    injection_positions: tuple = ("fusion",)
    lambda_scale: str = "dim"
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    vocab: tuple = ()

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for pos in self.injection_positions:
            if pos not in INJECTION_POSITIONS:
                raise ConfigError(f"unknown injection position {pos!r}")
        if self.prompt_layers is not None and not (0 <= self.prompt_layers <= self.n_fusion_layers):
            raise ConfigError(f"prompt_layers {self.prompt_layers} out of range")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_visual_tokens(self) -> int:
        return self.grid * self.grid

    def prompted_fusion_layers(self) -> list:
        k = self.n_fusion_layers if self.prompt_layers is None else self.prompt_layers
        return list(range(k))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["injection_positions"] = list(self.injection_positions)
        out["vocab"] = list(self.vocab)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ToyVlodConfig":
        data = dict(data)
        data["injection_positions"] = tuple(data.get("injection_positions", ("fusion",)))
        data["vocab"] = tuple(data.get("vocab", ()))
        return cls(**data)


@dataclass
class Detections:
    """Per-image detections, sorted by descending score (token index breaks ties)."""

    boxes: np.ndarray       # k x 4 normalized (cx, cy, w, h)
    categories: np.ndarray  # k, indices into the presented class-name list
    scores: np.ndarray      # k, in [0, 1]
    tokens: np.ndarray      # k, source visual token of each detection


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = max(a[2] * a[3] + b[2] * b[3] - inter, 1e-12)
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list:
    """Greedy suppression over candidates already sorted by priority."""
    keep = []
    for i in range(len(scores)):
        if all(box_iou(boxes[i], boxes[j]) < iou_threshold for j in keep):
            keep.append(i)
    return keep


class ToyVlodModel:
    def __init__(self, config: ToyVlodConfig, seed: int = 0):
        if not config.vocab:
            raise ConfigError("model needs a nonempty vocabulary")
        self.config = config
        self.name_to_idx = {n: i for i, n in enumerate(config.vocab)}
        c = config
        rng = SplitMix64(derive(seed, 0xB0DE))

        def param(arr):
            return Tensor(arr, requires_grad=False, is_param=True)

        n_patch_in = 3 * c.patch_size * c.patch_size
        self.patch_w = param(rng.normal_matrix(n_patch_in, c.d, std=0.02))
        self.patch_b = param(np.zeros((1, c.d)))
        self.pos_embed = param(rng.normal_matrix(c.n_visual_tokens, c.d, std=0.02))
        self.text_embed = param(rng.normal_matrix(len(c.vocab), c.d, std=0.02))
        self.vis_layers = [AttnParams.init(c.d, rng, n_heads=c.n_heads)
                           for _ in range(c.n_vis_layers)]
        self.text_layers = [AttnParams.init(c.d, rng, n_heads=c.n_heads)
                            for _ in range(c.n_text_layers)]
        self.fusion_layers = [FusionParams.init(c.d, rng, n_heads=c.n_heads)
                              for _ in range(c.n_fusion_layers)]
        self.loc_w = param(rng.normal_matrix(c.d, 4, std=0.02))
        self.loc_b = param(np.zeros((1, 4)))

    # --- parameter plumbing ---------------------------------------------

    def named_params(self) -> dict:
        out = {
            "patch_w": self.patch_w, "patch_b": self.patch_b,
            "pos_embed": self.pos_embed, "text_embed": self.text_embed,
            "loc_w": self.loc_w, "loc_b": self.loc_b,
        }
        for i, layer in enumerate(self.vis_layers):
            out.update({f"vis{i}.w_q": layer.w_q, f"vis{i}.w_k": layer.w_k, f"vis{i}.w_v": layer.w_v})
        for i, layer in enumerate(self.text_layers):
            out.update({f"text{i}.w_q": layer.w_q, f"text{i}.w_k": layer.w_k, f"text{i}.w_v": layer.w_v})
        for i, layer in enumerate(self.fusion_layers):
            for tag, p in (("vt", layer.vt), ("tv", layer.tv)):
                out.update({f"fus{i}.{tag}.w_q": p.w_q, f"fus{i}.{tag}.w_k": p.w_k,
                            f"fus{i}.{tag}.w_v": p.w_v})
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_params().values())

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.named_params()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.named_params()[name].data).tobytes())
        return h.hexdigest()

    def set_trainable(self, flag: bool):
        for t in self.named_params().values():
            t.requires_grad = flag

    def clone(self) -> "ToyVlodModel":
        return copy.deepcopy(self)

    def save(self, directory):
        named = {k: v.data for k, v in self.named_params().items()}
        save_checkpoint(directory, named, meta={"config": self.config.to_dict()})

    @classmethod
    def load(cls, directory) -> "ToyVlodModel":
        named, meta = load_checkpoint(directory)
        model = cls(ToyVlodConfig.from_dict(meta["config"]))
        for name, tensor in model.named_params().items():
            if tensor.data.shape != named[name].shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}")
            tensor.data = np.ascontiguousarray(named[name])
        return model

    # --- encoders ----------------------------------------------------------

    def _patchify(self, img: np.ndarray) -> np.ndarray:
        c = self.config
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (c.image_size, c.image_size, 3):
            raise ConfigError(
                f"image shape {img.shape} does not match config {(c.image_size, c.image_size, 3)}")
        g, p = c.grid, c.patch_size
        patches = img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        return patches.reshape(g * g, p * p * 3)

    def patch_embeddings(self, img) -> Tensor:
        """Embedded patches before positional vectors (exposed for testing)."""
        tokens = matmul(Tensor(self._patchify(img)), self.patch_w)
        return add(tokens, broadcast_row_vector(self.patch_b, tokens.shape[0]))

    def _self_attn_stack(self, f: Tensor, layers, prompts=None) -> Tensor:
        for i, layer in enumerate(layers):
            inj = prompts(i) if prompts is not None else None
            if inj is None:
                f = add(f, attn(f, f, layer))
            else:
                p, dp = inj
                if dp is None:  # prompt-prepended self-attention
                    cat = __import__("dpa_lab.tensor", fromlist=["concat_rows"]).concat_rows([p, f])
                    out = add(cat, attn(cat, cat, layer))
                    f = slice_rows(out, p.shape[0], out.shape[0])
                else:
                    q = matmul(f, layer.w_q)
                    base = _attn_after_q(q, f, layer)
                    inject = _attn_after_q(q, p, layer)
                    lam = broadcast_row_vector(dp.effective("vt", self.config.d), f.shape[0])
                    f = add(add(f, base), elementwise_mul(lam, inject))
        return f

    def encode_image(self, img, prompts=None) -> Tensor:
        f = add(self.patch_embeddings(img), self.pos_embed_tensor())
        return self._self_attn_stack(f, self.vis_layers, prompts)

    def pos_embed_tensor(self) -> Tensor:
        return self.pos_embed

    def encode_text(self, class_names, prompts=None) -> Tensor:
        if not class_names:
            raise ConfigError("encode_text needs at least one class name")
        try:
            idx = [self.name_to_idx[n] for n in class_names]
        except KeyError as e:
            raise VocabularyError(f"class name {e.args[0]!r} not in vocabulary") from None
        f = gather_rows(self.text_embed, idx)
        return self._self_attn_stack(f, self.text_layers, prompts)

    # --- fusion -------------------------------------------------------------

    def fuse(self, f_v: Tensor, f_t: Tensor, prompt_source=None, mechanism: str = "none"):
        """Run the fusion stack; prompt_source(layer) -> (p_v, p_t, DpaParams)."""
        if mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {mechanism!r}")
        if mechanism != "none" and prompt_source is None:
            raise ConfigError(f"mechanism {mechanism!r} requires prompts")
        if mechanism != "none" and self.config.n_heads != 1:
            raise ConfigError("prompt mechanisms are defined for single-head attention")
        prompted = set(self.config.prompted_fusion_layers())
        for i, layer in enumerate(self.fusion_layers):
            inj = prompt_source(i) if (prompt_source is not None and i in prompted) else None
            if mechanism == "none" or inj is None:
                f_t, f_v = x_attn(f_t, f_v, layer)
            elif mechanism == "pa":
                p_v, p_t, _ = inj
                if p_v.shape[1] != self.config.d or p_t.shape[1] != self.config.d:
                    raise ConfigError(f"prompt width mismatch at fusion layer {i}")
                out_t, out_v = prompt_attn(f_t, f_v, p_t, p_v, layer)
                l = p_t.shape[0]
                f_t = slice_rows(out_t, l, out_t.shape[0])
                f_v = slice_rows(out_v, l, out_v.shape[0])
            else:
                p_v, p_t, dp = inj
                if p_v.shape[1] != self.config.d or p_t.shape[1] != self.config.d:
                    raise ConfigError(f"prompt width mismatch at fusion layer {i}")
                f_t, f_v = dpa(f_t, f_v, p_t, p_v, layer, dp)
        return f_v, f_t

    def capture_fusion_inputs(self, img, class_names) -> list:
        """Visual features entering each fusion layer (frozen, no prompts), as grids."""
        g = self.config.grid
        f_v = self.encode_image(img)
        f_t = self.encode_text(class_names)
        grids = []
        for layer in self.fusion_layers:
            grids.append(f_v.data.reshape(g, g, self.config.d).copy())
            f_t, f_v = x_attn(f_t, f_v, layer)
        return grids

    # --- heads --------------------------------------------------------------

    def head_outputs(self, f_v: Tensor, f_t: Tensor):
        """(logits Lv x C, boxes Lv x 4) from fused features."""
        boxes = sigmoid_elem(add(matmul(f_v, self.loc_w),
                                 broadcast_row_vector(self.loc_b, f_v.shape[0])))
        logits = matmul(f_v, transpose_t(f_t))
        return logits, boxes

    def predict(self, f_v: Tensor, f_t: Tensor) -> Detections:
        logits, boxes = self.head_outputs(f_v, f_t)
        return self.detections_from(logits.data, boxes.data)

    def detections_from(self, logits: np.ndarray, boxes: np.ndarray) -> Detections:
        c = self.config
        scores = 1.0 / (1.0 + np.exp(-logits))
        tok, cls = np.nonzero(scores >= c.score_threshold)
        if tok.size == 0:
            empty = np.zeros((0,))
            return Detections(np.zeros((0, 4)), empty.astype(int), empty, empty.astype(int))
        cand_scores = scores[tok, cls]
        order = np.lexsort((tok, -cand_scores))  # score desc, then token asc
        tok, cls, cand_scores = tok[order], cls[order], cand_scores[order]
        keep_mask = np.zeros(len(tok), dtype=bool)
        for cat in np.unique(cls):
            idx = np.nonzero(cls == cat)[0]
            kept = nms(boxes[tok[idx]], cand_scores[idx], c.nms_iou)
            keep_mask[idx[kept]] = True
        tok, cls, cand_scores = tok[keep_mask], cls[keep_mask], cand_scores[keep_mask]
        out_boxes = np.clip(boxes[tok], 0.0, 1.0)
        return Detections(out_boxes, cls.astype(int), cand_scores, tok.astype(int))

    def forward_raw(self, img, class_names, prompt_source=None, mechanism: str = "none"):
        f_v = self.encode_image(img)
        f_t = self.encode_text(class_names)
        f_v, f_t = self.fuse(f_v, f_t, prompt_source, mechanism)
        logits, boxes = self.head_outputs(f_v, f_t)
        return logits, boxes, f_v, f_t

    def detect(self, img, class_names, prompt_source=None, mechanism: str = "none") -> Detections:
        logits, boxes, _, _ = self.forward_raw(img, class_names, prompt_source, mechanism)
        return self.detections_from(logits.data, boxes.data)

    def route_query(self, img) -> np.ndarray:
        """Mean last-layer visual-encoder feature; prompt-independent."""
        return self.encode_image(img).data.mean(axis=0)

    # --- loss -----------------------------------------------------------------

    def assign_positives(self, gt_boxes: np.ndarray, gt_class_idx) -> list:
        """(token, class_idx, box) per ground-truth object via its center cell."""
        g = self.config.grid
        out = []
        for box, ci in zip(gt_boxes, gt_class_idx):
            col, row = int(box[0] * g), int(box[1] * g)
            if not (0 <= col < g and 0 <= row < g):
                raise AssignmentError(f"box center {box[:2]} outside the token grid")
            out.append((row * g + col, int(ci), np.asarray(box, dtype=np.float64)))
        return out

    def loss(self, logits: Tensor, boxes: Tensor, gt_boxes, gt_class_idx) -> Tensor:
        """Binary cross-entropy over token/class logits plus L1 on positive boxes.

        Positive cells come from ground-truth box centers; both terms are
        means with weight 1.0 each.
        """
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(gt_boxes) == 0:
            raise AssignmentError("loss needs at least one ground-truth box")
        positives = self.assign_positives(gt_boxes, gt_class_idx)
        targets = np.zeros(logits.shape)
        box_tok, box_tgt = [], []
        for tok, ci, box in positives:
            targets[tok, ci] = 1.0
            box_tok.append(tok)
            box_tgt.append(box)
        y = Tensor(targets)
        one_minus_y = Tensor(1.0 - targets)
        bce_pos = elementwise_mul(y, softplus_elem(scale(logits, -1.0)))
        bce_neg = elementwise_mul(one_minus_y, softplus_elem(logits))
        bce = mean_all(add(bce_pos, bce_neg))
        pred = gather_rows(boxes, box_tok)
        l1 = mean_all(abs_elem(sub(pred, Tensor(np.stack(box_tgt)))))
        return add(bce, l1)


def _attn_after_q(qp: Tensor, kv: Tensor, layer: AttnParams) -> Tensor:
    from .attention import _attn_from_q
    return _attn_from_q(qp, kv, layer)


def transpose_t(t: Tensor) -> Tensor:
    from .tensor import transpose
    return transpose(t)
