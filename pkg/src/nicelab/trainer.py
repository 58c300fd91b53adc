"""Adam training loop, learning-rate schedule, checkpoints and ablation runs."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import LossConfig, LossWeights, total_loss
from .metrics import PhraseResult, box_iou, mask_iou, report_from_results
from .model import ModelConfig, NICEParams, forward, init_params, predict_scene, scene_targets

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NICECKPT"
CKPT_VERSION = 1
LOG_COLUMNS = ("epoch", "step", "lr", "bce", "dice", "smooth_l1", "giou", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-4
    # "step": halve every halving_period epochs, then lr_floor from floor_epoch on; "constant": lr throughout
    schedule: str = "step"
    halving_period: int = 5
    floor_epoch: int = 10
    lr_floor: float = 5e-7
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()
    loss: LossConfig = LossConfig()

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if self.schedule not in ("step", "constant"):
            raise ValueError(f"schedule must be 'step' or 'constant', got {self.schedule!r}")
        self.model.validate()

    def effective_weights(self) -> LossWeights:
        """Loss weights after the mode switches off the other task."""
        w = self.weights
        if self.model.mode == "mask_only":
            return replace(w, smooth_l1=0.0, giou=0.0)
        if self.model.mode == "box_only":
            return replace(w, bce=0.0, dice=0.0)
        return w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.schedule == "constant":
        return cfg.lr
    if epoch >= cfg.floor_epoch:
        return cfg.lr_floor
    halvings = epoch // cfg.halving_period
    # the epoch right before the floor already takes the next halving
    if epoch == cfg.floor_epoch - 1:
        halvings += 1
    return cfg.lr * 0.5 ** halvings


class Adam:
    def __init__(self, params: NICEParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.named_parameters()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.named_parameters()}
        self.t = 0

    def step(self, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.named_parameters():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def build_params(self) -> NICEParams:
        p = init_params(self.config.model, self.config.seed)
        p.load_state_dict(self.params)
        return p


def scene_loss(params: NICEParams, cfg: TrainConfig, scene, targets=None):
    targets = targets or scene_targets(scene, cfg.model.stride)
    w = cfg.effective_weights()
    need_boxes = bool(w.smooth_l1 or w.giou)
    out = forward(params, cfg.model, scene.image, [p.tokens for p in scene.phrases], need_boxes=need_boxes)
    H, W = out.features.shape[:2]
    return total_loss([m.masks for m in out.layer_masks], out.boxes, targets.masks, targets.boxes,
                      W, H, w, cfg.loss)


def scene_gradients(params: NICEParams, cfg: TrainConfig, scene, targets=None):
    params.zero_grad()
    br = scene_loss(params, cfg, scene, targets)
    if np.isfinite(br.total.data) and br.total.requires_grad:
        br.total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.named_parameters()}
    return br, grads


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def _snapshot(params, opt, cfg, epoch, step) -> Checkpoint:
    return Checkpoint(params.state_dict(), cfg, epoch, step,
                      {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()})


def train(dataset, cfg: TrainConfig, params: NICEParams | None = None, callback=None):
    """Train on a list of scenes; returns ``(Checkpoint, log_rows)``.

    Each optimizer step averages per-scene gradients over a batch. Scene order
    is a seeded permutation per epoch.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training needs at least one scene")
    params = params or init_params(cfg.model, cfg.seed)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    targets = [scene_targets(s, cfg.model.stride) for s in dataset]
    order_rng = np.random.default_rng(cfg.seed + 7919)
    rows = []
    step = 0
    last_good = _snapshot(params, opt, cfg, 0, 0)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = order_rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = None
            terms = {k: 0.0 for k in LOG_COLUMNS[3:]}
            for i in batch:
                br, grads = scene_gradients(params, cfg, dataset[i], targets[i])
                row = br.as_row()
                if not all(math.isfinite(v) for v in row.values()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step} (scene {i})", last_good)
                for k in terms:
                    terms[k] += row[k] / len(batch)
                acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
            acc = {k: g / len(batch) for k, g in acc.items()}
            _clip(acc, cfg.clip_norm)
            opt.step(acc, lr)
            step += 1
            rows.append({"epoch": epoch, "step": step, "lr": lr, **terms})
        last_good = _snapshot(params, opt, cfg, epoch + 1, step)
        if callback is not None:
            callback(epoch, rows[-1], params)
        log.debug("epoch %d lr %.2e total %.4f", epoch, lr, rows[-1]["total"])
    return last_good, rows


def evaluate(params: NICEParams, cfg: ModelConfig, scenes, box_source: str = "model", oracle: bool = False):
    """MetricsReport on the feature grid; ``oracle`` substitutes ground truth for predictions."""
    results = []
    for scene in scenes:
        t = scene_targets(scene, cfg.stride)
        if oracle:
            masks, boxes = t.masks, t.boxes
        else:
            masks, boxes = predict_scene(params, cfg, scene, box_source)
        for n in range(len(scene.phrases)):
            results.append(PhraseResult(mask_iou(masks[n], t.masks[n]), box_iou(boxes[n], t.boxes[n]),
                                        bool(t.is_thing[n]), bool(t.is_plural[n])))
    if not results:
        raise ValueError("no phrases to evaluate")
    return report_from_results(results)


# ---------------------------------------------------------------- checkpoint io

def _pack_arrays(arrays: dict):
    index, chunks, offset = [], [], 0
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k], dtype="<f8")
        index.append({"name": k, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    return index, b"".join(chunks)


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    groups = {"params": ckpt.params, "adam_m": ckpt.adam_m, "adam_v": ckpt.adam_v}
    header = {"epoch": ckpt.epoch, "step": ckpt.step, "config": ckpt.config.to_dict(),
              "config_hash": ckpt.config_hash, "groups": {}}
    blobs = []
    base = 0
    for g, arrays in groups.items():
        index, blob = _pack_arrays(arrays)
        for e in index:
            e["offset"] += base
        header["groups"][g] = index
        blobs.append(blob)
        base += len(blob)
    hbytes = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def loads_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("not a NICECKPT file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    header = json.loads(data[16:16 + hlen])
    payload = memoryview(data)[16 + hlen:]
    cfg = TrainConfig.from_dict(header["config"])
    if cfg.digest() != header["config_hash"]:
        raise CheckpointError("checkpoint config hash does not match its stored config")
    groups = {}
    for g, index in header["groups"].items():
        arrays = {}
        for e in index:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(payload[e["offset"]:e["offset"] + 8 * n], dtype="<f8")
            if arr.size != n:
                raise CheckpointError(f"truncated array {e['name']}")
            arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        groups[g] = arrays
    return Checkpoint(groups["params"], cfg, header["epoch"], header["step"], groups["adam_m"], groups["adam_v"])


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- ablations

VARIANT_HELP = ("joint, mask_only, box_only, two_branch select the training mode; "
                "average / topK select the barycenter in joint mode; tight evaluates joint with tight mask boxes")


def variant_config(base: TrainConfig, variant: str):
    """(TrainConfig, box_source) for an ablation variant name."""
    m = base.model
    if variant in ("joint", "mask_only", "box_only", "two_branch"):
        return replace(base, model=replace(m, mode=variant)), "model"
    if variant == "average" or variant.startswith("top"):
        return replace(base, model=replace(m, mode="joint", barycenter=variant)), "model"
    if variant == "tight":
        return replace(base, model=replace(m, mode="joint")), "tight"
    raise ValueError(f"unknown variant {variant!r}; {VARIANT_HELP}")


def train_and_evaluate(dataset, cfg: TrainConfig, box_source: str = "model", eval_scenes=None):
    ckpt, rows = train(dataset, cfg)
    rep = evaluate(ckpt.build_params(), cfg.model, eval_scenes if eval_scenes is not None else dataset, box_source)
    return ckpt, rows, rep


def ablation_run(dataset, variants, base: TrainConfig, eval_scenes=None) -> list:
    """Train each variant with identical seed and budget; one metrics row per variant."""
    table = []
    for v in variants:
        cfg, source = variant_config(base, v)
        _, _, rep = train_and_evaluate(dataset, cfg, source, eval_scenes)
        table.append({"variant": v, "report": rep})
    return table


def format_ablation(table) -> str:
    cols = ["variant"] + [f"mask_{s}" for s in ("all", "thing", "stuff", "single", "plural")] \
        + [f"box_{s}" for s in ("all", "thing", "stuff", "single", "plural")] + ["ie_all"]
    lines = ["\t".join(cols)]

    def fmt(x):
        return "-" if x is None else f"{100 * x:.1f}"

    for row in table:
        r = row["report"]
        vals = [row["variant"]] + [fmt(r.ar_mask[s]) for s in ("all", "thing", "stuff", "single", "plural")] \
            + [fmt(r.ar_box[s]) for s in ("all", "thing", "stuff", "single", "plural")] + [fmt(r.ie["all"])]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"
