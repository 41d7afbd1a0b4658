"""Training loop, checkpointing, evaluation driver and ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, load_checkpoint, save_checkpoint
from .boxes import Box
from .evaluation import EvalResult, GroundTruth, Prediction, evaluate_predictions
from .imaging import flow_to_rgb, neutral_flow_rgb, read_flo, read_mask_png, read_png, srgb_to_lab
from .losses import LossReport, LossSchedule, detection_loss, pairwise_loss, projection_loss, total_loss
from .model import FusionSpec, ModelConfig, MotionSegModel, prepare_flow, prepare_image
from .pairwise import SupervisionParams, build_pair_set, resample_nearest

log = logging.getLogger(__name__)

FINAL_CHECKPOINT = "model_final.mswt"
LAST_GOOD_CHECKPOINT = "model_last_good.mswt"
RUN_CONFIG = "run_config.json"
TRAIN_LOG = "train_log.jsonl"


class TrainingError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: float = 0.8
    lr_decay: float = 0.1
    lr_warmup_steps: int = 100
    grad_clip: float = 10.0
    lambda_proj: float = 1.0
    lambda_pair: float = 1.0
    pairwise_warmup_fraction: float = 0.1
    max_masks_per_instance: int = 4
    flow_input: str = "rgb"
    log_interval: int = 50
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.flow_input not in ("rgb", "neutral"):
            raise ValueError("flow_input must be 'rgb' or 'neutral'")
        if self.log_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("intervals must be positive")

    def lr_at(self, step):
        lr = self.lr
        if step >= int(self.lr_decay_at * self.iterations):
            lr *= self.lr_decay
        if self.lr_warmup_steps > 0 and step < self.lr_warmup_steps:
            lr *= (step + 1) / self.lr_warmup_steps
        return lr

    @property
    def schedule(self):
        return LossSchedule(
            self.lambda_proj, self.lambda_pair, int(round(self.pairwise_warmup_fraction * self.iterations))
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything that defines a training run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    supervision: SupervisionParams = field(default_factory=SupervisionParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        m = dict(d.get("model", {}))
        if "fusion" in m and isinstance(m["fusion"], dict):
            m["fusion"] = FusionSpec(**m["fusion"])
        if "widths" in m:
            m["widths"] = tuple(m["widths"])
        return cls(ModelConfig(**m), SupervisionParams(**d.get("supervision", {})), TrainConfig(**d.get("train", {})))


# ---------------------------------------------------------------------------
# data


@dataclass
class GTInstance:
    mask: np.ndarray
    box: Box
    category_id: int


@dataclass
class FrameRecord:
    image_id: int
    frame: np.ndarray  # HxWx3 uint8
    flow: np.ndarray  # HxWx2
    instances: list

    @property
    def hw(self):
        return self.frame.shape[:2]


def load_split(data_dir):
    with open(os.path.join(data_dir, "annotations.json")) as fh:
        doc = json.load(fh)
    by_image: dict = {}
    for a in doc["annotations"]:
        by_image.setdefault(a["image_id"], []).append(a)
    records = []
    for img in sorted(doc["images"], key=lambda r: r["id"]):
        frame = read_png(os.path.join(data_dir, img["file_name"]))
        flow = read_flo(os.path.join(data_dir, img["flow_file"]))
        insts = []
        for a in sorted(by_image.get(img["id"], []), key=lambda r: r["id"]):
            mask = read_mask_png(os.path.join(data_dir, a["mask_file"]))
            x, y, w, h = a["bbox"]
            insts.append(GTInstance(mask, Box(x, y, x + w, y + h), a["category_id"]))
        records.append(FrameRecord(img["id"], frame, flow, insts))
    if not records:
        raise ValueError(f"{data_dir}: empty dataset")
    return records


def flow_features(record, flow_input):
    if flow_input == "neutral":
        return neutral_flow_rgb(*record.hw)
    return flow_to_rgb(record.flow)


def assign_targets(boxes, grid_hw, stride, center_radius):
    """Per-location objectness, LTRB (in stride units) and owning instance.

    A location is positive for a box when its center lies inside the box and
    within ``center_radius`` cells of the box center; the cell holding the box
    center is always positive. Overlaps go to the smaller box.
    """
    gh, gw = grid_hw
    obj = np.zeros((gh, gw))
    ltrb = np.zeros((4, gh, gw))
    owner = np.full((gh, gw), -1, dtype=np.int64)
    best_area = np.full((gh, gw), np.inf)
    cy = (np.arange(gh) + 0.5) * stride
    cx = (np.arange(gw) + 0.5) * stride
    for k, b in enumerate(boxes):
        bx = 0.5 * (b.x0 + b.x1)
        by = 0.5 * (b.y0 + b.y1)
        r = center_radius * stride
        inside = (
            (cx[None, :] > b.x0) & (cx[None, :] < b.x1) & (cy[:, None] > b.y0) & (cy[:, None] < b.y1)
        )
        near = (np.abs(cx[None, :] - bx) <= r) & (np.abs(cy[:, None] - by) <= r)
        pos = inside & near
        rc = min(int(by // stride), gh - 1), min(int(bx // stride), gw - 1)
        pos[rc] = True
        take = pos & (b.area < best_area)
        owner[take] = k
        best_area[take] = b.area
        ys, xs = np.nonzero(take)
        ltrb[0, ys, xs] = (cx[xs] - b.x0) / stride
        ltrb[1, ys, xs] = (cy[ys] - b.y0) / stride
        ltrb[2, ys, xs] = (b.x1 - cx[xs]) / stride
        ltrb[3, ys, xs] = (b.y1 - cy[ys]) / stride
    obj[owner >= 0] = 1.0
    return obj, ltrb, owner


@dataclass
class PreparedSample:
    image: ad.Tensor
    flow: ad.Tensor
    obj: np.ndarray
    ltrb: np.ndarray
    owner: np.ndarray
    mask_locations: list  # per instance: [(row, col), ...]
    box_cells: list
    pair_sets: list
    hw: tuple


def prepare_sample(record, run):
    mc, tc = run.model, run.train
    stride = mc.stride
    h, w = record.hw
    gh, gw = -(-h // stride), -(-w // stride)
    flow_rgb = flow_features(record, tc.flow_input)
    boxes = [i.box for i in record.instances]
    obj, ltrb, owner = assign_targets(boxes, (gh, gw), stride, mc.center_radius)
    lab_grid = resample_nearest(srgb_to_lab(record.frame), gh, gw)
    if run.supervision.flow_similarity_space == "uv":
        flow_grid = resample_nearest(record.flow.astype(np.float64), gh, gw)
    else:
        flow_grid = resample_nearest(flow_rgb, gh, gw)
    locs, cells, pairs = [], [], []
    for k, b in enumerate(boxes):
        ys, xs = np.nonzero(owner == k)
        c = b.to_grid(stride)
        c = (max(c[0], 0), max(c[1], 0), min(c[2], gh), min(c[3], gw))
        # nearest-to-center locations first
        cyc, cxc = 0.5 * (c[0] + c[2]) - 0.5, 0.5 * (c[1] + c[3]) - 0.5
        order = np.lexsort((xs, ys, (ys - cyc) ** 2 + (xs - cxc) ** 2))
        locs.append([(int(ys[i]), int(xs[i])) for i in order[: tc.max_masks_per_instance]])
        cells.append(c)
        pairs.append(build_pair_set(c, lab_grid, flow_grid, run.supervision))
    return PreparedSample(
        prepare_image(record.frame), prepare_flow(flow_rgb), obj, ltrb, owner, locs, cells, pairs, (h, w)
    )


# ---------------------------------------------------------------------------
# one forward/backward


def sample_losses(model, s, step, schedule):
    feats = model.encode(s.image, s.flow)
    out = model.head(feats.f_det)
    det, _, _ = detection_loss(out.obj_logits, out.ltrb, s.obj, s.ltrb, s.owner >= 0)
    proj_terms, pair_terms = [], []
    n_pairs = 0
    for k, locs in enumerate(s.mask_locations):
        for r, c in locs:
            m = model.mask_for(feats.mask, out.controllers, r, c, s.hw)
            proj_terms.append(projection_loss(m, s.box_cells[k]))
            pair_terms.append(pairwise_loss(m, s.pair_sets[k]))
            n_pairs += len(s.pair_sets[k])
    if proj_terms:
        proj = _mean(proj_terms)
        pair = _mean(pair_terms)
    else:
        proj = ad.Tensor(np.zeros(1))
        pair = ad.Tensor(np.zeros(1))
    tot = total_loss(det, proj, pair, step, schedule)
    return tot, det, proj, pair, n_pairs


def _mean(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.affine(acc, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# optimizer + checkpoints


class SGD:
    def __init__(self, params, momentum, weight_decay, grad_clip):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self):
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
        return math.sqrt(sq)

    def step(self, lr):
        norm = self.grad_norm()
        scale = self.grad_clip / norm if self.grad_clip and norm > self.grad_clip else 1.0
        for k, p in self.params.items():
            g = p.grad * scale if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers[k]
            buf *= self.momentum
            buf += g
            p.data -= lr * buf
        return norm


def write_checkpoint(path, model, optimizer, step):
    arrays = dict(model.state_dict())
    if optimizer is not None:
        for k, v in optimizer.buffers.items():
            arrays[f"optim.momentum.{k}"] = v
    arrays["meta.step"] = np.array(float(step))
    save_checkpoint(path, arrays)


def read_checkpoint(path):
    arrays = load_checkpoint(path)
    step = int(arrays.pop("meta.step", np.array(0.0)))
    momentum = {k[len("optim.momentum.") :]: v for k, v in arrays.items() if k.startswith("optim.momentum.")}
    params = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    return params, momentum, step


def find_run_config(checkpoint_path):
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), RUN_CONFIG)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {RUN_CONFIG} next to {checkpoint_path}")
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def load_model(checkpoint_path, run=None):
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(checkpoint_path)
    run = run or find_run_config(checkpoint_path)
    model = MotionSegModel(run.model, seed=run.train.seed)
    params, _, _ = read_checkpoint(checkpoint_path)
    model.load_state_dict(params)
    return model, run


# ---------------------------------------------------------------------------
# training


def train(run, data, out_dir, resume=None, progress=None):
    """Train on ``data`` (a directory or loaded records); returns the final checkpoint path."""
    tc = run.train
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RUN_CONFIG), "w") as fh:
        json.dump(run.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    records = load_split(data) if isinstance(data, str) else data
    prepared = [prepare_sample(r, run) for r in records]

    model = MotionSegModel(run.model, seed=tc.seed)
    opt = SGD(model.params, tc.momentum, tc.weight_decay, tc.grad_clip)
    start = 0
    log_path = os.path.join(out_dir, TRAIN_LOG)
    if resume:
        params, momentum, start = read_checkpoint(resume)
        model.load_state_dict(params)
        for k, v in momentum.items():
            if k in opt.buffers:
                opt.buffers[k] = np.array(v)
        log_mode = "a"
    else:
        log_mode = "w"

    order_rng = np.random.default_rng([tc.seed, 1])
    n = len(prepared)
    # the batch stream is a pure function of the seed; resuming replays it up to ``start``
    def batches():
        while True:
            perm = order_rng.permutation(n)
            yield from perm

    stream = batches()
    for _ in range(start * tc.batch_size):
        next(stream)

    schedule = tc.schedule
    last_good = model.state_dict()
    last_good_buffers = {k: v.copy() for k, v in opt.buffers.items()}
    with open(log_path, log_mode) as logf:
        for step in range(start, tc.iterations):
            opt.zero_grad()
            sums = np.zeros(4)
            n_pairs = 0
            for _ in range(tc.batch_size):
                s = prepared[next(stream)]
                with Graph() as g:
                    tot, det, proj, pair, npairs = sample_losses(model, s, step, schedule)
                    scaled = ad.affine(tot, 1.0 / tc.batch_size)
                vals = np.array([tot.item(), det.item(), proj.item(), pair.item()])
                if not np.all(np.isfinite(vals)):
                    _save_last_good(out_dir, model, opt, last_good, last_good_buffers, step)
                    raise TrainingError(f"non-finite loss at step {step}: {vals.tolist()}", step)
                g.backward(scaled)
                sums += vals
                n_pairs += npairs
            opt.step(tc.lr_at(step))
            if (step + 1) % tc.log_interval == 0 or step == start:
                avg = sums / tc.batch_size
                rep = LossReport(step + 1, avg[3], avg[2], avg[1], avg[0], n_pairs)
                logf.write(rep.to_json_line() + "\n")
                logf.flush()
                if progress:
                    progress(rep)
            if (step + 1) % tc.checkpoint_interval == 0 and step + 1 < tc.iterations:
                write_checkpoint(os.path.join(out_dir, f"model_{step + 1:06d}.mswt"), model, opt, step + 1)
            if (step + 1) % tc.log_interval == 0:
                last_good = model.state_dict()
                last_good_buffers = {k: v.copy() for k, v in opt.buffers.items()}
    final = os.path.join(out_dir, FINAL_CHECKPOINT)
    write_checkpoint(final, model, opt, max(tc.iterations, start))
    return final


def _save_last_good(out_dir, model, opt, state, buffers, step):
    tmp = MotionSegModel(model.config)
    tmp.load_state_dict(state)
    opt_copy = SGD(tmp.params, opt.momentum, opt.weight_decay, opt.grad_clip)
    opt_copy.buffers = buffers
    write_checkpoint(os.path.join(out_dir, LAST_GOOD_CHECKPOINT), tmp, opt_copy, step)


# ---------------------------------------------------------------------------
# evaluation


def predict_records(model, records, flow_input):
    preds = []
    for r in records:
        dets, _ = model.predict(prepare_image(r.frame), prepare_flow(flow_features(r, flow_input)))
        for d in dets:
            preds.append(Prediction(r.image_id, 1, d.score, tuple(d.box), d.mask))
    return preds


def ground_truths(records):
    return [GroundTruth(r.image_id, i.category_id, tuple(i.box), i.mask) for r in records for i in r.instances]


def evaluate(model, data, flow_input="rgb"):
    records = load_split(data) if isinstance(data, str) else data
    if not records:
        raise ValueError("empty dataset")
    h, w = records[0].hw
    preds = predict_records(model, records, flow_input)
    return evaluate_predictions(ground_truths(records), preds, h * w, len(records))


def evaluate_checkpoint(checkpoint_path, data):
    model, run = load_model(checkpoint_path)
    return evaluate(model, data, run.train.flow_input)


# ---------------------------------------------------------------------------
# ablation

COMPONENT_AXES = ("detection_motion", "segmentation_motion", "pairwise_flow")
FUSION_AXES = ("detection_fusion", "mask_fusion")


def ablation_variants(base, axes):
    """(label, RunConfig) rows: component "w/o" rows, the full model, then fusion rows."""
    rows = []
    axes = set(axes)
    unknown = axes - set(COMPONENT_AXES) - set(FUSION_AXES) - {"components", "fusion"}
    if unknown:
        raise ValueError(f"unknown ablation axes: {sorted(unknown)}")
    if "components" in axes:
        axes |= set(COMPONENT_AXES)
    if "fusion" in axes:
        axes |= set(FUSION_AXES)
    m = base.model
    replace = dataclasses.replace
    if "detection_motion" in axes:
        rows.append(("w/o motion feat. for detection", replace(base, model=replace(m, motion_for_detection=False))))
    if "segmentation_motion" in axes:
        rows.append(("w/o motion feat. for segmentation", replace(base, model=replace(m, motion_for_segmentation=False))))
    if "pairwise_flow" in axes:
        rows.append(
            ("w/o optical flow for pairwise loss", replace(base, supervision=replace(base.supervision, tau_flow=0.0)))
        )
    fusion_rows = []
    if "detection_fusion" in axes:
        for mode in ("max", "sum"):
            spec = replace(m.fusion, detection_fusion=mode)
            fusion_rows.append((f"detection fusion: {mode}", replace(base, model=replace(m, fusion=spec))))
    if "mask_fusion" in axes:
        for mode in ("max", "sum", "concat"):
            spec = replace(m.fusion, mask_fusion=mode)
            fusion_rows.append((f"mask fusion: {mode}", replace(base, model=replace(m, fusion=spec))))
    if rows or not fusion_rows:
        rows.append(("full model", base))
    return rows + fusion_rows


def ablate(base, axes, train_data, eval_data, out_dir, progress=None):
    """Train and evaluate each variant; returns a list of (label, EvalResult)."""
    results = []
    cache = {}
    for i, (label, run) in enumerate(ablation_variants(base, axes)):
        key = json.dumps(run.to_dict(), sort_keys=True)
        if key not in cache:
            ckpt = train(run, train_data, os.path.join(out_dir, f"variant_{i:02d}"), progress=progress)
            model, _ = load_model(ckpt, run)
            cache[key] = evaluate(model, eval_data, run.train.flow_input)
        results.append((label, cache[key]))
    return results


ABLATION_COLUMNS = ("AP", "AP50", "AP75", "APs", "APm", "APl")


def ablation_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant"] + [f"mask_{c}" for c in ABLATION_COLUMNS] + [f"box_{c}" for c in ABLATION_COLUMNS])
    for label, res in results:
        w.writerow([label] + [f"{res.mask[c]:.6f}" for c in ABLATION_COLUMNS] + [f"{res.box[c]:.6f}" for c in ABLATION_COLUMNS])
    return buf.getvalue()


def ablation_table(results):
    width = max(len(label) for label, _ in results)
    head = f"{'variant':<{width}}  " + "".join(f"{'m.' + c:>8}" for c in ABLATION_COLUMNS[:3])
    head += "".join(f"{'b.' + c:>8}" for c in ABLATION_COLUMNS[:3])
    lines = [head]
    for label, res in results:
        row = f"{label:<{width}}  " + "".join(f"{100 * res.mask[c]:8.1f}" for c in ABLATION_COLUMNS[:3])
        row += "".join(f"{100 * res.box[c]:8.1f}" for c in ABLATION_COLUMNS[:3])
        lines.append(row)
    return "\n".join(lines)


__all__ = [
    "EvalResult",
    "RunConfig",
    "TrainConfig",
    "TrainingError",
    "ablate",
    "ablation_variants",
    "assign_targets",
    "evaluate",
    "evaluate_checkpoint",
    "load_split",
    "train",
]
