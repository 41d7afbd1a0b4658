"""A 16x16 end-to-end loss used by the gradient checks."""

import numpy as np

from motionbox.boxes import Box
from motionbox.model import ModelConfig, MotionSegModel
from motionbox.pairwise import SupervisionParams
from motionbox.training import FrameRecord, GTInstance, RunConfig, TrainConfig, prepare_sample, sample_losses

TINY_MODEL = ModelConfig(
    widths=(4, 6, 8), mask_branch_width=4, mask_branch_layers=1, c_mask=4, head_width=4, center_radius=1.5
)


def tiny_record(seed=0):
    rng = np.random.default_rng(seed)
    frame = (np.array([90, 100, 80]) + rng.integers(-1, 2, size=(16, 16, 3))).astype(np.uint8)
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:11, 5:13] = True
    frame[mask] = np.array([170, 120, 60]) + rng.integers(-1, 2, size=(int(mask.sum()), 3))
    flow = np.zeros((16, 16, 2), dtype=np.float32)
    flow[mask] = (2.0, -1.0)
    return FrameRecord(0, frame, flow, [GTInstance(mask, Box.from_mask(mask), 1)])


def tiny_pipeline(seed=0, step=10):
    """Returns ``(loss_fn, inputs)`` covering every layer from pixels to the total loss."""
    run = RunConfig(
        model=TINY_MODEL,
        supervision=SupervisionParams(),
        train=TrainConfig(iterations=20, max_masks_per_instance=2),
    )
    model = MotionSegModel(TINY_MODEL, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # move the head away from its init so that the mask and box terms carry real gradient
    for t in model.parameters():
        t.data = t.data + 0.05 * rng.standard_normal(t.shape)
    s = prepare_sample(tiny_record(seed), run)
    names = ["backbone.s0.c0.weight", "mask_branch.flow.out.weight", "mask_branch.img.out.bias", "head.out.bias"]
    inputs = [s.image, s.flow] + [model.params[n] for n in names]
    schedule = run.train.schedule

    def loss(*_):
        return sample_losses(model, s, step, schedule)[0]

    return loss, inputs, s
