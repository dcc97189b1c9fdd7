"""Train a small detector on the easy split, then score it with the mAP engine.

Takes about a minute.  Run: python3 demos/05_train_and_evaluate.py [OUT_DIR]
"""
import sys
import tempfile
from pathlib import Path

from spmamba import data as D
from spmamba.model import ModelConfig
from spmamba.train import TrainConfig, evaluate, load_checkpoint, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="spmamba_train_"))
D.generate(D.spec_for("easy", 64, seed=0), 48, out / "train")
D.generate(D.spec_for("easy", 64, seed=1), 16, out / "val")
images, targets = D.load_arrays(out / "train")
val = D.load_arrays(out / "val")

model_cfg = ModelConfig(width=8, input_size=64, state_dim=4)
train_cfg = TrainConfig(epochs=8, eval_every=4, seed=0)
print("epoch,loss_box,loss_obj,loss_cls,map50,map5095")
train(model_cfg, train_cfg, images, targets, out / "run", val=val, progress=print)

# best.ckpt holds the epoch with the highest validation mAP@0.5.
model, meta, _ = load_checkpoint(out / "run" / "best.ckpt")
result, dets = evaluate(model, *val)
print(f"best epoch {meta['epoch']}: mAP@0.5 {result.map50:.3f}, mAP@0.5:0.95 {result.map5095:.3f}, "
      f"{len(dets)} detections")
for m in result.per_class:
    ap = "n/a" if m.ap50 is None else f"{m.ap50:.3f}"
    print(f"  {D.CLASS_NAMES[m.class_id]:12s} ground truth {m.n_gt:3d}  AP@0.5 {ap}")
