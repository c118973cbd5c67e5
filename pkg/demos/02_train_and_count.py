"""
Two-stage training on a small synthetic set, then counting a held-out image.

A few minutes on one CPU core. Writes checkpoints, density maps and an overlay
PNG under ``demo_out/``.

Run:  python3 demos/02_train_and_count.py
"""

from pathlib import Path

import numpy as np
import torch

from repcount.checkpoint import save_checkpoint
from repcount.config import desk_config
from repcount.dataio import ClassSpec, SceneSpec, generate_dataset
from repcount.densitymap import save_density
from repcount.pipeline import RepCounter, evaluate_dataset
from repcount.render import overlay
from repcount.train import train_dpn, train_reprpn

torch.set_num_threads(1)
out = Path("demo_out")
out.mkdir(exist_ok=True)

spec = SceneSpec(classes=[ClassSpec("circle", (220, 60, 60), (8, 12), (5, 30))])
train = generate_dataset(spec, 40, seed=1, prefix="train")
test = generate_dataset(spec, 10, seed=2, prefix="test")

cfg = desk_config(epochs_rpn=15, epochs_dpn=10)
log = lambda rec: print(f"  {rec['stage']} epoch {rec['epoch']:2d}  loss {rec['loss']:.5f}")

print("stage 1: RepRPN")
rpn_ck = train_reprpn(train, cfg, sink=log)
save_checkpoint(out / "rpn.ckpt", rpn_ck)

print("stage 2: DPN on exemplars picked by the frozen RepRPN")
dpn_ck = train_dpn(train, rpn_ck, cfg, sink=log)
save_checkpoint(out / "dpn.ckpt", dpn_ck)
print("  exemplar targets:", dpn_ck.meta["exemplar_stats"])

counter = RepCounter.from_checkpoints(rpn_ck, dpn_ck)
report = evaluate_dataset(counter, test, ks=(1, 3))
mean = np.mean([im.gt_count for im in train])
baseline = np.mean([abs(im.gt_count - mean) for im in test])
print(f"test top-1 MAE {report['metrics']['1']['mae']:.2f} "
      f"(predict-the-mean baseline {baseline:.2f}), "
      f"repetition/count correlation {report['top1_repetition_pearson']:.2f}")

img = test[0]
exemplars = counter.predict(img.image, top_k=3)
for i, e in enumerate(exemplars):
    save_density(out / f"exemplar{i}", e.density)
    print(f"exemplar {i}: box {np.round(e.proposal.box, 1)}  repetition {e.proposal.repetition:.1f}  "
          f"DPN count {e.count:.1f}  (truth {img.gt_count})")
overlay(img.image, exemplars[0].density, [e.proposal.box for e in exemplars]).save(out / "overlay.png")
print(f"wrote {out}/overlay.png")
