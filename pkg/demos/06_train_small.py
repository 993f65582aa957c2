"""End-to-end training on a reduced configuration (a few minutes on CPU).

The full-scale acceptance run (default config, 200 epochs) lives in
tests/test_acceptance.py; this demo shrinks widths and epochs to show the
loop, the loss mix, and the metrics output quickly.

Run:  python3 demos/06_train_small.py
"""

import tempfile

from frustumssc.harness.config import RunConfig
from frustumssc.harness.train import train

cfg = RunConfig(
    width_2d=32,
    base_ch_3d=32,
    epochs=30,
    eval_every=5,
    ckpt_every=1000,
    n_train_scenes=4,
    n_eval_scenes=0,  # overfit mode: evaluate on the training scenes
)

with tempfile.TemporaryDirectory() as out:
    summary = train(cfg, out, log=print)
    print(f"\nfinal train-set IoU {summary['final_iou']:.3f}, mIoU {summary['final_miou']:.3f}")
    print("\nmetrics.csv tail:")
    for line in open(summary["csv_path"]).read().strip().splitlines()[-4:]:
        print("  " + line)
