"""Flagging bad segmentations without ground truth.

The confidence score compares the predicted foreground with its entropy.
On the shifted test set we label each (image, class) pair as a failure when
Dice < 0.8 and ASSD > 2 voxels, and ask how well the score ranks them.
"""

import numpy as np
from scipy import stats

from sghmcseg.config import RunConfig, derive_seed
from sghmcseg.failure import failure_report
from sghmcseg.protocols import make_protocol, run_protocol
from sghmcseg.synth import generate_dataset

cfg = RunConfig(seed=1)
ds = generate_dataset(cfg.scene, cfg.data.counts(), derive_seed(cfg.seed, "data"))
res = run_protocol(make_protocol("sghmc-multi", cfg), ds, cfg.seed, cfg)

x, y = ds["test_shift"]
rep = failure_report(res.predict(x), y, [1, 2, 3])
conf, dice = rep.column("confidence"), rep.column("dice")
print(f"{int(rep.column('failure').sum())} failures among {len(rep.rows)} (image, class) pairs")
print("AUC per class:", {k: round(v, 3) for k, v in rep.auc.items()})
print(f"Spearman(confidence, Dice) = {stats.spearmanr(conf, dice)[0]:.3f}")
worst = np.argsort(conf)[:5]
for i in worst:
    r = rep.rows[i]
    print(f"  image {r['image']:2d} class {r['class']}: confidence {r['confidence']:.3f}, Dice {r['dice']:.3f}")
