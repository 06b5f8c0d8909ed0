"""
Train at 8x8, test at 32x32
===========================

The SSM model rescales its step sizes when the input grows, so its
kernels cover the same physical extent. A learned 3x3 kernel cannot.
This is a short run; the acceptance suite uses a longer budget.
"""
import numpy as np

from ndssm import (Conv2dBaselineModel, DatasetManifest, IsotropicModel, ModelConfig,
                   SyntheticDataset, TrainConfig, evaluate_zero_shot, train)

data = SyntheticDataset(DatasetManifest(n_val=300))
cfg = ModelConfig(depth=3, width=32, resolution=(8, 8), seed=0)

for name, model, alpha in [("ssm", IsotropicModel(cfg), 0.2),
                           ("conv", Conv2dBaselineModel(cfg), np.inf)]:
    train(model, data, TrainConfig(epochs=6, lr=0.01, warmup_steps=40, alpha=alpha))
    accs = [evaluate_zero_shot(model, data, r)[0] for r in ((8, 8), (16, 16), (32, 32))]
    print(f"{name:5s} 8->8 {accs[0]:.3f}  8->16 {accs[1]:.3f}  8->32 {accs[2]:.3f}")
