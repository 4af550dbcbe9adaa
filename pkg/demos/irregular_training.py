"""Train on synthetic SPD-geodesic sequences, then on a copy with cells dropped.

Run with ``python3 demos/irregular_training.py [iterations]`` (default 400,
under a minute). Each class drifts along its own geodesic of
covariance matrices; the model sees only the raw observations.
"""
import sys
import time

import numpy as np

from odergru import model as M
from odergru.data import drop_observations, synth_manifold_sequences
from odergru.verify import synthetic_model_config

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 400
seed = 0
base = synth_manifold_sequences(n_per_class=100, T=20, d_channels=4, seed=seed)
print(f"{len(base)} sequences, {len(base.indices('test'))} held out")

for frac in (0.0, 0.5):
    ds = drop_observations(base, frac, seed) if frac else base
    lengths = [len(s) for s in ds.sequences]
    for use_ode in (True, False):
        cfg = synthetic_model_config(use_ode=use_ode)
        tcfg = M.TrainConfig(lr=1e-2, max_iter=iters, seed=seed)
        t0 = time.perf_counter()
        res = M.train(ds, M.OdeRgruModel.init(cfg, seed), tcfg)
        last = res.log[-1]
        print(f"drop {frac:.0%}  field={'on ' if use_ode else 'off'}  "
              f"steps/seq {np.mean(lengths):4.1f}  train acc {last['train_acc']:.3f}  "
              f"test acc {last['test_acc']:.3f}  kappa {last['test_kappa']:+.3f}  "
              f"({time.perf_counter() - t0:.0f}s)")
