"""Calibration trial: train on real data, then eval single-op edit success."""
import sys
import time

import numpy as np

from gridloom.decoding import NeuralRunner
from gridloom.evalsuite import eval_suite
from gridloom.model import ModelConfig, init_params, save_checkpoint
from gridloom.optim import AdamState
from gridloom.tasks import generate_dataset
from gridloom.training import TrainConfig, make_batch, sft_step

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 800
n_tasks = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

t0 = time.time()
records = generate_dataset(n_tasks, seed=1234, injection_rate=0.3)
print(f"dataset: {len(records)} trajectories in {time.time()-t0:.0f}s", flush=True)

model_cfg = ModelConfig()
params = init_params(model_cfg, seed=0)
cfg = TrainConfig(lr=lr, warmup_steps=100, total_steps=steps, seed=7,
                  mix_text_action=1.5, mix_image_action=2.5, mix_next_state=1.0,
                  mix_reward_est=1.5, mix_macro=0.5)
adam = AdamState(lr=cfg.lr)
t0 = time.time()
for step in range(steps):
    batch, masks = make_batch(records, cfg, step)
    comps = sft_step(params, adam, batch, masks, cfg, step)
    if step % 50 == 0 or step == steps - 1:
        el = time.time() - t0
        print(f"step {step}: total {comps['total']:.4f} ce {comps['ce']:.4f} "
              f"mse {comps['mse']:.4f} [{el:.0f}s]", flush=True)
print(f"train time {time.time()-t0:.0f}s", flush=True)
save_checkpoint("/tmp/gl/trial.npz", params, adam=adam, step=steps)

runner = NeuralRunner(params, model_cfg, flow_steps=16)
t0 = time.time()
m = eval_suite(lambda spec: runner, seed=99, n_single=20, n_composite=6, n_holdout=2)
print(f"eval time {time.time()-t0:.0f}s", flush=True)
print(m.to_tsv(), flush=True)
