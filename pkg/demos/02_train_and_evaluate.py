"""Train a small recurrent agent, then compare it against a random-init network.

A few hundred thousand steps take a few minutes on one core.  The learning curve
climbs but stays far from competent play at this budget.

Run:  python demos/02_train_and_evaluate.py [total_steps]
"""
import sys
import tempfile
from pathlib import Path

from forageworld import ppo
from forageworld.config import TrainConfig, desk_env_config

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
env = desk_env_config()
cfg = TrainConfig(hidden_dim=64, n_envs=16, total_steps=steps, target_sparsity=0.0,
                  checkpoint_interval=steps // 4, seed=0)
out = Path(tempfile.mkdtemp(prefix="forage_demo_"))

res = ppo.train(env, cfg, out)
for row in res.history[:: max(1, len(res.history) // 10)]:
    print(f"step {row['step']:>8}  return {row['return_mean']:6.2f}  length {row['ep_len_mean']:6.1f}  "
          f"entropy {row['entropy']:.3f}  aux {row['loss_aux']:.3f}")

logs, trained = ppo.evaluate(res.final_checkpoint, env, 10, out_dir=out / "eval")
print(f"trained:  length {trained.length_mean:.1f} +- {trained.length_ci:.1f}, "
      f"return {trained.return_mean:.2f}, eat rate {trained.eat_rate:.4f}, drink rate {trained.drink_rate:.4f}")
print(f"random-init baseline length: {ppo.RANDOM_BASELINE_DESK}")
print(f"checkpoints and evaluation logs in {out}")
