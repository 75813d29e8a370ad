"""What does the hidden state know about position?  Decoding and behavior on evaluation logs.

Pass an evaluation directory (for example the one printed by demo 02).  Without one,
a random-init network is evaluated so the script runs stand-alone; its hidden state
still carries some position information because the observation does.

Run:  python demos/03_reading_the_hidden_state.py [eval_dir]
"""
import sys

import numpy as np

from forageworld import agent_net as net
from forageworld import behavior as bh
from forageworld import decoding as dec
from forageworld import ppo
from forageworld.config import TrainConfig, desk_env_config
from forageworld.rng import derive_stream
from forageworld.telemetry import load_logs

env = desk_env_config()
if len(sys.argv) > 1:
    logs = load_logs(sys.argv[1])
else:
    params = net.init_params(ppo.net_config_for(TrainConfig(hidden_dim=64)), derive_stream(0, "demo_init"))
    logs, _ = ppo.evaluate(params, env, 8)
print(f"{len(logs)} episodes, {sum(len(l) for l in logs)} steps")

# Ridge decoders from h_t to displacement at offset dt, against a no-information baseline.
for frame in ("allocentric", "egocentric"):
    for row in dec.horizon_sweep(logs, [-20, 0, 20], frame=frame):
        print(f"{frame:>11} dt={row['dt']:+4d}  rmse {row['rmse']:.3f}  baseline {row['baseline']:.3f}  "
              f"alpha {row['alpha']:g}")

# Movement style: occupancy entropy, heading spread, and a three-state segmentation.
panel = bh.metric_panel(logs)
print({k: round(float(v), 3) for k, v in panel.items() if np.isscalar(v)})
longest = max(logs, key=len)
pos = np.column_stack([longest.column("player_x"), longest.column("player_y")])
seg = bh.segment_movement(pos)
print("time share per movement state:", np.bincount(seg.labels, minlength=4)[1:] / len(seg.labels))
