"""
Ablations: soft-update strength and guidance strength
=====================================================

eta controls how far the data-collection policy lags the trained one; beta
scales the implicit guidance. Early slope is the average per-iteration gain
in rollout reward over the first 50 iterations.
"""
import sys
from pathlib import Path

from nftlab.config import load_config
from nftlab.runs import run_ablation, run_pretrain

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_ablations")
cfg = load_config(None, ["rl.iterations=80"], out=out)
base = run_pretrain(cfg)

for axis, values in [("eta", ["0", "0.5", "0.9"]), ("beta", ["0.1", "1"]), ("negative", ["true", "false"])]:
    print(f"\n{axis}")
    for row in run_ablation(cfg, axis, values, base=base):
        print(f"  {str(row['value']):6s} early slope {row['early_slope']:.4f}  final eval {row['final_eval']:.3f}")
