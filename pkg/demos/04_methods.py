"""
NFT, rejection finetuning and step-likelihood policy gradient
=============================================================

Same pretrained model, same reward, three ways to finetune. Curves go to an
SVG next to the metrics files.
"""
import sys
from pathlib import Path

from nftlab.config import load_config
from nftlab.plotting import line_chart, reward_curves, write_svg
from nftlab.runs import run_pretrain, run_rl, summarize

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_methods")
cfg = load_config(None, ["rl.iterations=100"], out=out)
base = run_pretrain(cfg)

for method in ("nft", "rft", "grpo"):
    s = summarize(run_rl(cfg, method, base=base).rows)
    print(f"{method:5s} early slope {s['early_slope']:.4f}  final eval {s['final_eval']:.3f}")

paths = [out / m / "metrics.csv" for m in ("nft", "rft", "grpo")]
svg = line_chart(reward_curves(paths, ["nft", "rft", "grpo"], "rollout"), "rollout reward", "iteration", "mean raw reward")
print("wrote", write_svg(out / "methods.svg", svg))
