"""Pre-train on many factories, then adapt to a new one.

A small multi-environment dataset trains the beam predictor.  On a
fresh factory the pre-trained first layers are frozen and the rest is
fine-tuned; a model trained from scratch on the same data is the
baseline.  Sizes here are tiny so the script runs in about a minute.

    python3 demos/03_transfer.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from beamsense import harness
from beamsense.config import ExperimentConfig

cfg = ExperimentConfig(seed=3, n_source_envs=3, paths_per_env=2, target_paths=4,
                       resolution=(72, 108), sample_stride=8,
                       pretrain_epochs=10, transfer_epochs=10)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="beamsense-"))

harness.generate_dataset(cfg, "multi", work / "source")
harness.generate_dataset(cfg, "single", work / "target")
best, pre = harness.run_pretrain(cfg, work / "source", work / "pretrain")
print(f"pre-training: best validation Top-1 {pre.info['best_top1']:.3f} "
      f"at epoch {pre.info['best_epoch']}")

report, _, _ = harness.run_transfer(cfg, best, work / "target", work / "transfer")
for arm, m in report.final.items():
    print(f"{arm:9s} Top-1 {m['top1']:.3f}  Top-5 {m['top5']:.3f}  Top-10 {m['top10']:.3f}")
ett = report.epochs_to_threshold
print(f"epochs to reach the scratch model's final Top-1 ({report.threshold:.3f}): "
      f"fine-tune {ett['finetune']}, scratch {ett['scratch']}")
print(f"outputs in {work}")
