"""
Desk-scale training loop
========================

Overfit the two-level network on a single synthetic phantom at 32^3.
This is the smallest honest end-to-end check of the trainer: loss falls,
foreground Dice climbs past 0.95, and the best-validation checkpoint can
be reloaded for inference bit-for-bit.
"""

import time
from pathlib import Path

import numpy as np

from lodseg import (dice_coefficient, get_scheme, infer_volume,
                    load_checkpoint, parameter_count)
from lodseg.synth import synthetic_pairs
from lodseg.trainer import desk_smoke_config, run_stage

out_dir = Path(__file__).parent / "output" / "training"
out_dir.mkdir(parents=True, exist_ok=True)

scheme = get_scheme("ss4")
pairs = synthetic_pairs(1, (32, 32, 32), scheme, seed=21)

# The stock recipe runs 200 steps; 60 are enough to cross Dice 0.95 here.
config = desk_smoke_config(epochs=60, checkpoint_out=out_dir / "smoke.ckpt",
                           log_path=out_dir / "smoke.jsonl")
print(f"stage {config.stage}: lr {config.lr_init}, {config.epochs} steps")

tick = time.monotonic()
state, records = run_stage(config, pairs, pairs)
print(f"trained {parameter_count(state)} parameters "
      f"in {time.monotonic() - tick:.0f}s")

for record in records[::10] + [records[-1]]:
    fg = np.mean(list(record.val_dice_per_class.values()))
    print(f"  epoch {record.epoch:3d}  train {record.train_loss:.4f}  "
          f"val {record.val_loss:.4f}  fg Dice {fg:.4f}")

# Reload the best-validation checkpoint and segment the phantom with it.
restored = load_checkpoint(out_dir / "smoke.ckpt")
volume, labels = pairs[0]
result = dice_coefficient(infer_volume(restored, volume, scheme), labels)
print("reloaded checkpoint per-class Dice:")
for name, value in result.per_class.items():
    print(f"  {name}: {value:.4f}")
print(f"wrote {out_dir}")
