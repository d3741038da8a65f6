"""Train a small convnet on synthetic glyphs, then pull deep support vectors out of it.

Writes the candidate grid and synthesis trace next to this script's output
directory (default ./glyph_demo) and prints the KKT report.  Takes a few
minutes on one core.

    python demos/glyph_extraction.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from dsv import deepkkt
from dsv import eval as E
from dsv.optim import accuracy

out = Path(sys.argv[1] if len(sys.argv) > 1 else "glyph_demo")
out.mkdir(parents=True, exist_ok=True)

data, test = E.glyph_splits(0)
model = E.pretrain(E.glyph_arch(), data, seed=0)
print(f"train accuracy {accuracy(model, data):.3f}, test accuracy {accuracy(model, test):.3f}")

cfg = E.glyph_extract_config(seed=0)
dsv, trace = deepkkt.synthesize(model, cfg)
dsv.write_grid(out / "synthesized.ppm")
trace.save_csv(out / "trace.csv", cfg.to_text())

first, last = trace.rows[0], trace.rows[-1]
print(f"stationarity {first.stat:.1f} -> {last.stat:.1f} over {len(trace)} iterations")
print(f"alive per class {dsv.alive_per_class()}")
print(deepkkt.check_kkt(model, dsv, cfg).to_text())

# the same conditions can rank real training images instead of synthesizing new ones
sel = deepkkt.select(model, data, E.ExtractConfig(lr_lambda=1e-4, iterations=500))
keep = sel.top(4)
picked = deepkkt.DsvSet(data.x[keep], data.y[keep], sel.lam[keep], np.ones(len(keep), dtype=bool), 3)
picked.write_grid(out / "selected.ppm")
print("top training images per class:", [r[:4].tolist() for r in sel.ranking])
