"""Linear sanity check: a hinge-trained linear model against the hard-margin SVM.

For a linear classifier the KKT conditions of training are the classical SVM
conditions, so the oracle support vectors with lambda = alpha should make the
stationarity residual vanish, and synthesized candidates should land on the
margin |w.x + b| = 1.

    python demos/linear_svm.py [seed]
"""
import sys

from dsv import eval as E

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cmp = E.svm_comparison(seed=seed)

print(f"blobs: {len(cmp.data)} points, oracle found {len(cmp.oracle.support)} support vectors")
print(f"trained weights are {cmp.weight_gap:.1e} (relative) away from the oracle\n")
print(cmp.table())

# survivors of synthesis, with their margins
for x, lam, m in zip(cmp.dsv.x[cmp.dsv.alive], cmp.dsv.lam[cmp.dsv.alive], cmp.margins):
    print(f"  x = ({x[0]:+.3f}, {x[1]:+.3f})  lambda = {lam:.2e}  |margin| = {m:.4f}")
