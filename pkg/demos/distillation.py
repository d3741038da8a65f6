"""One image per class: how well does a fresh model learn from it?

Compares synthesized deep support vectors, the top-ranked training image and
a random training image, each used as the whole training set for a new model.
A reduced version of the acceptance run (3 seeds instead of 10).

    python demos/distillation.py
"""
from dsv import deepkkt
from dsv import eval as E

data, test = E.glyph_splits(0)
model = E.pretrain(E.glyph_arch(), data, seed=0)
arch, seeds = model.arch, [0, 1, 2]

synth = {s: deepkkt.synthesize(model, E.glyph_extract_config(seed=s))[0] for s in seeds}
sel = deepkkt.select(model, data, E.ExtractConfig(lr_lambda=1e-4, iterations=500))

results = [
    E.distill_eval(lambda s: E.random_one_per_class(data, s), arch, test, seeds, "random"),
    E.distill_eval(lambda s: E.one_per_class(synth[s]), arch, test, seeds, "synthesized"),
    E.distill_eval(E.one_per_class(sel, data), arch, test, seeds, "selected"),
]
print(E.table(results))
