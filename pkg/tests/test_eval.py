import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsv import deepkkt as D
from dsv import eval as E
from dsv.data import Dataset, gen_blobs2d
from dsv.deepkkt import DsvSet, ExtractConfig
from dsv.io import read_ppm
from dsv.nn import ParamMask, predict
from dsv.optim import accuracy


def _dsv_from(data: Dataset, lam=None) -> DsvSet:
    n = len(data)
    lam = np.full(n, 0.1) if lam is None else np.asarray(lam, dtype=float)
    return DsvSet(data.x.copy(), data.y.copy(), lam, np.ones(n, dtype=bool), data.num_classes)


# ---------------------------------------------------------------- results

def test_result_mean_and_population_std():
    r = E.ExperimentResult("arm", [0, 1, 2, 3], {"accuracy": [0.1, 0.2, 0.3, 0.4]})
    assert r.mean() == pytest.approx(0.25)
    assert r.std() == pytest.approx(np.sqrt(0.0125))
    assert r.summary() == "arm: 25.0 ± 11.2 (n=4)"


def test_result_rejects_ragged_metrics():
    with pytest.raises(ValueError):
        E.ExperimentResult("arm", [0, 1], {"accuracy": [0.5]})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.text(max_size=30))
def test_result_csv_round_trip(values, note):
    cfg = "".join(f"k{i} = {line}\n" for i, line in enumerate(note.splitlines()))
    r = E.ExperimentResult("x", list(range(len(values))), {"accuracy": values, "loss": values[::-1]}, cfg)
    back = E.ExperimentResult.from_csv("x", r.to_csv())
    assert back.metrics == r.metrics and back.seeds == r.seeds
    assert back.config_text == cfg
    assert back.mean() == r.mean() and back.std() == r.std()


def test_result_save_and_table(tmp_path):
    a = E.ExperimentResult("random", [0, 1], {"accuracy": [0.5, 0.7]}, "steps = 300\n")
    b = E.ExperimentResult("dsv", [0, 1], {"accuracy": [0.6, 0.6]})
    a.save(tmp_path)
    assert (tmp_path / "random.txt").read_text() == "random: 60.0 ± 10.0 (n=2)\n"
    assert E.ExperimentResult.from_csv("random", (tmp_path / "random.csv").read_text()).metrics == a.metrics
    assert E.table([a, b]).splitlines() == ["random   60.0 ± 10.0", "dsv      60.0 ± 0.0"]


# ---------------------------------------------------------------- distillation

def test_one_per_class_picks_top_lambda():
    data = gen_blobs2d(2, 3, 6.0, seed=0)
    dsv = _dsv_from(data, [0.1, 0.5, 0.2, 0.3, 0.1, 0.9])
    out = E.one_per_class(dsv)
    assert len(out) == 2 and sorted(out.y.tolist()) == [0, 1]
    assert np.array_equal(out.x[0], dsv.x[dsv.top_per_class(1)[0]])


def test_one_per_class_missing_class():
    data = gen_blobs2d(3, 2, 6.0, seed=0)
    dsv = _dsv_from(data)
    dsv.alive[data.y == 1] = False
    with pytest.raises(E.DistillError, match="missing class 1"):
        E.one_per_class(dsv)
    short = Dataset(data.x[data.y != 2], data.y[data.y != 2], 3)
    with pytest.raises(E.DistillError):
        E.one_per_class(short)
    with pytest.raises(E.DistillError):
        E.distill_eval(short, E.glyph_arch(), data, [0])


def test_random_one_per_class_seeded():
    data = gen_blobs2d(3, 10, 6.0, seed=0)
    a, b = E.random_one_per_class(data, 4), E.random_one_per_class(data, 4)
    assert a.digest() == b.digest() and a.y.tolist() == [0, 1, 2]


def test_full_training_set_beats_one_per_class():
    data, test = E.glyph_splits(5, noise=0.6, train_per_class=20, test_per_class=30)
    arch = E.glyph_arch(channels=4)
    full = E.distill_eval(data, arch, test, [0, 1], "full")
    single = E.distill_eval(lambda s: E.random_one_per_class(data, s), arch, test, [0, 1], "random")
    assert full.mean() >= max(single.metrics["accuracy"])
    again = E.distill_eval(data, arch, test, [0, 1], "full")
    assert again.metrics == full.metrics        # bit-for-bit given seeds


# ---------------------------------------------------------------- correlation

def test_pearson_edge_cases():
    assert E.pearson([1, 1, 1], [0.2, 0.5, 0.9]) is None
    assert E.pearson([1, 2, 3, 4], [3, 5, 7, 9]) == pytest.approx(1.0)
    assert E.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_correlation_identical_sums_undefined():
    c = E.lambda_accuracy_correlation([1.0, 1.0, 1.0], [0, 1, 2], [0.5, 0.7, 0.9])
    assert c.rho is None and c.to_text().startswith("rho = undefined")


def test_correlation_needs_three_classes():
    with pytest.raises(ValueError):
        E.lambda_accuracy_correlation([1.0, 2.0], [0, 1], [0.5, 0.6])


def test_correlation_per_class_sums():
    c = E.lambda_accuracy_correlation([1, 2, 3, 4, 5, 6], [0, 0, 1, 1, 2, 2], [0.1, 0.2, 0.3])
    assert c.lambda_sums.tolist() == [3, 7, 11]
    assert c.rho == pytest.approx(1.0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="rho is negative on seeds 0-3 but +0.04 on seed 4")
def test_correlation_sign_stable_over_five_seeds():
    rhos = [E.correlation_experiment(s).rho for s in range(5)]
    print("rho per seed:", rhos)
    assert None not in rhos
    assert len({math.copysign(1.0, r) for r in rhos}) == 1


# ---------------------------------------------------------------- mixing

def test_mix_formula():
    x, d = np.array([3.0, 4.0]), np.array([0.0, 2.0])
    assert np.allclose(E.mix(x, d, 0.1, clip=False), [3.0, 4.5])
    assert np.array_equal(E.mix(x, np.zeros(2), 0.5, clip=False), x)
    assert E.mix(np.full(4, 0.9), np.ones(4), 1.0).max() == 1.0


def test_mix_zero_eps_is_base_rate(small_model):
    model, data = small_model
    rep = E.mixing_experiment(model, _dsv_from(data), data, 0.0, samples_per_class=5)
    assert rep.dsv_rate == rep.base_rate == rep.control_rate
    assert rep.samples == 15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mix_with_itself_keeps_label(seed):
    # x + 1 * x = 2x; a bias-free linear model is positively homogeneous
    from dsv.nn import Architecture, Model
    from dsv.tensor import Tensor
    rng = np.random.default_rng(seed)
    model = Model(Architecture("linear", (4,), 3),
                  {"weight": Tensor(rng.normal(size=(3, 4))), "bias": Tensor(np.zeros(3))})
    d = rng.normal(size=(5, 4))
    mixed = np.stack([E.mix(x, x, 1.0, clip=False) for x in d])
    assert np.array_equal(predict(model, mixed), predict(model, d))


def test_mix_eps_out_of_range(small_model):
    model, data = small_model
    with pytest.raises(ValueError):
        E.mixing_experiment(model, _dsv_from(data), data, 1.5)


def test_mixing_is_reproducible(small_model):
    model, data = small_model
    dsv = _dsv_from(data, np.linspace(0.1, 1, len(data)))
    a = E.mixing_experiment(model, dsv, data, 0.3, 5, seed=2)
    assert a == E.mixing_experiment(model, dsv, data, 0.3, 5, seed=2)
    assert a.to_text().count("\n") == 5


# ---------------------------------------------------------------- ablation

def test_ablation_small_model_exports(small_model, tmp_path):
    model, _ = small_model
    ab = E.ablation(model, ExtractConfig(n_per_class=2, iterations=20))
    assert ab.primal_only.max_dx == 0.0
    assert ab.stat_only.stat_reduction > 0
    ab.export(tmp_path)
    for arm in ("primal_only", "stat_only"):
        img = read_ppm(tmp_path / f"{arm}_grid.ppm")
        assert img.ndim == 3 and img.shape[2] == 3 and img.dtype == np.uint8
        assert (tmp_path / f"{arm}_report.txt").read_text().strip()
        text = (tmp_path / f"{arm}_trace.csv").read_text()
        assert D.Trace.from_csv(text).to_csv() == getattr(ab, arm).trace.to_csv()


def test_correctly_classified_noise(small_model):
    model, _ = small_model
    dsv = E.correctly_classified_noise(model, ExtractConfig(n_per_class=4), 1)
    assert np.array_equal(predict(model, dsv.x), dsv.y)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="constant-step l1 descent chatters; about a fifth of early steps go up")
def test_stationarity_only_strictly_decreases(glyph_ablation):
    ab, _ = glyph_ablation
    s = ab.stat_only.trace.column("stat")[:100]
    ups = int((np.diff(s) >= 0).sum())
    print(f"stationarity-only: {ups} of {len(s) - 1} early steps did not decrease")
    assert ups == 0


@pytest.mark.slow
def test_stationarity_only_reduces_residual_overall(glyph_ablation):
    ab, _ = glyph_ablation
    assert ab.stat_only.stat_reduction > 0.5
    assert ab.primal_only.max_dx == 0.0


# ---------------------------------------------------------------- partial layer

def test_partial_full_mask_is_synthesize(small_model):
    model, _ = small_model
    cfg = ExtractConfig(n_per_class=2, iterations=10)
    dsv, trace, rep = E.partial_layer_extraction(model, cfg, mask="full")
    ref, ref_trace = D.synthesize(model, cfg)
    assert dsv.x.tobytes() == ref.x.tobytes() and trace.to_csv() == ref_trace.to_csv()
    assert rep == D.check_kkt(model, ref, cfg)


def test_partial_last_layer_length(small_model):
    model, _ = small_model
    names = ParamMask.last_layer(model).names(model)
    from dsv.nn import flatten_params
    size = sum(model.params[n].data.size for n in names)
    assert 0 < size < flatten_params(model).data.size
    last = model.arch.num_classes * (model.params[names[0]].data.size // model.arch.num_classes)
    assert size == last + model.arch.num_classes


def test_partial_empty_mask_rejected(small_model):
    model, _ = small_model
    with pytest.raises(ValueError):
        E.partial_layer_extraction(model, ExtractConfig(n_per_class=1, iterations=1), mask="")


@pytest.mark.slow
def test_partially_trained_model_keeps_every_class_alive():
    data, _ = E.glyph_splits(0)
    model = E.pretrain(E.glyph_arch(), data, seed=0, epochs=14)
    acc = accuracy(model, data)
    assert 0.75 <= acc <= 0.85
    dsv, _, rep = E.partial_layer_extraction(model, E.glyph_extract_config(seed=0))
    print(f"train accuracy {acc:.3f}; alive per class {dsv.alive_per_class()}; "
          f"primal violations {rep.primal_violations}")
    assert min(dsv.alive_per_class()) > 0


# ---------------------------------------------------------------- gradient direction

def test_direction_experiment_converges():
    r = E.gradient_direction_experiment(seed=0, steps=500)
    assert r.final_accuracy == 1.0
    assert r.tail_min > 0.99
    assert r.cosines[-1] == pytest.approx(1.0)


# ---------------------------------------------------------------- linear comparison

def test_svm_comparison_table():
    cmp = E.svm_comparison(seed=0, train_steps=20_000)
    assert cmp.oracle_stat_relative < 1e-3
    text = cmp.table()
    assert "oracle" in text.lower()
    assert 0.0 <= cmp.within() <= 1.0
    assert len(cmp.margins) == cmp.dsv.alive.sum()
