"""Desk-scale experiments: distillation retraining, lambda/accuracy correlation,
mixing, the primal-only vs stationarity-only ablation, partial-layer extraction
and the gradient-direction diagnostic.

Every experiment takes explicit seeds.  Arms that are compared with each other
share the same seed list so results are paired.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import deepkkt
from .data import Dataset, gen_blobs2d, gen_glyphs
from .io import comment_block, strip_comments
from .deepkkt import DsvSet, ExtractConfig, KktReport, Selection, Trace
from .nn import Architecture, Model, ParamMask, init_model, predict
from .optim import (SAM, SGD, Adam, accuracy, augment_bias, class_accuracy, grad_direction_trace,
                    linear_model_from_w, train, train_full_batch, train_hinge_linear)
from .svm import SvmSolution, solve_hard_margin, to_signed

# Desk-scale glyph setup shared by the CLI defaults, the demos and the tests.
GLYPH_NOISE = 0.6
GLYPH_SIZE = 16
GLYPH_TRAIN_PER_CLASS = 40
GLYPH_TEST_PER_CLASS = 100
TEST_SEED_OFFSET = 10_000


def glyph_arch(num_classes: int = 3, size: int = GLYPH_SIZE, channels: int = 8) -> Architecture:
    return Architecture("convnet", (1, size, size), num_classes, channels=channels, depth=3)


def glyph_splits(seed: int = 0, num_classes: int = 3, noise=GLYPH_NOISE,
                 train_per_class: int = GLYPH_TRAIN_PER_CLASS,
                 test_per_class: int = GLYPH_TEST_PER_CLASS, size: int = GLYPH_SIZE):
    """Train and test glyph sets; the test split uses an offset seed."""
    return (gen_glyphs(num_classes, train_per_class, size, noise, seed=seed),
            gen_glyphs(num_classes, test_per_class, size, noise, seed=seed + TEST_SEED_OFFSET))


def glyph_extract_config(**overrides) -> ExtractConfig:
    base = ExtractConfig(n_per_class=8, iterations=1000, lowres_iters=500, patience=10_000)
    return replace(base, **overrides)


def pretrain(arch: Architecture, data: Dataset, seed: int = 0, epochs: int = 200,
             lr: float = 1e-3, weight_decay: float = 0.05, batch_size: int = 16) -> Model:
    """Adam pretraining with L2 decay, run long enough to sit near a stationary point."""
    model, _ = train(init_model(arch, seed), data, Adam(lr, weight_decay), epochs,
                     batch_size=batch_size, seed=seed)
    return model


# ---------------------------------------------------------------- results

@dataclass
class ExperimentResult:
    name: str
    seeds: list[int]
    metrics: dict[str, list[float]]
    config_text: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        for k, v in self.metrics.items():
            if len(v) != len(self.seeds):
                raise ValueError(f"metric {k} has {len(v)} values for {len(self.seeds)} seeds")

    def mean(self, metric: str = "accuracy") -> float:
        return float(np.mean(self.metrics[metric]))

    def std(self, metric: str = "accuracy") -> float:
        """Population standard deviation over seeds."""
        return float(np.std(self.metrics[metric]))

    def summary(self, metric: str = "accuracy", percent: bool = True) -> str:
        scale = 100.0 if percent else 1.0
        return (f"{self.name}: {scale * self.mean(metric):.1f} ± {scale * self.std(metric):.1f}"
                f" (n={len(self.seeds)})")

    def to_csv(self) -> str:
        buf = io.StringIO(comment_block(self.config_text))
        buf.seek(0, 2)
        w = csv.writer(buf, lineterminator="\n")
        names = sorted(self.metrics)
        w.writerow(["seed", *names])
        for i, s in enumerate(self.seeds):
            w.writerow([s, *(repr(float(self.metrics[n][i])) for n in names)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, name: str, text: str) -> ExperimentResult:
        config_text, text = strip_comments(text)
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[0] != "seed":
            raise ValueError("first column must be seed")
        metrics = {h: [float(r[i + 1]) for r in body] for i, h in enumerate(header[1:])}
        return cls(name, [int(r[0]) for r in body], metrics, config_text)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{self.name}.csv").write_text(self.to_csv())
        (d / f"{self.name}.txt").write_text(self.summary() + "\n")


def table(results: list[ExperimentResult], metric: str = "accuracy") -> str:
    """Rows in the ``mean ± std`` style of a distillation results table."""
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {100 * r.mean(metric):5.1f} ± {100 * r.std(metric):.1f}"
                     for r in results)


# ---------------------------------------------------------------- distillation

class DistillError(ValueError):
    pass


def one_per_class(source, data: Dataset | None = None) -> Dataset:
    """Reduce a DSV set, a selection or a dataset to one sample per class (top lambda first)."""
    if isinstance(source, DsvSet):
        alive = source.alive_per_class()
        missing = [c for c, k in enumerate(alive) if k == 0]
        if missing:
            raise DistillError(f"missing class {missing[0]}")
        return source.to_dataset(source.top_per_class(1))
    if isinstance(source, Selection):
        if data is None:
            raise DistillError("a selection needs its dataset")
        for c, r in enumerate(source.ranking):
            if len(r) == 0:
                raise DistillError(f"missing class {c}")
        return data.subset(source.top(1))
    if isinstance(source, Dataset):
        idx = []
        for c in range(source.num_classes):
            members = source.of_class(c)
            if len(members) == 0:
                raise DistillError(f"missing class {c}")
            idx.append(members[0])
        return source.subset(idx)
    raise TypeError(f"cannot take one sample per class from {type(source).__name__}")


def random_one_per_class(data: Dataset, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    return data.subset([int(rng.choice(data.of_class(c))) for c in range(data.num_classes)])


def retrain_accuracy(train_set: Dataset, arch: Architecture, test: Dataset, seed: int,
                     steps: int = 300, lr: float = 0.1, rho: float = 1e-4) -> float:
    """Fresh model, full-batch SAM on ``train_set``, accuracy on ``test``."""
    model = train_full_batch(init_model(arch, seed), train_set, SAM(SGD(lr), rho), steps)
    return accuracy(model, test)


def distill_eval(sets, arch: Architecture, test: Dataset, seeds, name: str = "distill",
                 steps: int = 300) -> ExperimentResult:
    """Retrain accuracy per seed.

    ``sets`` is either one training set used for every seed or a callable
    ``seed -> Dataset`` (so each seed can bring its own DSVs or random draw).
    """
    t0 = time.perf_counter()
    seeds = list(seeds)
    accs = []
    for s in seeds:
        ds = sets(s) if callable(sets) else sets
        if len(np.unique(ds.y)) != ds.num_classes:
            raise DistillError("missing class in the distilled set")
        accs.append(retrain_accuracy(ds, arch, test, s, steps))
    return ExperimentResult(name, seeds, {"accuracy": accs},
                            f"steps = {steps}\noptimizer = sam\nlr = 0.1\nrho = 0.0001\n",
                            time.perf_counter() - t0)


# ---------------------------------------------------------------- correlation

@dataclass
class Correlation:
    rho: float | None
    lambda_sums: np.ndarray
    accuracies: np.ndarray

    def to_text(self) -> str:
        lines = [f"rho = {'undefined' if self.rho is None else repr(self.rho)}", "class,lambda_sum,accuracy"]
        lines += [f"{c},{l!r},{a!r}" for c, (l, a) in enumerate(zip(self.lambda_sums, self.accuracies))]
        return "\n".join(lines) + "\n"


def pearson(a, b) -> float | None:
    """Pearson correlation, or None when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def lambda_accuracy_correlation(lam, labels, class_acc) -> Correlation:
    """Correlate the per-class lambda sum with per-class test accuracy."""
    class_acc = np.asarray(class_acc, dtype=np.float64)
    c = len(class_acc)
    if c < 3:
        raise ValueError("correlation needs at least 3 classes")
    labels = np.asarray(labels)
    lam = np.asarray(lam, dtype=np.float64)
    sums = np.array([lam[labels == k].sum() for k in range(c)])
    return Correlation(pearson(sums, class_acc), sums, class_acc)


def correlation_experiment(seed: int, noise=(0.3, 0.5, 0.7, 0.9, 1.1), n_per_class: int = 30,
                           epochs: int = 60, cfg: ExtractConfig | None = None) -> Correlation:
    """Glyphs with a different noise level per class; lambdas come from selection."""
    c = len(noise)
    data, test = glyph_splits(seed, c, noise, n_per_class)
    model = pretrain(glyph_arch(c), data, seed=seed, epochs=epochs)
    cfg = cfg or ExtractConfig(lr_lambda=1e-4, iterations=500)
    sel = deepkkt.select(model, data, cfg)
    return lambda_accuracy_correlation(sel.lam, data.y, class_accuracy(model, test))


# ---------------------------------------------------------------- mixing

@dataclass(frozen=True)
class MixingReport:
    eps: float
    dsv_rate: float
    control_rate: float
    base_rate: float
    samples: int

    def to_text(self) -> str:
        return (f"eps = {self.eps!r}\ndsv_rate = {self.dsv_rate!r}\ncontrol_rate = {self.control_rate!r}\n"
                f"base_rate = {self.base_rate!r}\nsamples = {self.samples}\n")


def mix(x: np.ndarray, d: np.ndarray, eps: float, clip: bool = True) -> np.ndarray:
    """``x + eps * (||x|| / ||d||) * d``, clipped to [0, 1] for images."""
    nd = np.linalg.norm(d)
    out = x + (eps * np.linalg.norm(x) / nd) * d if nd > 0 else x.copy()
    return np.clip(out, 0.0, 1.0) if clip else out


def mixing_experiment(model: Model, dsv: DsvSet, data: Dataset, eps: float,
                      samples_per_class: int = 20, seed: int = 0) -> MixingReport:
    """Fraction of real samples pushed to the DSV's label by a small DSV overlay.

    For every class ``c`` the top-lambda DSV is added to real samples whose
    label is not ``c``.  The control arm overlays a random training image of
    class ``c`` instead, at the same relative norm.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    clip = data.is_image
    top = dsv.top_per_class(1)
    hits = {"dsv": 0, "control": 0, "base": 0}
    n = 0
    for i in top:
        c = int(dsv.y[i])
        others = np.flatnonzero(data.y != c)
        pick = rng.choice(others, size=min(samples_per_class, len(others)), replace=False)
        ctrl = data.x[rng.choice(data.of_class(c), size=len(pick))]
        xs = data.x[pick]
        with_dsv = np.stack([mix(x, dsv.x[i], eps, clip) for x in xs])
        with_ctrl = np.stack([mix(x, d, eps, clip) for x, d in zip(xs, ctrl)])
        hits["dsv"] += int((predict(model, with_dsv) == c).sum())
        hits["control"] += int((predict(model, with_ctrl) == c).sum())
        hits["base"] += int((predict(model, xs) == c).sum())
        n += len(pick)
    return MixingReport(eps, hits["dsv"] / n, hits["control"] / n, hits["base"] / n, n)


# ---------------------------------------------------------------- ablation

@dataclass
class Arm:
    dsv: DsvSet
    trace: Trace
    report: KktReport
    init: DsvSet

    @property
    def max_dx(self) -> float:
        return float(np.abs(self.dsv.x - self.init.x).max())

    @property
    def stat_reduction(self) -> float:
        """1 - final / initial stationarity loss over the trace."""
        s = self.trace.column("stat")
        return float(1.0 - s[-1] / s[0]) if len(s) else 0.0


@dataclass
class Ablation:
    primal_only: Arm
    stat_only: Arm

    def export(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, arm in (("primal_only", self.primal_only), ("stat_only", self.stat_only)):
            arm.dsv.write_grid(d / f"{name}_grid.ppm")
            arm.trace.save_csv(d / f"{name}_trace.csv", arm.dsv.config_text)
            (d / f"{name}_report.txt").write_text(arm.report.to_text())


def correctly_classified_noise(model: Model, cfg: ExtractConfig, seed: int) -> DsvSet:
    """Noise candidates labelled with the model's own prediction (all primal-feasible)."""
    dsv = deepkkt.init_candidates(model, cfg, np.random.default_rng(seed))
    dsv.y = predict(model, dsv.x)
    return dsv


def ablation(model: Model, cfg: ExtractConfig) -> Ablation:
    """Run the update rule with only the primal term and with only the stationarity term.

    The primal-only arm starts from noise the model already classifies as its
    label, so the dead-zone loss should leave every pixel where it was.
    Both arms drop the augmentation term and the multi-resolution schedule.
    """
    base = replace(cfg, gamma=0.0, lowres_iters=0)
    p_cfg = replace(base, beta=0.0)
    p_init = correctly_classified_noise(model, p_cfg, cfg.seed)
    p_dsv, p_trace = deepkkt.synthesize(model, p_cfg, init=p_init)
    s_cfg = replace(base, primal_weight=0.0)
    s_init = deepkkt.init_candidates(model, s_cfg, np.random.default_rng(cfg.seed))
    s_dsv, s_trace = deepkkt.synthesize(model, s_cfg, init=s_init)
    return Ablation(
        Arm(p_dsv, p_trace, deepkkt.check_kkt(model, p_dsv, p_cfg), p_init),
        Arm(s_dsv, s_trace, deepkkt.check_kkt(model, s_dsv, s_cfg), s_init))


# ---------------------------------------------------------------- partial layer

def partial_layer_extraction(model: Model, cfg: ExtractConfig,
                             mask: str = "last-layer") -> tuple[DsvSet, Trace, KktReport]:
    """Synthesis with the stationarity residual restricted to ``mask``."""
    ParamMask.named(model, mask).names(model)   # raises on an empty mask
    cfg = replace(cfg, mask=mask)
    dsv, trace = deepkkt.synthesize(model, cfg)
    return dsv, trace, deepkkt.check_kkt(model, dsv, cfg)


# ---------------------------------------------------------------- gradient direction

@dataclass
class DirectionResult:
    steps: list[int]
    cosines: list[float]
    tail_min: float
    final_accuracy: float = field(default=float("nan"))


def gradient_direction_experiment(seed: int = 0, separation: float = 6.0, steps: int = 2000,
                                  lr: float = 0.1, probe_interval: int = 10,
                                  tail: float = 0.1) -> DirectionResult:
    """Full-batch GD with cross-entropy on separable blobs; cosine to the final gradient."""
    data = gen_blobs2d(2, 20, separation, seed=seed)
    model = init_model(Architecture("linear", (2,), 2), seed)
    tr = grad_direction_trace(model, data, SGD(lr), steps, probe_interval)
    cut = steps - int(tail * steps)
    tail_cos = [c for s, c in zip(tr.steps, tr.cosines) if s >= cut]
    return DirectionResult(tr.steps, tr.cosines, float(min(tail_cos)) if tail_cos else float("nan"),
                           accuracy(tr.model, data))


# ---------------------------------------------------------------- linear oracle comparison

def linear_extract_config(**overrides) -> ExtractConfig:
    """Synthesis settings for the tied binary hinge model on 2-D blobs.

    A tiny starting lambda lets the candidates travel to the margin before the
    multipliers grow, and a large ``lr_x`` matches the small scale of ``w``.
    """
    base = ExtractConfig(loss="hinge", init_lambda=1e-3, lr_x=10.0, lr_lambda=1e-5,
                         iterations=2000, patience=100_000)
    return replace(base, **overrides)


@dataclass
class SvmComparison:
    data: Dataset
    model: Model
    oracle: SvmSolution
    weight_gap: float            # ||w~_trained - w~_oracle|| / ||w~_oracle||
    oracle_stat_relative: float  # residual with oracle SVs and lambda = alpha
    dsv: DsvSet
    trace: Trace
    report: KktReport

    @property
    def margins(self) -> np.ndarray:
        """|w~ . [x; 1]| of the surviving candidates."""
        w = np.append(self.model.params["w"].data, self.model.params["b"].data)
        return np.abs(augment_bias(self.dsv.x[self.dsv.alive]) @ w)

    def within(self, tol: float = 0.1) -> float:
        m = self.margins
        return float(np.mean(np.abs(m - 1.0) <= tol)) if len(m) else 0.0

    def table(self) -> str:
        sv_m = np.abs(augment_bias(self.data.x[self.oracle.support]) @ self.oracle.w_tilde)
        rows = [("", "candidates", "mean |margin|", "within 10%", "stat relative"),
                ("oracle SVs", str(len(self.oracle.support)), f"{sv_m.mean():.4f}", "1.00",
                 f"{self.oracle_stat_relative:.2e}"),
                ("synthesized", str(int(self.dsv.alive.sum())),
                 f"{self.margins.mean():.4f}" if self.dsv.alive.any() else "nan",
                 f"{self.within():.2f}", f"{self.report.stat_relative:.2e}")]
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        return "\n".join(lines) + f"\nweight gap to oracle: {self.weight_gap:.2e}\n"


def hinge_linear_model(data: Dataset, lr: float = 0.5, steps: int = 50_000,
                       weight_decay: float = 0.3) -> Model:
    """Tied binary linear model trained by full-batch hinge subgradient descent."""
    w = train_hinge_linear(data.x, to_signed(data.y), lr, steps, weight_decay)
    return linear_model_from_w(Architecture("linear", data.feature_shape, 2, tied=True), w)


def svm_comparison(seed: int = 0, per_class: int = 20, separation: float = 6.0,
                   cfg: ExtractConfig | None = None, train_steps: int = 50_000,
                   train_lr: float = 0.5, weight_decay: float = 0.3) -> SvmComparison:
    """Hinge training, the folded-bias oracle, and DeepKKT synthesis on one blob instance."""
    data = gen_blobs2d(2, per_class, separation, seed=seed)
    model = hinge_linear_model(data, train_lr, train_steps, weight_decay)
    sol = solve_hard_margin(data.x, data.y, folded_bias=True)
    w = np.append(model.params["w"].data, model.params["b"].data)
    gap = float(np.linalg.norm(w - sol.w_tilde) / np.linalg.norm(sol.w_tilde))
    cfg = cfg or linear_extract_config(seed=seed)
    sv = sol.support
    stat = deepkkt.stationarity_loss(model, data.x[sv], data.y[sv], sol.alpha[sv],
                                     replace(cfg, metric="l1", mask="full")).item()
    dsv, trace = deepkkt.synthesize(model, cfg)
    return SvmComparison(data, model, sol, gap, stat / float(np.abs(w).sum()), dsv, trace,
                         deepkkt.check_kkt(model, dsv, cfg))
