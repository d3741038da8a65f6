"""DeepKKT losses, DSV synthesis from noise, lambda-fitting selection, and the
condition checker.

A DSV candidate is an input ``x`` with target label ``y`` and multiplier
``lam``.  For a frozen model with parameters ``theta*`` the conditions are

* primal: ``argmax_c logits_c(x) == y``;
* dual: ``lam >= 0``;
* stationarity: ``theta* + sum_i lam_i grad_theta L(x_i, y_i) == 0``;
* manifold: the above survive augmentation.

The primal loss is zero for correctly classified candidates and the plain loss
otherwise (a hinge-like dead zone).  The stationarity loss is the l1 norm (or
squared l2 norm) of the residual vector over the masked parameters.  Its
gradient w.r.t. ``x`` needs a second backward pass through the parameter
gradient, which :mod:`dsv.tensor` supports.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Augmentation, Dataset, augment, default_family, sample_augmentation
from .io import (comment_block, format_kv, image_grid, parse_kv, read_container,
                 scatter_image, strip_comments, write_container, write_ppm)
from .nn import Model, ParamMask, flatten_params, forward, logits as model_logits
from .optim import LOSSES
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

DSV_MAGIC = b"DSVX"


class ExtractionError(RuntimeError):
    def __init__(self, message: str, class_index: int | None = None):
        super().__init__(message)
        self.class_index = class_index


@dataclass(frozen=True)
class ExtractConfig:
    n_per_class: int = 8
    beta: float = 0.1
    gamma: float = 5.0
    lr_x: float = 0.3          # desk-scale values; see the README for the reasoning
    lr_lambda: float = 3e-6
    iterations: int = 2000
    metric: str = "l1"
    signed_sqrt: bool = False
    lowres_iters: int = 0
    mask: str = "full"
    margin: float = 0.0
    seed: int = 0
    loss: str = "ce"
    primal_weight: float = 1.0
    init_lambda: float | None = None   # None -> 1 / (number of candidates)
    init_mean: float = 0.5
    init_std: float = 0.25
    tol: float = 1e-6
    patience: int = 50
    aug_pad: int = 2
    jitter: float = 0.05

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if not self.lr_x > 0:
            raise ValueError("lr_x must be positive")
        if self.lr_lambda < 0:
            raise ValueError("lr_lambda must be non-negative")
        if self.beta < 0 or self.gamma < 0 or self.primal_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.init_lambda is not None and self.init_lambda < 0:
            raise ValueError("init_lambda must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lowres_iters < 0 or (self.lowres_iters and self.lowres_iters >= self.iterations):
            raise ValueError("lowres_iters must be smaller than iterations")
        if self.metric not in ("l1", "l2sq"):
            raise ValueError("metric must be l1 or l2sq")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")
        if self.mask not in ("full", "last-layer"):
            raise ValueError("mask must be full or last-layer")

    def to_text(self) -> str:
        return format_kv(asdict(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> ExtractConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise KeyError(f"unknown config key(s): {sorted(unknown)}")
        out = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            out[key] = _coerce(raw, default)
        return cls(**out)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if default is None:
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass(frozen=True)
class DsvCandidate:
    x: np.ndarray
    y: int
    lam: float
    alive: bool


@dataclass
class DsvSet:
    """Candidates stored column-wise.  Dead candidates are kept but flagged."""

    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    alive: np.ndarray
    num_classes: int
    config_text: str = ""

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        for i in range(len(self)):
            yield DsvCandidate(self.x[i], int(self.y[i]), float(self.lam[i]), bool(self.alive[i]))

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def alive_per_class(self) -> list[int]:
        return [int((self.alive & (self.y == c)).sum()) for c in range(self.num_classes)]

    def survivors(self) -> DsvSet:
        keep = self.alive
        return DsvSet(self.x[keep], self.y[keep], self.lam[keep], self.alive[keep],
                      self.num_classes, self.config_text)

    def top_per_class(self, k: int = 1) -> np.ndarray:
        """Indices of the ``k`` alive candidates with largest lambda in each class."""
        out = []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.alive & (self.y == c))
            order = idx[np.lexsort((idx, -self.lam[idx]))]
            out.extend(order[:k].tolist())
        return np.array(out, dtype=np.int64)

    def to_dataset(self, index=None) -> Dataset:
        index = np.flatnonzero(self.alive) if index is None else np.asarray(index)
        return Dataset(self.x[index], self.y[index], self.num_classes)

    def save(self, path) -> None:
        header = f"num_classes = {self.num_classes}\n" + self.config_text
        write_container(path, DSV_MAGIC, header, {
            "x": self.x, "y": self.y.astype(np.float64), "lambda": self.lam,
            "alive": self.alive.astype(np.float64)})

    @classmethod
    def load(cls, path) -> DsvSet:
        header, arrays = read_container(path, DSV_MAGIC)
        first, _, rest = header.partition("\n")
        num_classes = int(parse_kv(first)["num_classes"])
        return cls(arrays["x"], arrays["y"].astype(np.int64), arrays["lambda"],
                   arrays["alive"].astype(bool), num_classes, rest)

    def write_grid(self, path) -> None:
        if self.is_image:
            grid = image_grid(self.x[self.alive], self.y[self.alive], self.num_classes)
        else:
            grid = scatter_image(self.x[self.alive], self.y[self.alive])
        write_ppm(path, grid, self.config_text)


# ---------------------------------------------------------------- losses

def _masked_names(model: Model, mask) -> list[str]:
    if isinstance(mask, ParamMask):
        return mask.names(model)
    return ParamMask.named(model, mask).names(model)


def theta_star(model: Model, mask="full") -> np.ndarray:
    return flatten_params(model, ParamMask.of(_masked_names(model, mask))).data


def entropy(z: np.ndarray) -> np.ndarray:
    """Softmax entropy of each row of logits, in nats."""
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def _primal(z: Tensor, per_sample: Tensor, y: np.ndarray) -> Tensor:
    wrong = (z.data.argmax(axis=1) != y).astype(np.float64)
    return T.mean(T.mul(per_sample, wrong))


def _residual(model: Model, x: Tensor, y: np.ndarray, lam: Tensor, cfg: ExtractConfig,
              names: list[str], theta: np.ndarray):
    """Shared forward pass; returns (logits, per-sample loss, residual vector)."""
    leafy, leaves = model.as_leaves(names)
    z = forward(leafy, x)
    per = LOSSES[cfg.loss](z, y)
    weighted = T.sum(T.mul(per, lam))
    gs = T.grad(weighted, [leaves[n] for n in names], create_graph=True)
    flat = T.concat([T.reshape(g, (-1,)) for g in gs])
    if cfg.signed_sqrt:
        flat = T.signed_sqrt(flat)
    return z, per, T.add(flat, theta)


def _distance(r: Tensor, metric: str) -> Tensor:
    return T.l1_norm(r) if metric == "l1" else T.l2_norm_sq(r)


def primal_loss(model: Model, x, y, loss: str = "ce") -> Tensor:
    """Mean over candidates of 0 (correct) or the loss (misclassified)."""
    x = T.as_tensor(x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ExtractionError("no alive candidates")
    z = forward(model, x)
    return _primal(z, LOSSES[loss](z, y), y)


def stationarity_loss(model: Model, x, y, lam, cfg: ExtractConfig = ExtractConfig()) -> Tensor:
    """Distance between ``theta*`` and ``-sum lam_i grad_theta L_i`` over the masked parameters.

    Differentiable w.r.t. ``x`` and ``lam`` when they require grad.
    """
    names = _masked_names(model, cfg.mask)
    _, _, r = _residual(model, T.as_tensor(x), np.asarray(y, dtype=np.int64), T.as_tensor(lam),
                        cfg, names, theta_star(model, cfg.mask))
    return _distance(r, cfg.metric)


@dataclass
class KktTerms:
    total: Tensor
    primal: float
    stat: float
    logits: np.ndarray


def _kkt_terms(model, x: Tensor, y, lam: Tensor, cfg, names, theta) -> tuple[Tensor, float, float, np.ndarray]:
    z, per, r = _residual(model, x, y, lam, cfg, names, theta)
    primal = _primal(z, per, y)
    stat = _distance(r, cfg.metric)
    total = T.add(T.mul(primal, cfg.primal_weight), T.mul(stat, cfg.beta))
    return total, primal.item(), stat.item(), z.data


def kkt_loss(model: Model, x, y, lam, cfg: ExtractConfig, aug: Augmentation | None) -> KktTerms:
    """``L_kkt(X) + gamma * L_kkt(f_A(X))`` with ``L_kkt = L_primal + beta * L_stat``."""
    x = T.as_tensor(x)
    lam = T.as_tensor(lam)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ExtractionError("no alive candidates")
    names = _masked_names(model, cfg.mask)
    theta = theta_star(model, cfg.mask)
    total, primal, stat, z = _kkt_terms(model, x, y, lam, cfg, names, theta)
    if cfg.gamma > 0 and aug is not None:
        aug_total, *_ = _kkt_terms(model, augment(x, aug), y, lam, cfg, names, theta)
        total = T.add(total, T.mul(aug_total, cfg.gamma))
    return KktTerms(total, primal, stat, z)


# ---------------------------------------------------------------- synthesis

@dataclass
class TraceRow:
    iteration: int
    primal: float
    stat: float
    total: float
    mean_entropy: float
    alive: int                     # after pruning
    all_correct: bool = False
    alive_per_class: tuple[int, ...] = ()
    min_lambda: float = 0.0        # over alive candidates, after pruning


@dataclass
class Trace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def first_all_correct(self) -> int | None:
        for i, r in enumerate(self.rows):
            if r.all_correct:
                return i
        return None

    CSV_COLUMNS = ("iteration", "L_primal", "L_stat", "L_total", "mean_entropy", "alive")

    def to_csv(self, config_text: str = "") -> str:
        buf = io.StringIO(comment_block(config_text))
        buf.seek(0, 2)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.iteration, repr(r.primal), repr(r.stat), repr(r.total),
                        repr(r.mean_entropy), r.alive])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> Trace:
        reader = csv.reader(io.StringIO(strip_comments(text)[1]))
        header = next(reader)
        if tuple(header) != cls.CSV_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        return cls([TraceRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]))
                    for r in reader])

    def save_csv(self, path, config_text: str = "") -> None:
        Path(path).write_text(self.to_csv(config_text))


def init_candidates(model: Model, cfg: ExtractConfig, rng: np.random.Generator,
                    shape: tuple[int, ...] | None = None) -> DsvSet:
    """N x C candidates from noise; images get N(0.5, 0.25) clipped to [0, 1]."""
    c = model.num_classes
    n = cfg.n_per_class * c
    shape = tuple(model.arch.input_shape) if shape is None else shape
    image = len(shape) == 3
    if image:
        x = np.clip(cfg.init_mean + cfg.init_std * rng.normal(size=(n, *shape)), 0.0, 1.0)
    else:
        x = rng.normal(size=(n, *shape))
    lam0 = 1.0 / n if cfg.init_lambda is None else cfg.init_lambda
    return DsvSet(x, np.repeat(np.arange(c), cfg.n_per_class), np.full(n, lam0),
                  np.ones(n, dtype=bool), c, cfg.to_text())


def synthesize(model: Model, cfg: ExtractConfig, init: DsvSet | None = None,
               family: tuple[Augmentation, ...] | None = None) -> tuple[DsvSet, Trace]:
    """Refine noise into DSVs by descending the DeepKKT loss on ``x`` and ``lam``.

    Each iteration samples one augmentation, takes one gradient step on the
    alive candidates and removes every candidate whose multiplier went
    negative.  With ``lowres_iters`` > 0 (images only) the first iterations
    optimise a half-resolution image that is bilinearly upsampled before the
    forward pass; afterwards the upsampled image becomes the variable.
    """
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(model.arch.input_shape)
    image = len(shape) == 3
    family = default_family(image, cfg.aug_pad, cfg.jitter) if family is None else family
    lowres = cfg.lowres_iters if image else 0
    if init is None:
        low_shape = (shape[0], shape[1] // 2, shape[2] // 2) if lowres else shape
        dsv = init_candidates(model, cfg, rng, low_shape)
    else:
        dsv = DsvSet(init.x.copy(), init.y.copy(), init.lam.copy(), init.alive.copy(),
                     init.num_classes, cfg.to_text())
        if lowres:
            raise ValueError("a custom initialisation cannot be combined with lowres_iters")
    names = _masked_names(model, cfg.mask)
    theta = theta_star(model, cfg.mask)
    trace = Trace()
    x, lam, alive = dsv.x.copy(), dsv.lam.copy(), dsv.alive.copy()
    best, since_best = np.inf, 0
    started = [bool((alive & (dsv.y == c)).any()) for c in range(dsv.num_classes)]

    for t in range(cfg.iterations):
        if lowres and t == lowres:
            x = np.clip(T.bilinear_resize(Tensor(x), shape[1], shape[2]).data, 0.0, 1.0)
        idx = np.flatnonzero(alive)
        y = dsv.y[idx]
        x_var = Tensor(x[idx], requires_grad=True)
        lam_var = Tensor(lam[idx], requires_grad=True)
        x_in = T.bilinear_resize(x_var, shape[1], shape[2]) if lowres and t < lowres else x_var
        aug = sample_augmentation(family, rng) if cfg.gamma > 0 else None
        terms = kkt_loss(model, x_in, y, lam_var, cfg, aug)
        if not np.isfinite(terms.total.data).all():
            raise NonFiniteError("L_total")
        gx, glam = T.grad(terms.total, [x_var, lam_var])

        new_x = x[idx] - cfg.lr_x * gx.data
        if image:
            new_x = np.clip(new_x, 0.0, 1.0)
        x[idx] = new_x
        lam[idx] = lam[idx] - cfg.lr_lambda * glam.data
        dead = idx[lam[idx] < 0]
        if len(dead):
            alive[dead] = False
            log.debug("iteration %d: removed %d candidate(s)", t, len(dead))
        assert (lam[alive] >= 0).all(), "dual feasibility violated"

        per_class = tuple(int((alive & (dsv.y == c)).sum()) for c in range(dsv.num_classes))
        trace.rows.append(TraceRow(t, terms.primal, terms.stat, terms.total.item(),
                                   float(entropy(terms.logits).mean()), int(alive.sum()),
                                   bool((terms.logits.argmax(axis=1) == y).all()), per_class,
                                   float(lam[alive].min()) if alive.any() else float("nan")))
        for c, k in enumerate(per_class):
            if k == 0 and started[c]:
                raise ExtractionError(f"all candidates of class {c} died at iteration {t}", c)

        total = terms.total.item()
        if total < best - cfg.tol:
            best, since_best = total, 0
        else:
            since_best += 1
            if since_best >= cfg.patience and (not lowres or t >= lowres):
                log.info("early stop at iteration %d", t)
                break

    return DsvSet(x, dsv.y.copy(), lam, alive, dsv.num_classes, cfg.to_text()), trace


# ---------------------------------------------------------------- selection

def per_sample_gradients(model: Model, x, y, names: list[str], loss: str = "ce") -> np.ndarray:
    """Rows are ``grad_theta L(x_i, y_i)`` flattened over ``names``."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    rows = []
    for i in range(len(y)):
        leafy, leaves = model.as_leaves(names)
        li = T.sum(LOSSES[loss](forward(leafy, x[i:i + 1]), y[i:i + 1]))
        gs = T.grad(li, [leaves[n] for n in names])
        rows.append(np.concatenate([g.data.ravel() for g in gs]))
    return np.stack(rows)


@dataclass
class Selection:
    lam: np.ndarray
    ranking: list[np.ndarray]        # per class, dataset indices by lambda descending
    trace: Trace
    grads: np.ndarray | None = None

    def top(self, k: int = 1) -> np.ndarray:
        return np.concatenate([r[:k] for r in self.ranking])


def _stat_value_and_grad(g: np.ndarray, lam: np.ndarray, theta: np.ndarray, cfg: ExtractConfig):
    s = g.T @ lam
    if cfg.signed_sqrt:
        ss = np.sign(s) * np.sqrt(np.abs(s))
        r = theta + ss
        dsd = 0.5 / np.sqrt(np.abs(s) + T.SQRT_EPS)
    else:
        r = theta + s
        dsd = 1.0
    if cfg.metric == "l1":
        return np.abs(r).sum(), g @ (np.sign(r) * dsd)
    return (r * r).sum(), g @ (2 * r * dsd)


def select(model: Model, data: Dataset, cfg: ExtractConfig, grads: np.ndarray | None = None) -> Selection:
    """Score training samples by fitting multipliers with ``x`` frozen.

    Projected gradient descent on the stationarity loss over ``lam >= 0``;
    returns each class's sample indices ranked by fitted lambda (ties by index).
    The trace's entropy column is the lambda-weighted mean prediction entropy.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    names = _masked_names(model, cfg.mask)
    theta = theta_star(model, cfg.mask)
    if grads is None:
        grads = per_sample_gradients(model, data.x, data.y, names, cfg.loss)
    ent = entropy(model_logits(model, data.x))
    n = len(data)
    lam = np.full(n, 1.0 / n if cfg.init_lambda is None else cfg.init_lambda)
    trace = Trace()
    for t in range(cfg.iterations):
        value, g = _stat_value_and_grad(grads, lam, theta, cfg)
        weight = lam.sum()
        wmean = float((lam * ent).sum() / weight) if weight > 0 else float("nan")
        trace.rows.append(TraceRow(t, 0.0, float(value), float(cfg.beta * value), wmean,
                                   int((lam > 0).sum()), min_lambda=float(lam.min())))
        lam = np.maximum(lam - cfg.lr_lambda * g, 0.0)
    ranking = []
    for c in range(data.num_classes):
        idx = data.of_class(c)
        ranking.append(idx[np.lexsort((idx, -lam[idx]))])
    return Selection(lam, ranking, trace, grads)


def selection_as_dsv(data: Dataset, sel: Selection, cfg: ExtractConfig) -> DsvSet:
    return DsvSet(data.x.copy(), data.y.copy(), sel.lam.copy(), np.ones(len(data), dtype=bool),
                  data.num_classes, cfg.to_text())


# ---------------------------------------------------------------- checker

@dataclass(frozen=True)
class KktReport:
    candidates: int
    alive: int
    primal_violations: int
    mean_margin: float
    within_margin: int
    min_lambda: float
    stat_l1: float
    stat_relative: float
    stat_l2sq: float
    mean_entropy: float
    aug_consistency: float
    alive_per_class: tuple[int, ...]

    def to_text(self) -> str:
        values = asdict(self)
        values["alive_per_class"] = ",".join(str(v) for v in self.alive_per_class)
        return format_kv(values)

    @classmethod
    def from_text(cls, text: str) -> KktReport:
        kv = parse_kv(text)
        out = {}
        for f in fields(cls):
            raw = kv[f.name]
            if f.name == "alive_per_class":
                out[f.name] = tuple(int(v) for v in raw.split(",") if v)
            elif f.type in ("int", int):
                out[f.name] = int(raw)
            else:
                out[f.name] = float(raw)
        return cls(**out)


def check_kkt(model: Model, dsv: DsvSet, cfg: ExtractConfig = ExtractConfig(),
              family: tuple[Augmentation, ...] | None = None) -> KktReport:
    """Evaluate every DeepKKT condition on the alive candidates."""
    idx = np.flatnonzero(dsv.alive)
    y = dsv.y[idx]
    names = _masked_names(model, cfg.mask)
    theta = theta_star(model, cfg.mask)
    if len(idx) == 0:
        nan = float("nan")
        return KktReport(len(dsv), 0, 0, nan, 0, nan, float(np.abs(theta).sum()), 1.0,
                         float((theta ** 2).sum()), nan, nan, tuple(dsv.alive_per_class()))
    x = dsv.x[idx]
    z = model_logits(model, x)
    violations = int((z.argmax(axis=1) != y).sum())
    others = z.copy()
    others[np.arange(len(y)), y] = -np.inf
    gap = z[np.arange(len(y)), y] - others.max(axis=1)
    _, _, r = _residual(model, Tensor(x), y, Tensor(dsv.lam[idx]), cfg, names, theta)
    r = r.data
    l1 = float(np.abs(r).sum())
    theta_l1 = float(np.abs(theta).sum())
    family = default_family(dsv.is_image, cfg.aug_pad, cfg.jitter) if family is None else family
    rng = np.random.default_rng(cfg.seed)
    pred = z.argmax(axis=1)
    same = []
    for a in family:
        a = replace(a, seed=int(rng.integers(2**31)))
        with T.no_grad():
            same.append(model_logits(model, augment(Tensor(x), a).data).argmax(axis=1) == pred)
    return KktReport(
        candidates=len(dsv), alive=len(idx), primal_violations=violations,
        mean_margin=float(gap.mean()), within_margin=int((gap < cfg.margin).sum()),
        min_lambda=float(dsv.lam[idx].min()), stat_l1=l1,
        stat_relative=l1 / theta_l1 if theta_l1 > 0 else float("inf"),
        stat_l2sq=float((r ** 2).sum()), mean_entropy=float(entropy(z).mean()),
        aug_consistency=float(np.mean(same)) if same else float("nan"),
        alive_per_class=tuple(dsv.alive_per_class()))
