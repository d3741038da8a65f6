"""Command-line front end: ``dsv <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Every run resolves a :class:`RunConfig` (defaults, then the config file, then
flags), writes it to ``<out>/config.txt`` and embeds it in the artifacts it
produces.  Failures print ``error: <code>: <message>`` and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import deepkkt
from . import eval as E
from .data import DataError, Dataset, gen_blobs2d, gen_glyphs, load_dataset, load_idx, save_dataset
from .deepkkt import DsvSet, ExtractConfig, ExtractionError
from .io import ContainerError, comment_block, format_kv, parse_kv
from .nn import Architecture, Model, init_model, load_checkpoint, save_checkpoint
from .optim import accuracy, make_optimizer, train
from .svm import InfeasibleError
from .tensor import NonFiniteError

log = logging.getLogger("dsv")

_EXTRACT_DEFAULTS = E.glyph_extract_config()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset
    dataset: str = "glyphs"
    num_classes: int = 3
    train_per_class: int = E.GLYPH_TRAIN_PER_CLASS
    test_per_class: int = E.GLYPH_TEST_PER_CLASS
    size: int = E.GLYPH_SIZE
    noise: tuple = (E.GLYPH_NOISE,)
    separation: float = 6.0
    # model and pretraining
    arch: str = "convnet"
    hidden: tuple = ()
    channels: int = 8
    depth: int = 3
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.05
    rho: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    train_loss: str = "ce"
    # extraction (same names as ExtractConfig)
    n_per_class: int = _EXTRACT_DEFAULTS.n_per_class
    beta: float = _EXTRACT_DEFAULTS.beta
    gamma: float = _EXTRACT_DEFAULTS.gamma
    lr_x: float = _EXTRACT_DEFAULTS.lr_x
    lr_lambda: float = _EXTRACT_DEFAULTS.lr_lambda
    iterations: int = _EXTRACT_DEFAULTS.iterations
    metric: str = _EXTRACT_DEFAULTS.metric
    signed_sqrt: bool = _EXTRACT_DEFAULTS.signed_sqrt
    lowres_iters: int = _EXTRACT_DEFAULTS.lowres_iters
    mask: str = _EXTRACT_DEFAULTS.mask
    margin: float = _EXTRACT_DEFAULTS.margin
    loss: str = _EXTRACT_DEFAULTS.loss
    primal_weight: float = _EXTRACT_DEFAULTS.primal_weight
    init_lambda: float | None = _EXTRACT_DEFAULTS.init_lambda
    init_mean: float = _EXTRACT_DEFAULTS.init_mean
    init_std: float = _EXTRACT_DEFAULTS.init_std
    tol: float = _EXTRACT_DEFAULTS.tol
    patience: int = _EXTRACT_DEFAULTS.patience
    aug_pad: int = _EXTRACT_DEFAULTS.aug_pad
    jitter: float = _EXTRACT_DEFAULTS.jitter
    # selection
    select_lr_lambda: float = 1e-4
    select_iterations: int = 500
    # experiments
    eval_seeds: int = 10
    retrain_steps: int = 300
    mix_eps: float = 0.05
    mix_samples: int = 20
    grad_steps: int = 2000
    grad_lr: float = 0.1
    probe_interval: int = 10
    svm_per_class: int = 20
    svm_train_steps: int = 50_000
    svm_train_lr: float = 0.5
    svm_weight_decay: float = 0.3
    # paths (empty = default location inside --out)
    data: str = ""
    test_data: str = ""
    idx_images: str = ""
    idx_labels: str = ""
    checkpoint: str = ""
    dsv: str = ""

    def to_text(self) -> str:
        return format_kv(asdict(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
        base = base or cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        updates = {}
        for key, raw in values.items():
            try:
                updates[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        return replace(base, **updates)

    def extract_config(self) -> ExtractConfig:
        names = {f.name for f in fields(ExtractConfig)}
        return ExtractConfig(**{k: v for k, v in asdict(self).items() if k in names})


_LIST_TYPES = {"noise": float, "hidden": int}


def _coerce(key: str, raw: str):
    if key in _LIST_TYPES:
        return tuple(_LIST_TYPES[key](v) for v in raw.split(",") if v.strip())
    return deepkkt._coerce(raw, getattr(RunConfig, key))


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path(value: str, out: Path, default: str) -> Path:
    return Path(value) if value else out / default


def _generate(cfg: RunConfig, test: bool) -> Dataset:
    seed = cfg.seed + (E.TEST_SEED_OFFSET if test else 0)
    n = cfg.test_per_class if test else cfg.train_per_class
    if cfg.dataset == "glyphs":
        noise = cfg.noise[0] if len(cfg.noise) == 1 else np.array(cfg.noise)
        return gen_glyphs(cfg.num_classes, n, cfg.size, noise, seed=seed)
    if cfg.dataset == "blobs2d":
        return gen_blobs2d(cfg.num_classes, n, cfg.separation, seed=seed)
    raise CliError("bad-config", f"cannot generate dataset {cfg.dataset!r}")


def _datasets(cfg: RunConfig, out: Path) -> tuple[Dataset, Dataset]:
    """Train/test split: explicit paths, then files in ``out``, then generation."""
    if cfg.dataset == "idx":
        if not (cfg.idx_images and cfg.idx_labels):
            raise CliError("missing-data", "dataset = idx needs idx_images and idx_labels")
        full = load_idx(cfg.idx_images, cfg.idx_labels, cfg.num_classes)
        rng = np.random.default_rng(cfg.seed)
        order = rng.permutation(len(full))
        cut = len(full) * 4 // 5
        return full.subset(np.sort(order[:cut])), full.subset(np.sort(order[cut:]))
    split = []
    for value, name in ((cfg.data, "data.dsvd"), (cfg.test_data, "test.dsvd")):
        path = _path(value, out, name)
        if value and not path.exists():
            raise CliError("missing-data", f"no dataset at {path}")
        split.append(load_dataset(path) if path.exists() else None)
    train_set = split[0] if split[0] is not None else _generate(cfg, test=False)
    test_set = split[1] if split[1] is not None else _generate(cfg, test=True)
    return train_set, test_set


def _architecture(cfg: RunConfig, data: Dataset) -> Architecture:
    return Architecture(cfg.arch, data.feature_shape, data.num_classes, hidden=cfg.hidden,
                        channels=cfg.channels, depth=cfg.depth)


def _load_model(cfg: RunConfig, out: Path) -> Model:
    path = _path(cfg.checkpoint, out, "checkpoint.dsvc")
    if not path.exists():
        raise CliError("missing-checkpoint", f"no checkpoint at {path}")
    return load_checkpoint(path)


def _load_dsv(cfg: RunConfig, out: Path) -> DsvSet:
    path = _path(cfg.dsv, out, "dsv.dsvx")
    if not path.exists():
        raise CliError("missing-dsv", f"no DSV set at {path}")
    return DsvSet.load(path)


def _echo(out: Path, cfg: RunConfig) -> str:
    text = cfg.to_text()
    (out / "config.txt").write_text(text)
    return text


def _write_results(out: Path, results: list[E.ExperimentResult]) -> str:
    for r in results:
        r.save(out)
    summary = E.table(results) + "\n"
    (out / "summary.txt").write_text(summary)
    return summary


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = _out(args)
    text = _echo(out, cfg)
    train_set, test_set = _generate(cfg, False), _generate(cfg, True)
    save_dataset(train_set, out / "data.dsvd", text)
    save_dataset(test_set, out / "test.dsvd", text)
    print(f"wrote {len(train_set)} training and {len(test_set)} test samples to {out}")


def cmd_train(args, cfg: RunConfig) -> None:
    out = _out(args)
    text = _echo(out, cfg)
    train_set, test_set = _datasets(cfg, out)
    for name, ds in (("data.dsvd", train_set), ("test.dsvd", test_set)):
        if not (out / name).exists():
            save_dataset(ds, out / name, text)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.rho)
    model = init_model(_architecture(cfg, train_set), cfg.seed)

    def progress(entry):
        if entry.epoch % 20 == 0 or entry.epoch == cfg.epochs - 1:
            log.info("epoch %d loss %.4f train acc %.3f", entry.epoch, entry.loss, entry.train_accuracy)

    model, history = train(model, train_set, opt, cfg.epochs, cfg.batch_size, cfg.seed,
                           loss=cfg.train_loss, log=progress)
    save_checkpoint(model, out / "checkpoint.dsvc", text)
    buf = io.StringIO(comment_block(text))
    buf.seek(0, 2)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "train_accuracy"])
    for h in history:
        w.writerow([h.epoch, repr(h.loss), repr(h.train_accuracy)])
    (out / "train_log.csv").write_text(buf.getvalue())
    print(f"train accuracy {accuracy(model, train_set):.4f}  test accuracy {accuracy(model, test_set):.4f}")


def cmd_extract(args, cfg: RunConfig) -> None:
    out = _out(args)
    model = _load_model(cfg, out)
    text = _echo(out, cfg)
    ecfg = cfg.extract_config()
    if args.mode == "select":
        ecfg = replace(ecfg, lr_lambda=cfg.select_lr_lambda, iterations=cfg.select_iterations)
        train_set, _ = _datasets(cfg, out)
        sel = deepkkt.select(model, train_set, ecfg)
        keep = sel.top(cfg.n_per_class)
        dsv = DsvSet(train_set.x[keep], train_set.y[keep], sel.lam[keep],
                     np.ones(len(keep), dtype=bool), train_set.num_classes, ecfg.to_text())
        trace = sel.trace
    else:
        dsv, trace = deepkkt.synthesize(model, ecfg)
    report = deepkkt.check_kkt(model, dsv, ecfg)
    dsv.save(out / "dsv.dsvx")
    dsv.write_grid(out / "grid.ppm")
    trace.save_csv(out / "trace.csv", text)
    (out / "report.txt").write_text(comment_block(text) + report.to_text())
    print(report.to_text(), end="")


def _dsv_extract_config(dsv: DsvSet) -> ExtractConfig:
    try:
        return ExtractConfig.from_mapping(parse_kv(dsv.config_text))
    except (KeyError, ValueError) as exc:
        raise CliError("bad-config", f"config echo in the DSV file: {exc}") from exc


def cmd_check_kkt(args, cfg: RunConfig) -> None:
    out = _out(args)
    model = _load_model(cfg, out)
    dsv = _load_dsv(cfg, out)
    ecfg = _dsv_extract_config(dsv)
    if args.mask:
        ecfg = replace(ecfg, mask=args.mask)
    print(deepkkt.check_kkt(model, dsv, ecfg).to_text(), end="")


def cmd_svm_compare(args, cfg: RunConfig) -> None:
    out = _out(args)
    text = _echo(out, cfg)
    ecfg = replace(E.linear_extract_config(seed=cfg.seed), n_per_class=cfg.n_per_class)
    cmp = E.svm_comparison(cfg.seed, cfg.svm_per_class, cfg.separation, ecfg,
                           cfg.svm_train_steps, cfg.svm_train_lr, cfg.svm_weight_decay)
    save_checkpoint(cmp.model, out / "checkpoint.dsvc", text)
    cmp.dsv.save(out / "dsv.dsvx")
    cmp.dsv.write_grid(out / "grid.ppm")
    cmp.trace.save_csv(out / "trace.csv", text)
    (out / "report.txt").write_text(comment_block(text) + cmp.report.to_text())
    (out / "comparison.txt").write_text(comment_block(text) + cmp.table())
    print(cmp.table(), end="")


def cmd_distill_eval(args, cfg: RunConfig) -> None:
    out = _out(args)
    model = _load_model(cfg, out)
    text = _echo(out, cfg)
    train_set, test_set = _datasets(cfg, out)
    seeds = [cfg.seed + i for i in range(cfg.eval_seeds)]
    ecfg = cfg.extract_config()
    runs = {}

    def synth(s):
        if s not in runs:
            runs[s] = deepkkt.synthesize(model, replace(ecfg, seed=s))[0]
        return E.one_per_class(runs[s])

    scfg = replace(ecfg, lr_lambda=cfg.select_lr_lambda, iterations=cfg.select_iterations)
    selected = E.one_per_class(deepkkt.select(model, train_set, scfg), train_set)
    arch = model.arch
    results = [
        E.distill_eval(lambda s: E.random_one_per_class(train_set, s), arch, test_set, seeds,
                       "random", cfg.retrain_steps),
        E.distill_eval(selected, arch, test_set, seeds, "dsv-select", cfg.retrain_steps),
        E.distill_eval(synth, arch, test_set, seeds, "dsv-synth", cfg.retrain_steps),
    ]
    for r in results:
        r.config_text = text
    print(_write_results(out, results), end="")


def cmd_mix_eval(args, cfg: RunConfig) -> None:
    out = _out(args)
    model = _load_model(cfg, out)
    dsv = _load_dsv(cfg, out)
    text = _echo(out, cfg)
    _, test_set = _datasets(cfg, out)
    rep = E.mixing_experiment(model, dsv, test_set, cfg.mix_eps, cfg.mix_samples, cfg.seed)
    (out / "mixing.txt").write_text(comment_block(text) + rep.to_text())
    print(rep.to_text(), end="")


def cmd_ablate(args, cfg: RunConfig) -> None:
    out = _out(args)
    model = _load_model(cfg, out)
    _echo(out, cfg)
    ab = E.ablation(model, cfg.extract_config())
    ab.export(out / "ablation")
    print(f"primal-only max |dx| = {ab.primal_only.max_dx!r}")
    print(f"stationarity-only residual reduction = {ab.stat_only.stat_reduction:.3f}")


def cmd_grad_trace(args, cfg: RunConfig) -> None:
    out = _out(args)
    text = _echo(out, cfg)
    res = E.gradient_direction_experiment(cfg.seed, cfg.separation, cfg.grad_steps, cfg.grad_lr,
                                          cfg.probe_interval)
    buf = io.StringIO(comment_block(text))
    buf.seek(0, 2)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "cosine"])
    w.writerows([s, repr(c)] for s, c in zip(res.steps, res.cosines))
    (out / "grad_trace.csv").write_text(buf.getvalue())
    print(f"min cosine over the last 10% of steps = {res.tail_min:.6f}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate train/test dataset containers"),
    "train": (cmd_train, "pretrain a model; writes checkpoint.dsvc and train_log.csv"),
    "extract": (cmd_extract, "synthesize or select DSVs; writes dsv.dsvx, grid.ppm, trace.csv, report.txt"),
    "check-kkt": (cmd_check_kkt, "print the KKT report for a checkpoint and DSV set"),
    "svm-compare": (cmd_svm_compare, "linear hinge model vs the hard-margin SVM oracle"),
    "distill-eval": (cmd_distill_eval, "retrain from one sample per class (random, selected, synthesized)"),
    "mix-eval": (cmd_mix_eval, "overlay DSVs on real samples and count prediction flips"),
    "ablate": (cmd_ablate, "primal-only vs stationarity-only synthesis"),
    "grad-trace": (cmd_grad_trace, "gradient direction convergence on a linear model"),
}


def _config_help() -> str:
    return "config keys (key = value, defaults shown):\n" + "".join(
        f"  {line}\n" for line in RunConfig().to_text().splitlines())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("--out", metavar="DIR", default=".", help="run directory (default: .)")
    common.add_argument("--mask", choices=("full", "last-layer"), help="overrides the mask key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dsv", description="Deep support vector extraction",
                                     epilog=_config_help(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text, epilog=_config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "extract":
            p.add_argument("--mode", choices=("synth", "select"), default="synth")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError("missing-config", f"no config file at {path}")
        try:
            cfg = RunConfig.from_mapping(parse_kv(path.read_text()), cfg)
        except ValueError as exc:
            raise CliError("bad-config", str(exc)) from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.mask:
        cfg = replace(cfg, mask=args.mask)
    try:
        cfg.extract_config()
    except ValueError as exc:
        raise CliError("bad-config", str(exc)) from exc
    return cfg


_ERROR_CODES = (
    (ContainerError, "bad-container"),
    (DataError, "bad-data"),
    (ExtractionError, "extraction-failed"),
    (InfeasibleError, "infeasible"),
    (E.DistillError, "distill-failed"),
    (NonFiniteError, "non-finite"),
    (ValueError, "invalid"),
    (OSError, "io"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command][0](args, cfg)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every failure becomes one parsable line
        code = next((c for kind, c in _ERROR_CODES if isinstance(exc, kind)), "internal")
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {code}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
