"""Command-line entry point: ``shapeforge {gen,augment,train,eval,compare,run-all}``.

Every command works inside a run directory ``<out>/run-<id>`` where ``<id>``
is a hash of the canonical JSON of the effective :class:`RunConfig`. Flags
override values from ``--config``; the effective config is written back to
``config.json`` and every output file's SHA-256 is kept in ``manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, materialize_augmented_set
from .dataset_io import read_dataset, sha256_file, write_dataset
from .errors import ConfigError, DataError, DegenerateDimension, DivergedLoss, MissingDataset, RunLocked
from .evaluate import accuracy, mask_readout_eval, mask_readout_train, robustness_sweep, shape_bias, shape_factor
from .model import checkpoint_load, checkpoint_save
from .report import compare_reports, curves_csv, dumps_report, format_comparison, load_report, validate_report
from .synth import DISTORTIONS, Dataset, DatasetManifest, generate_factor_pairs, generate_split, pairs_to_datasets
from .train import TrainConfig, train

log = logging.getLogger("shapeforge")

MODES = ("baseline", "eleas")
PAIR_KINDS = ("same_shape", "same_texture", "random")
DATA_FILES = {
    "train": "train_aligned.sfds",
    "test": "test_independent.sfds",
    "conflict": "test_conflict.sfds",
    "readout": "readout_independent.sfds",
    "pairs": "factor_pairs.sfds",
}
# fields that choose where and what to run but not what a run computes
_UNHASHED = ("out", "modes")


@dataclass
class RunConfig:
    seed: int = 0
    train_n: int = 2000
    test_n: int = 1000
    conflict_n: int = 900
    pairs_n: int = 300
    readout_n: int = 200
    alpha: float = 4.0
    beta: float = 1.0
    eta: float = 0.65
    grid: int = 2
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 50
    schedule: str = "step"
    out: str = "runs"
    modes: list[str] = field(default_factory=lambda: list(MODES))

    def __post_init__(self):
        for name in ("train_n", "test_n", "conflict_n", "readout_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.pairs_n < 200:
            raise ConfigError("pairs_n must be >= 200 for the shape-factor estimator")
        if self.grid < 1 or 32 % self.grid:
            raise ConfigError(f"grid must divide 32, got {self.grid}")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a nonempty subset of {MODES}, got {self.modes}")
        # delegate the remaining checks to the owning modules
        self.train_config()
        try:
            self.augment_config().beta_params
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def canonical_json(self) -> str:
        data = {k: v for k, v in asdict(self).items() if k not in _UNHASHED}
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / f"run-{self.run_id}"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            eta=self.eta,
            lr=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            schedule=self.schedule,
            seed=self.seed,
        )

    def augment_config(self) -> AugmentConfig:
        try:
            return AugmentConfig(alpha=self.alpha, beta=self.beta, grid=self.grid, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# run directory bookkeeping
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise RunLocked(f"{run_dir} is locked by another shapeforge command") from exc
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def write_effective_config(cfg: RunConfig) -> None:
    path = cfg.run_dir / "config.json"
    path.write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def update_manifest(cfg: RunConfig) -> dict:
    """Record the SHA-256 of every file in the run directory."""
    root = cfg.run_dir
    files = {}
    for path in sorted(root.rglob("*")):
        rel = path.relative_to(root).as_posix()
        if path.is_file() and rel not in ("manifest.json", ".lock"):
            files[rel] = sha256_file(path)
    manifest = {"run_id": cfg.run_id, "version": __version__, "files": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def data_path(cfg: RunConfig, key: str) -> Path:
    return cfg.run_dir / "data" / DATA_FILES[key]


def load_split(cfg: RunConfig, key: str) -> Dataset:
    path = data_path(cfg, key)
    if not path.exists():
        raise MissingDataset(f"{path} not found; run `shapeforge gen` with the same settings first")
    return read_dataset(path)


def load_pair_sets(cfg: RunConfig) -> dict[str, tuple[Dataset, Dataset]]:
    ds = load_split(cfg, "pairs")
    m = ds.manifest.extra.get("pairs_per_kind") if ds.manifest else None
    if m is None or len(ds) != 6 * m:
        raise DataError(f"{data_path(cfg, 'pairs')} does not hold 3 x 2 x pairs_per_kind records")
    sets = {}
    for i, kind in enumerate(PAIR_KINDS):
        a = ds.subset(np.arange(2 * i * m, (2 * i + 1) * m))
        b = ds.subset(np.arange((2 * i + 1) * m, (2 * i + 2) * m))
        sets[kind] = (a, b)
    return sets


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> dict[str, str]:
    """Generate the five dataset files; returns ``{file name: sha256}``."""
    plan = [
        ("train", "aligned", cfg.train_n),
        ("test", "independent", cfg.test_n),
        ("conflict", "conflict", cfg.conflict_n),
        ("readout", "independent", cfg.readout_n),
    ]
    digests = {}
    for key, mode, n in plan:
        ds = generate_split(mode, n, cfg.seed, name=key)
        meta = write_dataset(ds, data_path(cfg, key))
        digests[DATA_FILES[key]] = meta["sha256"]
    members = []
    for kind in PAIR_KINDS:
        members.extend(pairs_to_datasets(generate_factor_pairs(kind, cfg.pairs_n, cfg.seed)))
    pairs = Dataset(
        images=np.concatenate([d.images for d in members]),
        shape_class=np.concatenate([d.shape_class for d in members]),
        texture_class=np.concatenate([d.texture_class for d in members]),
        masks=np.concatenate([d.masks for d in members]),
    )
    manifest = DatasetManifest(
        split="pairs",
        count=len(pairs),
        class_counts=np.bincount(pairs.shape_class, minlength=10).tolist(),
        mode="pairs",
        seed=cfg.seed,
        extra={"pairs_per_kind": cfg.pairs_n, "layout": [f"{k}:{side}" for k in PAIR_KINDS for side in ("a", "b")]},
    )
    meta = write_dataset(pairs, data_path(cfg, "pairs"), manifest)
    digests[DATA_FILES["pairs"]] = meta["sha256"]
    for name, digest in digests.items():
        log.info("wrote %s sha256=%s", name, digest)
    return digests


def cmd_augment(cfg: RunConfig, epoch: int = 0) -> Path:
    ds = load_split(cfg, "train")
    out = cfg.run_dir / "augment" / f"epoch{epoch}.sfds"
    materialize_augmented_set(ds, epoch, len(ds), cfg.augment_config(), out)
    log.info("wrote %s sha256=%s", out.name, sha256_file(out))
    return out


def cmd_train(cfg: RunConfig, mode: str) -> Path:
    ds = load_split(cfg, "train")
    tcfg = cfg.train_config()
    mode_dir = cfg.run_dir / mode
    mode_dir.mkdir(parents=True, exist_ok=True)
    if mode == "eleas":
        log.info(
            "training eleas: eta=%g alpha=%g beta=%g grid=%d lr=%g momentum=%g epochs=%d batch_size=%d",
            tcfg.eta, cfg.alpha, cfg.beta, cfg.grid, tcfg.lr, tcfg.momentum, tcfg.epochs, tcfg.batch_size,
        )
        augment = cfg.augment_config()
    else:
        log.info(
            "training baseline: lr=%g momentum=%g epochs=%d batch_size=%d",
            tcfg.lr, tcfg.momentum, tcfg.epochs, tcfg.batch_size,
        )
        augment = None
    params, _ = train(ds, mode, tcfg, augment, log_path=mode_dir / "train.jsonl")
    ckpt = mode_dir / "model.ckpt"
    digest = checkpoint_save(params, ckpt, extra={"mode": mode, "run_id": cfg.run_id})
    log.info("wrote %s sha256=%s", ckpt.relative_to(cfg.run_dir), digest)
    return ckpt


def build_report(cfg: RunConfig, mode: str, checkpoint: Path | None = None) -> dict:
    ckpt = checkpoint or cfg.run_dir / mode / "model.ckpt"
    params = checkpoint_load(ckpt)
    test = load_split(cfg, "test")
    conflict = load_split(cfg, "conflict")
    readout = load_split(cfg, "readout")
    bias = shape_bias(params, conflict)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateDimension)
        factor = shape_factor(params, load_pair_sets(cfg))
    if caught:
        log.warning("%d embedding dimensions were degenerate and counted as residual", len(caught))
    readout_weights = mask_readout_train(params, readout, seed=cfg.seed)
    curves = robustness_sweep(params, test, DISTORTIONS, seed=cfg.seed)
    factor_dict = factor.to_dict()
    factor_dict.pop("scores")
    report = {
        "run_id": cfg.run_id,
        "mode": mode,
        "seed": cfg.seed,
        "clean_acc": accuracy(params, test),
        "conflict": bias.to_dict(),
        "shape_factor": factor_dict,
        "miou": mask_readout_eval(params, readout_weights, test),
        "robustness": [c.to_dict() for c in curves],
    }
    return validate_report(report, f"{mode} report")


def cmd_eval(cfg: RunConfig, mode: str, checkpoint: Path | None = None) -> Path:
    report = build_report(cfg, mode, checkpoint)
    mode_dir = cfg.run_dir / mode
    mode_dir.mkdir(parents=True, exist_ok=True)
    path = mode_dir / "metrics.json"
    path.write_text(dumps_report(report))
    (mode_dir / "metrics.csv").write_text(curves_csv(report))
    log.info("%s: clean_acc=%.4f shape_bias=%s miou=%.4f", mode, report["clean_acc"], report["conflict"]["shape_bias"], report["miou"])
    return path


def cmd_compare(path_a: Path, path_b: Path, json_out: Path | None = None) -> dict:
    cmp = compare_reports(load_report(path_a), load_report(path_b))
    if json_out is not None:
        json_out.write_text(json.dumps(cmp, indent=2, sort_keys=True) + "\n")
    return cmp


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_FLAG_FIELDS = {
    "seed": int,
    "out": str,
    "alpha": float,
    "beta": float,
    "eta": float,
    "grid": int,
    "epochs": int,
    "lr": float,
    "momentum": float,
    "batch_size": int,
    "train_n": int,
    "test_n": int,
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    for name, kind in _FLAG_FIELDS.items():
        parser.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapeforge", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate dataset files")
    _common(p)
    p = sub.add_parser("augment", help="write an augmented set with provenance")
    _common(p)
    p.add_argument("--aug-epoch", type=int, default=0)
    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p = sub.add_parser("eval", help="evaluate a checkpoint into a MetricsReport")
    _common(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--checkpoint", type=Path, help="default: <run>/<mode>/model.ckpt")
    p = sub.add_parser("compare", help="compare two MetricsReports")
    p.add_argument("report_a", type=Path)
    p.add_argument("report_b", type=Path)
    p.add_argument("--json-out", type=Path)
    p = sub.add_parser("run-all", help="gen, augment, train and eval every mode, then compare")
    _common(p)
    p.add_argument("--mode", choices=MODES, action="append", dest="modes_flag", help="restrict to one mode (repeatable)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "modes_flag", None):
        data["modes"] = list(dict.fromkeys(args.modes_flag))
    return RunConfig.from_dict(data)


def _run(args: argparse.Namespace) -> int:
    if args.command == "compare":
        cmp = cmd_compare(args.report_a, args.report_b, args.json_out)
        sys.stdout.write(format_comparison(cmp))
        return 0
    cfg = resolve_config(args)
    with run_lock(cfg.run_dir):
        write_effective_config(cfg)
        try:
            if args.command == "gen":
                cmd_gen(cfg)
            elif args.command == "augment":
                cmd_augment(cfg, args.aug_epoch)
            elif args.command == "train":
                cmd_train(cfg, args.mode)
            elif args.command == "eval":
                cmd_eval(cfg, args.mode, args.checkpoint)
            elif args.command == "run-all":
                cmd_gen(cfg)
                if "eleas" in cfg.modes:
                    cmd_augment(cfg)
                reports = {}
                for mode in cfg.modes:
                    cmd_train(cfg, mode)
                    reports[mode] = cmd_eval(cfg, mode)
                if len(reports) == 2:
                    cmp = cmd_compare(reports["baseline"], reports["eleas"], cfg.run_dir / "comparison.json")
                    text = format_comparison(cmp)
                    (cfg.run_dir / "comparison.txt").write_text(text)
                    sys.stdout.write(text)
        finally:
            update_manifest(cfg)
    sys.stdout.write(f"{cfg.run_dir}\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (DataError, OSError) as exc:
        log.error("data error: %s", exc)
        return 3
    except DivergedLoss as exc:
        log.error("training diverged: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
