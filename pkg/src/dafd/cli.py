"""``dafd`` command line: synthesize/adapt data, preprocess, train, evaluate, report.

Progress and results go to stdout as ``key=value`` lines.  Every command that
writes files also writes ``<command>.provenance.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, dann, evaluation as ev, ingest, nn
from .signal import preprocess_many, write_segment_dump

DEFAULT_CHECKPOINT = "model.ckpt"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Effective settings of one command: defaults < config file < flags."""

    data: str | None = None
    out: str | None = None
    mode: str = "DAFD"
    scenario: str | None = None
    pair: str | None = None
    dataset: str | None = None
    seed: int = 0
    jobs: int = 1
    epochs: int = 200
    patience: int = 10
    batch_per_domain: int = 4
    val_fraction: float = 0.2
    lr: float = 0.001
    lam: float = 1.0
    dropout: float = 0.1
    weight_decay: float = dann.WEIGHT_DECAY
    modes: list = field(default_factory=lambda: list(ev.REPORT_MODES))
    grid: bool = False
    # synth
    n_subjects: int = 20
    trials_per_class: int = 5
    rotation_deg: float = 25.0
    gains: list = field(default_factory=lambda: [0.9, 1.1, 1.0])
    noise_sigma: float = 0.03
    # adapt / export
    mapping: str | None = None
    position: str | None = None
    checkpoint: str | None = None

    @property
    def hyperparams(self):
        return dann.Hyperparams(self.dropout, self.lr, self.lam, self.weight_decay)

    def train_config(self, mode=None):
        return dann.TrainConfig(dann.canonical_mode(mode or self.mode), self.batch_per_domain,
                                self.epochs, self.patience, self.seed, self.val_fraction)


FLAG_KEYS = {"lambda": "lam"}


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    cfg = {FLAG_KEYS.get(k, k).replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(cfg) - known
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def resolve_config(args):
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = replace(cfg, **load_config(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            cfg = replace(cfg, **{f.name: v})
    if cfg.mode:
        cfg.mode = dann.canonical_mode(cfg.mode)
    cfg.modes = [dann.canonical_mode(m) for m in cfg.modes]
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def emit(**kv):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()), flush=True)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out_dir, command, cfg, outputs):
    """Sidecar with the full effective config, seed, version and output hashes."""
    out_dir = Path(out_dir)
    record = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "outputs": {str(Path(p).relative_to(out_dir)): _sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / f"{command}.provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(cfg):
    if not cfg.out:
        raise UsageError("--out is required")
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(cfg):
    if not cfg.data:
        raise UsageError("--data is required")
    p = Path(cfg.data)
    p = p / "manifest.csv" if p.is_dir() else p
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    return p


# ---------------------------------------------------------------------------
# data selection


def parse_pair(text, scenario=None, default_dataset=None):
    """``SRC:TGT`` where each side is ``POS`` or ``DATASET/POS``."""
    parts = text.split(":")
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"--pair must look like SRC:TGT, got {text!r}")
    sides = []
    for p in parts:
        if "/" in p:
            ds, pos = p.split("/", 1)
        else:
            if default_dataset is None:
                raise UsageError(f"--pair side {p!r} needs DATASET/POS (several datasets loaded)")
            ds, pos = default_dataset, p
        sides.append((ds, pos))
    if scenario is None:
        scenario = "cross_position" if sides[0][0] == sides[1][0] else "cross_config"
    try:
        return ev.PairSpec(scenario, sides[0], sides[1])
    except ValueError as e:
        raise UsageError(str(e)) from None


def load_segments(cfg, log=True):
    """All canonical trials preprocessed, keyed by ``(dataset_id, position)``."""
    trials = ingest.load_canonical(_manifest(cfg))
    groups = {}
    for tr in trials:
        groups.setdefault((tr.dataset_id, tr.position), []).append(tr)
    data = {}
    for key in sorted(groups):
        logger = (lambda msg: print(msg, file=sys.stderr)) if log else None
        data[key] = preprocess_many(groups[key], log=logger)
        emit(event="loaded", dataset=key[0], position=key[1], trials=len(groups[key]),
             segments=len(data[key]))
    return data


def _single_dataset(data):
    ds = sorted({k[0] for k in data})
    return ds[0] if len(ds) == 1 else None


def select_pair(cfg, data):
    if not cfg.pair:
        raise UsageError("--pair is required")
    pair = parse_pair(cfg.pair, cfg.scenario, cfg.dataset or _single_dataset(data))
    for key in (pair.source, pair.target):
        if not data.get(tuple(key)):
            raise ValueError(f"no segments for {key[0]}/{key[1]} in {cfg.data}")
    return pair


def pair_pools(pair, data):
    src = dann.SegmentPool(ev._retag(data[tuple(pair.source)], "source"), "source")
    tgt = dann.SegmentPool(ev._retag(data[tuple(pair.target)], "target"), "target")
    return src, tgt


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    out = _out_dir(cfg)
    base = ingest.SynthSpec(n_subjects=cfg.n_subjects, trials_per_class_per_subject=cfg.trials_per_class,
                            noise_sigma=cfg.noise_sigma, seed=cfg.seed, position=ev.SYNTH_SOURCE[1])
    shifted = replace(base, position=ev.SYNTH_TARGET[1], domain_shift=ingest.DomainShift(
        math.radians(cfg.rotation_deg), tuple(cfg.gains)))
    trials = ingest.synth_trials(base) + ingest.synth_trials(shifted)
    manifest = ingest.write_canonical(trials, out)
    outputs = [manifest] + [out / "trials" / f"{t.trial_id}.csv" for t in trials]
    write_provenance(out, "synth", cfg, outputs)
    emit(command="synth", trials=len(trials), source="synth/WA", target="synth/RP", out=manifest)
    return 0


def cmd_adapt(cfg):
    if not (cfg.data and cfg.mapping and cfg.dataset and cfg.position):
        raise UsageError("adapt needs --data RAW_DIR --mapping FILE --dataset ID --position POS")
    if not Path(cfg.data).is_dir():
        raise FileNotFoundError(f"raw directory not found: {cfg.data}")
    out = _out_dir(cfg)
    mapping = ingest.ColumnMapping.from_file(cfg.mapping)
    trials = ingest.adapt_dataset(cfg.data, mapping, cfg.dataset, cfg.position)
    manifest = ingest.write_canonical(trials, out)
    write_provenance(out, "adapt", cfg, [manifest] + [out / "trials" / f"{t.trial_id}.csv" for t in trials])
    emit(command="adapt", trials=len(trials), out=manifest)
    return 0


def cmd_preprocess(cfg):
    data = load_segments(cfg)
    out = _out_dir(cfg)
    segs = []
    if cfg.pair:
        pair = select_pair(cfg, data)
        src, tgt = pair_pools(pair, data)
        segs = src.segments + tgt.segments
    else:
        for key in sorted(data):
            segs += data[key]
    path = out / "segments.csv"
    n = write_segment_dump(path, segs)
    write_provenance(out, "preprocess", cfg, [path])
    emit(command="preprocess", segments=n, out=path)
    return 0


def _write_history(path, history):
    rows = list(history.rows())
    cols = ["epoch", "train_loss_fall", "train_loss_domain", "train_loss_total",
            "val_loss_fall", "val_loss_domain", "val_loss_total"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] if k == "epoch" else repr(float(r[k])) for k in cols})


def cmd_train(cfg):
    data = load_segments(cfg)
    pair = select_pair(cfg, data)
    out = _out_dir(cfg)
    src, tgt = pair_pools(pair, data)
    tcfg = cfg.train_config()

    def on_epoch(epoch, tr, va):
        emit(epoch=epoch, train_loss_total=tr.loss_total, val_loss_total=va.loss_total)

    res = dann.fit(src, tgt, cfg.hyperparams, tcfg, on_epoch=on_epoch)
    ckpt = out / DEFAULT_CHECKPOINT
    nn.save_checkpoint(ckpt, res.model, hyperparams=dann.hyperparams_dict(cfg.hyperparams),
                       extra={"mode": tcfg.mode, "pair": str(pair), "seed": cfg.seed,
                              "best_epoch": res.history.best_epoch})
    hist = out / "history.csv"
    _write_history(hist, res.history)
    write_provenance(out, "train", cfg, [ckpt, hist])
    emit(command="train", pair=pair, mode=tcfg.mode, best_epoch=res.history.best_epoch,
         stopped_epoch=res.history.stopped_epoch, best_val_loss_total=res.best_val_loss, out=ckpt)
    return 0


def cmd_grid(cfg):
    data = load_segments(cfg)
    pair = select_pair(cfg, data)
    out = _out_dir(cfg)
    src, tgt = pair_pools(pair, data)
    best, results = dann.grid_search(src, tgt, cfg.train_config(), jobs=cfg.jobs)
    path = out / "grid.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,dropout,lr,lambda,seed,best_val_loss_total,best_epoch,stopped_epoch\n")
        for r in sorted(results, key=lambda r: r.index):
            hp = r.hyperparams
            fh.write(f"{r.index},{hp.dropout!r},{hp.lr!r},{hp.lam!r},{r.seed},"
                     f"{r.best_val_loss!r},{r.best_epoch},{r.stopped_epoch}\n")
            emit(tuple=r.index, dropout=hp.dropout, lr=hp.lr, lam=hp.lam,
                 best_val_loss_total=r.best_val_loss)
    write_provenance(out, "grid", cfg, [path])
    emit(command="grid", tuples=len(results), best_dropout=best.dropout, best_lr=best.lr,
         best_lambda=best.lam, out=path)
    return 0


def _pair_job(args):
    pair, data, modes, tcfg, hp, grid = args
    return ev.run_pair(pair, data, modes, tcfg, hp, grid=grid)


def cmd_evalpairs(cfg):
    data = load_segments(cfg)
    out = _out_dir(cfg)
    if cfg.pair:
        pairs = [select_pair(cfg, data)]
    else:
        if not cfg.scenario:
            raise UsageError("evalpairs needs --scenario or --pair")
        pairs = [p for p in ev.enumerate_pairs(cfg.scenario, cfg.dataset)
                 if tuple(p.source) in data and tuple(p.target) in data]
        if not pairs:
            raise ValueError(f"no {cfg.scenario} pair has data in {cfg.data}")
    tcfg = cfg.train_config()
    jobs = [(p, {k: data[k] for k in (tuple(p.source), tuple(p.target))}, cfg.modes, tcfg,
             cfg.hyperparams, cfg.grid) for p in pairs]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            per_pair = list(ex.map(_pair_job, jobs))
    else:
        per_pair = [_pair_job(j) for j in jobs]
    results = [r for rs in per_pair for r in rs]
    for r in results:
        m = r.mean
        emit(pair=r.pair, mode=r.mode, sen=m.sen, spe=m.spe, pre=m.pre, f1=m.f1)
    path = out / "results.csv"
    ev.write_results_csv(path, results)
    write_provenance(out, "evalpairs", cfg, [path])
    emit(command="evalpairs", pairs=len(pairs), modes=len(cfg.modes), out=path)
    return 0


def cmd_report(cfg):
    if not cfg.data:
        raise UsageError("report needs --data RESULTS_CSV")
    src = Path(cfg.data)
    src = src / "results.csv" if src.is_dir() else src
    if not src.is_file():
        raise FileNotFoundError(f"results file not found: {src}")
    table = ev.build_report(ev.read_results_csv(src))
    text = table.to_text()
    sys.stdout.write(text)
    if cfg.out:
        out = _out_dir(cfg)
        (out / "report.txt").write_text(text, encoding="utf-8")
        table.to_csv(out / "report.csv")
        write_provenance(out, "report", cfg, [out / "report.txt", out / "report.csv"])
    return 0


def cmd_export_features(cfg):
    if not cfg.checkpoint:
        raise UsageError("export-features needs --checkpoint FILE")
    if not Path(cfg.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    model, _, _ = nn.load_checkpoint(cfg.checkpoint)
    data = load_segments(cfg)
    out = _out_dir(cfg)
    if cfg.pair:
        src, tgt = pair_pools(select_pair(cfg, data), data)
        segs = src.segments + tgt.segments
    else:
        segs = [s for k in sorted(data) for s in data[k]]
    path = out / "features.csv"
    n = ev.export_features(model, segs, path)
    write_provenance(out, "export-features", cfg, [path])
    emit(command="export-features", rows=n, out=path)
    return 0


GRADCHECK_TOL = 1e-4


def cmd_gradcheck(cfg):
    rng = np.random.default_rng(cfg.seed)
    model = nn.init_params(rng)
    batch = rng.uniform(0.0, 1.0, size=(4, nn.N_AXES, nn.INPUT_LENGTH))
    worst = 0.0
    for lam in dann.GRID_LAMBDA:
        err = nn.grad_check(model, batch, lam=lam)
        worst = max(worst, err)
        emit(seed=cfg.seed, lam=lam, max_rel_err=err)
    ok = worst < GRADCHECK_TOL
    emit(command="gradcheck", max_rel_err=worst, tol=GRADCHECK_TOL, status="PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_pairs(cfg):
    if not cfg.scenario:
        raise UsageError("pairs needs --scenario")
    pairs = ev.enumerate_pairs(cfg.scenario, cfg.dataset)
    for p in pairs:
        emit(scenario=p.scenario, source=f"{p.source[0]}/{p.source[1]}",
             target=f"{p.target[0]}/{p.target[1]}")
    emit(command="pairs", count=len(pairs))
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic two-domain corpus"),
    "adapt": (cmd_adapt, "convert a raw dataset export to canonical trials"),
    "preprocess": (cmd_preprocess, "canonical trials -> segment dump"),
    "train": (cmd_train, "train one pair in one mode"),
    "grid": (cmd_grid, "27-tuple hyperparameter search"),
    "evalpairs": (cmd_evalpairs, "5-fold evaluation over a scenario's pairs"),
    "report": (cmd_report, "results CSV -> summary table"),
    "export-features": (cmd_export_features, "write extractor features for plotting"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the network gradients"),
    "pairs": (cmd_pairs, "list a scenario's source -> target pairs"),
}


def _mode_arg(text):
    try:
        return dann.canonical_mode(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--data", help="input directory or file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mode", type=_mode_arg,
                        help="source_only | dafd | dafd_adl | target_only")
    common.add_argument("--modes", type=lambda s: [_mode_arg(m) for m in s.split(",")],
                        help="comma-separated modes for evalpairs")
    common.add_argument("--scenario", choices=["cross_position", "cross_config"])
    common.add_argument("--pair", help="SRC:TGT, each POS or DATASET/POS")
    common.add_argument("--dataset", help="dataset id")
    common.add_argument("--position", help="sensor position (adapt)")
    common.add_argument("--mapping", help="column mapping YAML (adapt)")
    common.add_argument("--checkpoint", help="model checkpoint (export-features)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--dropout", type=float)
    common.add_argument("--subjects", dest="n_subjects", type=int, help="synthetic subjects (synth)")
    common.add_argument("--grid", action="store_const", const=True,
                        help="grid-search hyperparameters inside every fold (evalpairs)")
    parser = argparse.ArgumentParser(prog="dafd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dafd {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, helptext) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"dafd {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures -> exit 1 with a diagnostic
        print(f"dafd {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
