"""Command line: ``disrec {synth,train,evaluate,probe}``.

A run is configured by a flat JSON object. Dataset paths are resolved
relative to the config file. Outputs land in ``<out>/<run-name>/``, where
``<out>`` defaults to ``$DISREC_OUT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import (DatasetError, SplitSpec, generate_synthetic_influencer, load_dataset,
                   save_dataset, split)
from .evaluation import (build_bias_probe, compute_rank_gap, per_case_metrics, permutation_test,
                         rank_cases)
from .graphs import build_graphs
from .model import forward, load_checkpoint, save_checkpoint
from .numerics import ContractError
from .training import NonFiniteLossError, PositiveIndex, train

log = logging.getLogger("disrec")

EPOCH_COLUMNS = ("epoch", "loss_user", "loss_group", "loss_ssl", "loss_total", "val_hr5", "seconds")
PATH_KEYS = ("user_item", "group_item", "members", "social")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    user_item: str
    group_item: str
    members: str
    social: str | None = None
    n_users: int | None = None
    n_items: int | None = None
    n_groups: int | None = None
    split: str = "leave-one-out"
    split_ratio: float = 0.8
    out_dir: str | None = None
    run_name: str | None = None
    k_values: list[int] = field(default_factory=lambda: [5, 10])
    exclude_train_positives: bool = True
    record_time: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict, base: Path | None = None) -> "RunConfig":
        own = {f.name for f in fields(cls)} - {"train"}
        known = own | TrainConfig.field_names()
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = [k for k in ("user_item", "group_item", "members") if not raw.get(k)]
        if missing:
            raise ConfigError(f"missing config keys: {', '.join(missing)}")
        values = {k: v for k, v in raw.items() if k in own}
        for key in PATH_KEYS:
            if values.get(key) is not None and base is not None:
                values[key] = str((base / values[key]).resolve())
        try:
            tc = TrainConfig(**{k: v for k, v in raw.items() if k in TrainConfig.field_names()})
            rc = cls(train=tc, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        SplitSpec(rc.split, rc.split_ratio, tc.seed)
        return rc

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        raw.update(overrides or {})
        return cls.from_dict(raw, base=path.parent)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        out.update(self.train.to_dict())
        return out

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split, self.split_ratio, self.train.seed)

    def run_dir(self) -> Path:
        root = Path(self.out_dir or os.environ.get("DISREC_OUT", "runs"))
        name = self.run_name or f"{self.train.variant}-seed{self.train.seed}"
        return root / name


def _prepare(rc: RunConfig):
    for key in PATH_KEYS:
        p = getattr(rc, key)
        if p is not None and not Path(p).is_file():
            raise DatasetError(f"{key} file not found: {p}")
    ds = load_dataset(rc.user_item, rc.group_item, rc.members, rc.social,
                      n_users=rc.n_users, n_items=rc.n_items, n_groups=rc.n_groups)
    train_ds, cases = split(ds, rc.split_spec())
    graphs = build_graphs(train_ds, rc.train.cooccurrence_nodes == "members")
    return ds, train_ds, cases, graphs


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def write_epochs(path: Path, logs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for e in logs:
            w.writerow([e.epoch] + [_fmt(getattr(e, c)) for c in EPOCH_COLUMNS[1:]])


def read_epochs(path) -> list[dict[str, float | None]]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- commands --------------------------------------------------------------------

def cmd_train(config_path, overrides: dict | None = None) -> Path:
    rc = RunConfig.load(config_path, overrides)
    _, train_ds, cases, graphs = _prepare(rc)
    run_dir = rc.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")
    params, logs = train(train_ds, rc.train, graphs=graphs, validation=cases, record_time=rc.record_time,
                         on_epoch=lambda e: log.info("epoch %d total=%.6f ssl=%.6f", e.epoch, e.loss_total, e.loss_ssl))
    write_epochs(run_dir / "epochs.csv", logs)
    save_checkpoint(run_dir / "checkpoint.bin", params, rc.train,
                    (train_ds.n_users, train_ds.n_items, train_ds.n_groups))
    return run_dir


def _load_run(checkpoint, config_path=None):
    checkpoint = Path(checkpoint)
    config_path = Path(config_path) if config_path else checkpoint.parent / "config.echo"
    rc = RunConfig.load(config_path)
    ds, train_ds, cases, graphs = _prepare(rc)
    params, _ = load_checkpoint(checkpoint, rc.train, (train_ds.n_users, train_ds.n_items, train_ds.n_groups))
    out = forward(params, graphs, rc.train, training=False)
    return rc, train_ds, cases, out


def _case_metrics(rc: RunConfig, train_ds, cases, out) -> dict[str, dict[str, np.ndarray]]:
    index = PositiveIndex(train_ds) if rc.exclude_train_positives else None
    per_task = {}
    for task in ("group", "user"):
        ranked = rank_cases(out, [c for c in cases if c.kind == task], index, top_k=max(rc.k_values))
        ranks = [r.rank for r in ranked]
        values = {}
        for k in rc.k_values:
            hit, ndcg = per_case_metrics(ranks, k)
            values[f"HR@{k}"], values[f"NDCG@{k}"] = hit, ndcg
        per_task[task] = values
    return per_task


def cmd_evaluate(checkpoint, config_path=None, compare=None) -> dict:
    rc, train_ds, cases, out = _load_run(checkpoint, config_path)
    per_task = _case_metrics(rc, train_ds, cases, out)
    metrics = {
        "variant": rc.train.variant,
        "seed": rc.train.seed,
        "k_values": list(rc.k_values),
        "n_cases": {task: sum(1 for c in cases if c.kind == task) for task in per_task},
    }
    for task, values in per_task.items():
        metrics[task] = {k: (float(v.mean()) if len(v) else None) for k, v in values.items()}
    if compare is not None:
        other_dir = Path(compare)
        orc, otrain, ocases, oout = _load_run(other_dir / "checkpoint.bin")
        if ocases != cases:
            raise ConfigError(f"{other_dir} was evaluated on a different split")
        other = _case_metrics(orc, otrain, ocases, oout)
        metrics["p_values"] = {
            task: {k: (permutation_test(v, other[task][k], seed=rc.train.seed) if len(v) else None)
                   for k, v in values.items()}
            for task, values in per_task.items()
        }
    path = Path(checkpoint).parent / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def cmd_probe(checkpoint, config_path=None):
    rc, train_ds, cases, out = _load_run(checkpoint, config_path)
    probe = build_bias_probe(train_ds, cases)
    if not probe.pairs:
        raise ConfigError(f"no probe pairs could be built ({probe.skipped} group test cases skipped: "
                          f"{probe.skip_reasons or 'no group test cases'})")
    report = compute_rank_gap(out, probe)
    run_dir = Path(checkpoint).parent
    with open(run_dir / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("group_id", "true_item", "fake_item", "rank_true", "rank_fake", "gap"))
        for r in report.rows:
            w.writerow((r.group, r.true_item, r.fake_item, r.rank_true, r.rank_fake, r.gap))
    with open(run_dir / "probe_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gap_from", "gap_to", "count"))
        w.writerows(report.histogram)
    return report, probe


def cmd_synth(out_dir, n_users: int, n_items: int, n_groups: int, seed: int) -> Path:
    syn = generate_synthetic_influencer(n_users, n_items, n_groups, seed)
    out_dir = Path(out_dir)
    paths = save_dataset(syn.dataset, out_dir)
    (out_dir / "influencers.txt").write_text("".join(f"{t} {u}\n" for t, u in enumerate(syn.influencers)))
    config = {k: p.name for k, p in paths.items()}
    (out_dir / "run.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return out_dir / "run.json"


# -- argument parsing ------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "variant", "epochs", "lr", "embedding_size", "layers", "ssl_weight", "dropout"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if args.out is not None:
        out["out_dir"] = str(Path(args.out).resolve())
    if args.name is not None:
        out["run_name"] = args.name
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="split, build graphs and train")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("full", "no-social", "no-pref", "no-ssl"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embedding-size", dest="embedding_size", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--ssl-weight", dest="ssl_weight", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--out", help="output root (default $DISREC_OUT or ./runs)")
    p.add_argument("--name", help="run directory name")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    for name, text in (("evaluate", "HR/NDCG on the held-out cases"), ("probe", "preference-bias probe")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="defaults to config.echo next to the checkpoint")
        if name == "evaluate":
            p.add_argument("--compare", help="another run directory for permutation tests")

    p = sub.add_parser("synth", help="write a synthetic influencer dataset and a starter config")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--items", type=int, default=30)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            run_dir = cmd_train(args.config, _overrides(args))
            print(f"trained: {run_dir}")
        elif args.command == "evaluate":
            metrics = cmd_evaluate(args.checkpoint, args.config, args.compare)
            for task in ("group", "user"):
                print(task, " ".join(f"{k}={v:.4f}" for k, v in metrics[task].items() if v is not None))
        elif args.command == "probe":
            report, probe = cmd_probe(args.checkpoint, args.config)
            print(f"pairs={len(probe.pairs)} skipped={probe.skipped} "
                  f"mean_gap={report.mean:.3f} median_gap={report.median:.1f}")
            print("gap_from  gap_to  count")
            for lo, hi, n in report.histogram:
                print(f"{lo:>8}  {hi:>6}  {n:>5}")
        elif args.command == "synth":
            print(cmd_synth(args.out, args.users, args.items, args.groups, args.seed))
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, ContractError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
