"""Command-line entry point: train, retrain-all, untrain, eval, explain, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import Dataset, load_checkpoint_file, load_idx, save_checkpoint_file, synth_dataset
from .models import TrainConfig, build_model, evaluate_accuracy, retrain_without_class, train_baseline
from .wf import WFModel, wf_wrap

log = logging.getLogger("wfnet")

RANDOM_MODEL_SEED_OFFSET = 1_000_003

SYNTH_KEYS = {"kind", "n_classes", "per_class", "hw", "seed", "noise"}
IDX_KEYS = {"kind", "n_classes", "train_images", "train_labels", "test_images", "test_labels", "val_fraction", "seed"}
TOP_KEYS = {"arch", "dataset", "train", "untrain", "untrain_split", "seed", "out", "step_fraction"}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    dataset: dict
    arch: str = "small_cnn"
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    untrain: dict = dataclasses.field(default_factory=dict)
    untrain_split: str = "train"
    seed: int = 0
    out: str = "runs/default"
    step_fraction: float = 0.05

    def untrain_config(self):
        from .untrain import UntrainConfig

        return UntrainConfig.for_arch(self.arch, **{**self.untrain, "seed": self.seed})


def _reject_unknown(section: str, got: dict, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def parse_config(doc: dict, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Validate a configuration document; explicit flags win over file values."""
    from .untrain import UntrainConfig

    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    _reject_unknown("config", doc, TOP_KEYS)
    if "dataset" not in doc:
        raise ConfigError("configuration needs a 'dataset' section")
    ds = dict(doc["dataset"])
    kind = ds.get("kind", "synthetic")
    if kind not in ("synthetic", "idx"):
        raise ConfigError(f"dataset kind must be 'synthetic' or 'idx', got {kind!r}")
    _reject_unknown("dataset", ds, SYNTH_KEYS if kind == "synthetic" else IDX_KEYS)
    if kind == "idx":
        missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if k not in ds]
        if missing:
            raise ConfigError(f"idx dataset needs {', '.join(missing)}")
    train = dict(doc.get("train", {}))
    untrain = dict(doc.get("untrain", {}))
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
    untrain_fields = {f.name for f in dataclasses.fields(UntrainConfig)} - {"seed"}
    _reject_unknown("train", train, train_fields)
    _reject_unknown("untrain", untrain, untrain_fields)
    run_seed = seed if seed is not None else int(doc.get("seed", 0))
    split = doc.get("untrain_split", "train")
    if split not in ("train", "val"):
        raise ConfigError(f"untrain_split must be 'train' or 'val', got {split!r}")
    try:
        cfg = RunConfig(
            dataset={"kind": kind, **ds},
            arch=doc.get("arch", "small_cnn"),
            train=TrainConfig(**train, seed=run_seed),
            untrain=untrain,
            untrain_split=split,
            seed=run_seed,
            out=out if out is not None else doc.get("out", "runs/default"),
            step_fraction=float(doc.get("step_fraction", 0.05)),
        )
        cfg.untrain_config()
        build_model(cfg.arch, 2)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if not 0 < cfg.step_fraction <= 1:
        raise ConfigError("step_fraction must lie in (0, 1]")
    return cfg


def load_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    if path is None:
        raise ConfigError("--config is required (the dataset spec has no default)")
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_config(doc, seed, out)


def load_splits(cfg: RunConfig) -> dict[str, Dataset]:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        kw = {k: v for k, v in ds.items() if k != "kind"}
        if "per_class" in kw:
            kw["per_class"] = tuple(kw["per_class"])
        return synth_dataset(**kw)
    n = ds.get("n_classes", 10)
    full = load_idx(ds["train_images"], ds["train_labels"], "train", n)
    test = load_idx(ds["test_images"], ds["test_labels"], "test", n)
    val, train = full.partition(ds.get("val_fraction", 1 / 6), seed=ds.get("seed", 0))
    return {
        "train": Dataset(train.images, train.labels, "train", n),
        "val": Dataset(val.images, val.labels, "val", n),
        "test": test,
    }


def untraining_streams(cfg: RunConfig, splits: dict[str, Dataset]) -> tuple[Dataset, Dataset]:
    """(untraining stream, early-stopping split).

    With ``untrain_split = "val"`` the training set is never touched: the
    validation split is partitioned into an untraining part and a held-out part.
    """
    if cfg.untrain_split == "train":
        return splits["train"], splits["val"]
    part, hold = splits["val"].partition(0.8, seed=cfg.seed)
    return part, hold


def dataset_id(cfg: RunConfig) -> str:
    return json.dumps(cfg.dataset, sort_keys=True)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: RunConfig, args) -> int:
    splits = load_splits(cfg)
    res = train_baseline(cfg.arch, splits["train"], splits["val"], cfg.train)
    out = Path(cfg.out)
    test_acc = evaluate_accuracy(res.model, splits["test"])
    save_checkpoint_file(res.model, out / "baseline.ck", {"val_accuracy": res.val_accuracy, "seed": cfg.seed})
    report = {"arch": cfg.arch, "val_accuracy": res.val_accuracy, "test_accuracy": test_acc, "history": res.history}
    _write(out / "train_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"baseline {cfg.arch}: val {res.val_accuracy:.4f} test {test_acc:.4f} -> {out / 'baseline.ck'}")
    return 0


def cmd_retrain_all(cfg: RunConfig, args) -> int:
    splits = load_splits(cfg)
    out = Path(cfg.out) / "oracles"
    n = splits["train"].n_classes
    classes = range(n) if args.only is None else [args.only]
    for c in classes:
        res = retrain_without_class(cfg.arch, splits["train"], splits["val"], c, cfg.train)
        save_checkpoint_file(res.model, out / f"oracle_{c}.ck", {"excluded": c, "val_accuracy": res.val_accuracy})
        print(f"oracle without class {c}: val {res.val_accuracy:.4f} -> {out / f'oracle_{c}.ck'}")
    return 0


def cmd_untrain(cfg: RunConfig, args) -> int:
    from .untrain import config_dict, untrain

    base_path = Path(args.baseline or Path(cfg.out) / "baseline.ck")
    base = load_checkpoint_file(base_path)
    if isinstance(base, WFModel):
        raise ConfigError(f"{base_path} already holds a WF model; untrain needs a baseline")
    splits = load_splits(cfg)
    stream, held = untraining_streams(cfg, splits)
    wf = wf_wrap(base)
    ucfg = cfg.untrain_config()
    res = untrain(wf, stream, held, ucfg)
    out = Path(cfg.out)
    extra = {"untrain": config_dict(ucfg), "best_val_loss": res.best_val_loss, "steps": res.steps,
             "untrain_split": cfg.untrain_split}
    save_checkpoint_file(wf, out / "wf.ck", extra)
    _write(out / "untrain_history.jsonl", res.history_jsonl())
    print(f"untrained {wf.arch}: {res.steps} steps, best val loss {res.best_val_loss:.4f} -> {out / 'wf.ck'}")
    return 0


def _load_oracles(directory, classes) -> dict:
    if directory is None:
        return {}
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"oracle directory not found: {d}")
    out = {}
    for c in classes:
        p = d / f"oracle_{c}.ck"
        if not p.exists():
            raise ConfigError(f"missing oracle checkpoint {p}")
        out[c] = load_checkpoint_file(p)
    return out


def cmd_eval(cfg: RunConfig, args) -> int:
    from .metrics import evaluate

    wf = load_checkpoint_file(args.checkpoint or Path(cfg.out) / "wf.ck")
    if not isinstance(wf, WFModel):
        raise ConfigError("eval needs a WF checkpoint (run untrain first)")
    splits = load_splits(cfg)
    if args.cls == "all":
        classes = list(range(wf.n_classes))
    else:
        try:
            c = int(args.cls)
        except ValueError:
            raise ConfigError(f"--class must be an integer or 'all', got {args.cls!r}") from None
        if not 0 <= c < wf.n_classes:
            raise ConfigError(f"--class {c} outside [0, {wf.n_classes})")
        classes = [c]
    base = wf.copy()
    base.masking_enabled = False
    random_model = build_model(wf.arch, wf.n_classes, wf.net.hw, cfg.seed + RANDOM_MODEL_SEED_OFFSET)
    oracles = _load_oracles(args.oracles, classes)
    rep = evaluate(wf, base, splits["test"], random_model, classes, oracles, cfg.step_fraction,
                   dataset_id(cfg), {"run": cfg.seed, "random_model": cfg.seed + RANDOM_MODEL_SEED_OFFSET})
    out = Path(cfg.out)
    _write(out / "metrics.json", rep.to_json())
    _write(out / "metrics.txt", rep.table())
    print(rep.table(), end="")
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    from .explain import association_graph

    wf = load_checkpoint_file(args.checkpoint or Path(cfg.out) / "wf.ck")
    if not isinstance(wf, WFModel):
        raise ConfigError("explain needs a WF checkpoint (run untrain first)")
    g = association_graph(wf, args.layer, args.top_k, args.min_classes)
    stem = Path(cfg.out) / f"explain_{g.layer}"
    _write(stem.with_suffix(".csv"), g.to_csv())
    _write(stem.with_suffix(".json"), g.to_json())
    print(f"layer {g.layer}: {len(g.filters)} shared filters, {len(g.edges)} edges -> {stem}.csv")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck

    rows = run_gradcheck(seed=args.seed or 0)
    print(format_table(rows), end="")
    return 0 if all(r.passed for r in rows) else 1


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wfnet", description="Weight-filtering multi-class unlearning at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        return sp

    common(sub.add_parser("train", help="train the baseline model"))
    rt = common(sub.add_parser("retrain-all", help="train the leave-one-class-out oracles"))
    rt.add_argument("--only", type=int, help="build a single oracle")
    ut = common(sub.add_parser("untrain", help="untrain every class in one round"))
    ut.add_argument("--baseline", help="baseline checkpoint (default OUT/baseline.ck)")
    ev = common(sub.add_parser("eval", help="per-class unlearning metrics"))
    ev.add_argument("--checkpoint", help="WF checkpoint (default OUT/wf.ck)")
    ev.add_argument("--class", dest="cls", default="all", help="class index or 'all'")
    ev.add_argument("--oracles", help="directory of oracle_<c>.ck checkpoints")
    ex = common(sub.add_parser("explain", help="export filter/class associations"))
    ex.add_argument("--checkpoint", help="WF checkpoint (default OUT/wf.ck)")
    ex.add_argument("--layer", required=True, help="WF layer name or index")
    ex.add_argument("--top-k", type=int, default=10)
    ex.add_argument("--min-classes", type=int, default=2)
    gc = sub.add_parser("gradcheck", help="finite-difference check of every op kind")
    gc.add_argument("--seed", type=int)
    return p


COMMANDS = {
    "train": cmd_train,
    "retrain-all": cmd_retrain_all,
    "untrain": cmd_untrain,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = load_config(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except (ValueError, OSError, RuntimeError) as e:
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
