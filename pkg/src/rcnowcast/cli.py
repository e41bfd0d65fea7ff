"""Command-line pipeline: datagen -> train -> distill -> finetune -> sweep -> predict -> report.

Configuration precedence (lowest to highest): built-in defaults, the YAML file
given by ``--config``, ``--set section.key=value`` overrides, then dedicated
flags such as ``--seed``.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import yaml

from . import datagen, plotting
from .container import FormatError, atomic_write_bytes, read_array, write_array
from .metrics import (
    ConfusionCounts,
    confusion,
    mean_defined,
    metrics_report,
    predict_with_threshold,
    threshold_sweep,
)
from .model import BackboneConfig, build_backbone, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    TrainingDivergence,
    dataset_tensors,
    film_finetune,
    predict_probs,
    self_distill,
    train_backbone,
    write_log,
)

log = logging.getLogger("rcnowcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

BACKBONE_CKPT = "backbone.ckpt"
DISTILLED_CKPT = "distilled.ckpt"
FINETUNED_CKPT = "finetuned.ckpt"
SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
REPORT_FIELDS = ("region", "year", "threshold", "TP", "FP", "FN", "TN",
                 "csi", "f1", "iou", "accuracy", "precision", "recall")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "deterministic": True,
    "data": {"regions": 7, "years": [2019, 2020], "events": 50, "height": 32, "width": 32,
             "t_in": 4, "t_out": 32, "coarsen": 2, "rain_threshold": 0.2},
    "model": {"levels": 3, "base_channels": 32, "dropout_rate": 0.4},
    "train": {"learning_rate": 1e-4, "weight_decay": 1e-2, "max_epochs": 90, "patience": 40,
              "batch_size": 8, "mixup": True, "mixup_alpha": 1.0, "distill_epochs": 10,
              "finetune_epochs": 20, "finetune_lr": 1e-3, "val_threshold": 0.5},
    "srip": {"lambda": 0.1, "iters": 1, "seed": None},
    # sample_id % modulus: modulus-2 -> validation, modulus-1 -> test, else train
    "split": {"modulus": 5},
}


class UsageError(Exception):
    pass


class MissingStage(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _coerce(value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return [_coerce(v, default[0]) for v in value] if default else list(value)
    try:
        return type(default)(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value {value!r}: {exc}") from exc


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise UsageError(f"config key {where!r} must be a mapping")
            _merge(base[key], val, where + ".")
        else:
            base[key] = _coerce(val, DEFAULTS_FLAT.get(where, base[key]))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)
# keys whose default is None still need a type
DEFAULTS_FLAT["srip.seed"] = 0


def _set_path(cfg: dict, dotted: str, value) -> None:
    if dotted not in DEFAULTS_FLAT:
        raise UsageError(f"unknown config key {dotted!r}")
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node[p]
    node[leaf] = _coerce(value, DEFAULTS_FLAT[dotted])


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            doc = yaml.safe_load(Path(args.config).read_text()) or {}
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a mapping")
        _merge(cfg, doc)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(val))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    return cfg


@dataclass
class PipelineConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def dims(self) -> datagen.Dims:
        d = self.raw["data"]
        return datagen.Dims(t_in=d["t_in"], t_out=d["t_out"], height=d["height"], width=d["width"],
                            coarsen=d["coarsen"], rain_threshold=d["rain_threshold"])

    def backbone_config(self, manifest: datagen.DatasetManifest) -> BackboneConfig:
        m = self.raw["model"]
        return BackboneConfig(levels=m["levels"], base_channels=m["base_channels"],
                              in_channels=manifest.dims.channels, t_in=manifest.dims.t_in,
                              out_frames=manifest.dims.t_out, dropout_rate=m["dropout_rate"])

    def train_config(self) -> TrainConfig:
        t, s = self.raw["train"], self.raw["srip"]
        return TrainConfig(
            learning_rate=t["learning_rate"], weight_decay=t["weight_decay"], max_epochs=t["max_epochs"],
            patience=min(t["patience"], t["max_epochs"]), batch_size=t["batch_size"], mixup=t["mixup"],
            mixup_alpha=t["mixup_alpha"], srip_lambda=s["lambda"], srip_iters=s["iters"],
            srip_seed=self.seed if s["seed"] is None else int(s["seed"]),
            distill_epochs=t["distill_epochs"], finetune_epochs=t["finetune_epochs"],
            finetune_lr=t["finetune_lr"], val_threshold=t["val_threshold"], seed=self.seed,
            deterministic=bool(self.raw["deterministic"]),
        )


def split(dataset: datagen.Dataset, part: str, modulus: int) -> datagen.Dataset:
    if modulus < 3:
        raise UsageError("split.modulus must be >= 3")
    val_r, test_r = modulus - 2, modulus - 1
    if part == "train":
        return dataset.select(lambda s: s.sample_id % modulus not in (val_r, test_r))
    if part == "val":
        return dataset.select(lambda s: s.sample_id % modulus == val_r)
    return dataset.select(lambda s: s.sample_id % modulus == test_r)


def _region_names(manifest: datagen.DatasetManifest) -> dict[int, str]:
    return {p.region_id: p.name for p in manifest.profiles}


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStage(f"{path} not found; run the '{stage}' stage first")
    return path


def _load_data(args) -> datagen.Dataset:
    if not args.data:
        raise UsageError("--data is required")
    return datagen.read_dataset(args.data)


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------- commands

def cmd_datagen(args, cfg: PipelineConfig) -> int:
    d = cfg.raw["data"]
    if args.regions is not None:
        d["regions"] = args.regions
    if args.years is not None:
        d["years"] = _coerce(args.years, [0])
    if args.events is not None:
        d["events"] = args.events
    if d["events"] <= 0:
        raise UsageError("--events must be positive")
    if not d["years"]:
        raise UsageError("--years must name at least one year")
    try:
        profiles = datagen.default_profiles(d["regions"])
        dims = cfg.dims()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(_require_out_path(args))
    dataset = datagen.generate_dataset(profiles, d["years"], d["events"], dims, seed=cfg.seed,
                                       num_regions=d["regions"])
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        datagen.write_dataset(dataset, tmp)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("wrote %d samples to %s", len(dataset), out)
    print(f"datagen: {len(dataset)} samples -> {out}")
    return EXIT_OK


def _require_out_path(args) -> str:
    if not args.out:
        raise UsageError("--out is required")
    return args.out


def cmd_train(args, cfg: PipelineConfig) -> int:
    data = _load_data(args)
    out = _out(args)
    tc = cfg.train_config()
    mod = cfg.raw["split"]["modulus"]
    backbone = build_backbone(cfg.backbone_config(data.manifest), data.manifest.num_regions, cfg.seed)
    ckpt = train_backbone(backbone, tc, split(data, "train", mod), split(data, "val", mod))
    save_checkpoint(out / BACKBONE_CKPT, ckpt.backbone, seed=cfg.seed, stage="train", **ckpt.meta())
    write_log(out / "train_log.csv", ckpt.history)
    print(f"train: best epoch {ckpt.epoch}, val CSI {ckpt.best_val_csi} -> {out / BACKBONE_CKPT}")
    return EXIT_OK


def cmd_distill(args, cfg: PipelineConfig) -> int:
    data = _load_data(args)
    out = _out(args)
    teacher, _, _ = load_checkpoint(_require(out / BACKBONE_CKPT, "train"))
    tc = cfg.train_config()
    x, _, r = dataset_tensors(split(data, "train", cfg.raw["split"]["modulus"]))
    ckpt = self_distill(teacher, tc, x, r)
    save_checkpoint(out / DISTILLED_CKPT, ckpt.backbone, seed=cfg.seed, stage="distill", **ckpt.meta())
    write_log(out / "distill_log.csv", ckpt.history)
    print(f"distill: {ckpt.epoch} epochs -> {out / DISTILLED_CKPT}")
    return EXIT_OK


def cmd_finetune(args, cfg: PipelineConfig) -> int:
    data = _load_data(args)
    out = _out(args)
    backbone, _, meta = load_checkpoint(_require(out / DISTILLED_CKPT, "distill"))
    tc = cfg.train_config()
    mod = cfg.raw["split"]["modulus"]
    train, val = split(data, "train", mod), split(data, "val", mod)
    adapters = {}
    rows = []
    for region_id, year in data.pairs():
        in_pair = lambda s, k=(region_id, year): (s.region_id, s.year) == k  # noqa: E731
        region_train = train.select(in_pair)
        if not len(region_train):
            log.warning("no training samples for region %d year %d; identity adapters", region_id, year)
            adapters[(region_id, year)] = backbone.new_adapters((region_id, year))
            continue
        ad = film_finetune(backbone, region_id, year, region_train, tc, val_set=val.select(in_pair))
        adapters[(region_id, year)] = ad
        rows.append({"region": region_id, "year": year,
                     "gamma_shift": float(sum((g - 1).abs().sum() for g in ad.gammas).item()),
                     "beta_shift": float(sum(b.abs().sum() for b in ad.betas).item())})
    save_checkpoint(out / FINETUNED_CKPT, backbone, adapters, seed=cfg.seed, stage="finetune",
                    train_config=meta.get("train_config"))
    with open(out / "finetune_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["region", "year", "gamma_shift", "beta_shift"])
        w.writeheader()
        w.writerows(rows)
    print(f"finetune: {len(adapters)} adapter sets -> {out / FINETUNED_CKPT}")
    return EXIT_OK


def _pair_probs(backbone, adapters, dataset: datagen.Dataset):
    """Per (region, year): (samples, probability arrays [T_out, H, W])."""
    out = {}
    for key in dataset.pairs():
        subset = dataset.select(lambda s, k=key: (s.region_id, s.year) == k)
        ad = adapters.get(key)
        if ad is None:
            log.warning("no adapters for region %d year %d; using identity adapters", *key)
        x, _, r = dataset_tensors(subset)
        prob = predict_probs(backbone, x, r, ad).numpy()[:, 0]
        out[key] = (subset.samples, list(prob))
    return out


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)


def _report_row(key, p, counts, report) -> dict:
    return {"region": key[0], "year": key[1], "threshold": p, "TP": counts.tp, "FP": counts.fp,
            "FN": counts.fn, "TN": counts.tn, **{k: _fmt(v) for k, v in report.as_dict().items()}}


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    data = _load_data(args)
    out = _out(args)
    backbone, adapters, _ = load_checkpoint(_require(out / FINETUNED_CKPT, "finetune"))
    val = split(data, "val", cfg.raw["split"]["modulus"])
    probs = _pair_probs(backbone, adapters, val)
    truths = {k: [val.mask(s) for s in samples] for k, (samples, _) in probs.items()}
    result = threshold_sweep({k: p for k, (_, p) in probs.items()}, truths)
    rows = [_report_row(k, p, reg.counts[p], reg.reports[p])
            for k, reg in result.regions.items() for p in result.thresholds]
    _write_csv(out / SWEEP_CSV, rows)
    summary = {
        "thresholds": list(result.thresholds),
        "tie_break": result.tie_break,
        "best": [{"region": k[0], "year": k[1], "threshold": reg.best_threshold,
                  "csi": reg.best_report.csi if reg.best_report else None}
                 for k, reg in result.regions.items()],
        "warnings": result.warnings,
    }
    atomic_write_bytes(out / SWEEP_JSON, json.dumps(summary, indent=1).encode())
    names = _region_names(data.manifest)
    plotting.plot_sweep(result, out / "figures" / "threshold_sweep.png",
                        {k: f"{names.get(k[0], k[0])}/{k[1]}" for k in result.regions})
    print(f"sweep: {len(result.regions)} region-years -> {out / SWEEP_JSON}")
    return EXIT_OK


def _best_thresholds(out: Path) -> dict[tuple[int, int], float]:
    doc = json.loads(_require(out / SWEEP_JSON, "sweep").read_text())
    return {(b["region"], b["year"]): b["threshold"] for b in doc["best"] if b["threshold"] is not None}


def cmd_predict(args, cfg: PipelineConfig) -> int:
    data = _load_data(args)
    out = _out(args)
    backbone, adapters, _ = load_checkpoint(_require(out / FINETUNED_CKPT, "finetune"))
    best = _best_thresholds(out)
    test = split(data, "test", cfg.raw["split"]["modulus"])
    index = []
    for key, (samples, probs) in _pair_probs(backbone, adapters, test).items():
        p = best.get(key, 0.5)
        for s, prob in zip(samples, probs):
            name = f"predictions/{s.key}.mask"
            write_array(out / name, predict_with_threshold(prob, p))
            index.append({"region": s.region_id, "year": s.year, "sample": s.sample_id,
                          "threshold": p, "file": name})
    atomic_write_bytes(out / "predictions" / "index.json", json.dumps(index, indent=1).encode())
    print(f"predict: {len(index)} masks -> {out / 'predictions'}")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, cfg: PipelineConfig) -> int:
    data = _load_data(args)
    out = _out(args)
    _require(out / "predictions" / "index.json", "predict")
    index = json.loads((out / "predictions" / "index.json").read_text())
    test = split(data, "test", cfg.raw["split"]["modulus"])
    by_key = {(s.region_id, s.year, s.sample_id): s for s in test.samples}
    pooled: dict[tuple[int, int], ConfusionCounts] = {}
    thresholds = {}
    for entry in index:
        sample = by_key.get((entry["region"], entry["year"], entry["sample"]))
        if sample is None:
            raise FormatError(out / "predictions" / "index.json", "sample", f"unknown sample {entry}")
        mask = read_array(out / entry["file"], data.manifest.dims.output_shape)
        key = (entry["region"], entry["year"])
        c = confusion(mask, test.mask(sample))
        pooled[key] = c if key not in pooled else pooled[key] + c
        thresholds[key] = entry["threshold"]
    rows, scores = [], {}
    names = _region_names(data.manifest)
    for key in sorted(pooled):
        rep = metrics_report(pooled[key])
        rows.append(_report_row(key, thresholds[key], pooled[key], rep))
        scores[f"{names.get(key[0], key[0])}/{key[1]}"] = rep.csi
    overall = mean_defined(scores.values())
    total = sum(pooled.values(), start=ConfusionCounts())
    overall_row = {k: "" for k in REPORT_FIELDS}
    overall_row.update({"region": "overall", "year": "", "csi": _fmt(overall)})
    overall_row.update({"TP": total.tp, "FP": total.fp, "FN": total.fn, "TN": total.tn})
    rows.append(overall_row)
    _write_csv(out / REPORT_CSV, rows)
    atomic_write_bytes(out / REPORT_JSON, json.dumps(
        {"per_region_csi": scores, "overall_csi": overall,
         "thresholds": {f"{k[0]}_{k[1]}": v for k, v in thresholds.items()}}, indent=1).encode())
    figs = out / "figures"
    plotting.plot_region_scores(scores, overall, figs / "region_csi.png")
    logs = {name: rows_ for name in ("train", "distill")
            if (rows_ := _read_csv(out / f"{name}_log.csv"))}
    if logs:
        plotting.plot_training(logs, figs / "training.png")
    print(f"report: overall CSI {overall} over {len(scores)} region-years -> {out / REPORT_CSV}")
    return EXIT_OK


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded deterministic mode")
    common.add_argument("--out", help="output directory (dataset dir for datagen, run dir otherwise)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.max_epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rcnowcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--regions", type=int)
    p.add_argument("--years", help="comma-separated years, e.g. 2019,2020")
    p.add_argument("--events", type=int, help="events per (region, year)")
    for name, helptext in (
        ("train", "train the backbone"),
        ("distill", "self-distil the trained backbone"),
        ("finetune", "fit FiLM adapters for every (region, year)"),
        ("sweep", "threshold sweep on the validation split"),
        ("predict", "write rain masks for the test split"),
        ("report", "score predictions and render figures"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = PipelineConfig(load_config(args))
            if cfg.raw["deterministic"]:
                torch.manual_seed(cfg.seed)
            return COMMANDS[args.command](args, cfg)
        except (FormatError, FileNotFoundError) as exc:
            print(f"rcnowcast: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
    except (UsageError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rcnowcast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"rcnowcast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
