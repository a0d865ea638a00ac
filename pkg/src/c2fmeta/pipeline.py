"""Experiment configuration and the staged pipeline.

Stages, each reading its inputs from and writing its outputs to one run
directory:

    data    -> train.csv/json, val.csv/json, test.csv/json
    bde     -> bde.json/bin, bde_trace.json
    pseudo  -> pseudo.csv/json, c2f_report.json
    meta    -> meta.json/bin, meta_trace.json
    eval    -> eval_{k}shot.json

Every JSON artifact carries the config hash and master seed. A stage whose
outputs already exist with a matching hash is loaded instead of recomputed.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bde as bde_mod
from .c2f import load_pseudo, pixels_embed, pseudo_label, save_pseudo
from .data import (
    CoarseDataset,
    FineDataset,
    SynthSpec,
    generate_hierarchical,
    load_dataset,
    save_dataset,
    split_meta,
)
from .errors import C2FError, ConfigError, EmptyInput, InsufficientClasses
from .metrics import EvalReport, adjusted_rand_index
from .numerics import derive_seed
from .protonet import MetaTrainConfig, meta_eval, meta_train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# offsets added to the master seed for each stage
SEED_OFFSETS = {"data": 0, "bde": 1, "pseudo": 2, "meta": 3, "eval": 4}

DESK_SYNTH = dict(C=13, fine_per_coarse=4, samples_per_fine=40, D_in=32, coarse_spread=1.5,
                  fine_spread=1.2, noise_sigma=0.3, nuisance_dims=20, nuisance_sigma=0.8, fine_dims=4)
DESK_SPLITS = {"train": list(range(8)), "val": [8, 9], "test": [10, 11, 12]}
DESK_BDE = dict(epochs=60, lr_milestones=[36, 48])
DESK_AUGMENT = dict(noise_sigma=0.8)
DESK_META = dict(episodes_per_epoch=100, epochs=10, N=5, K=1, Q=15, lr=0.1)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    synth: dict = field(default_factory=lambda: dict(DESK_SYNTH))
    data_path: str | None = None
    splits: dict = field(default_factory=lambda: copy.deepcopy(DESK_SPLITS))
    bde: dict = field(default_factory=lambda: dict(DESK_BDE))
    augment: dict = field(default_factory=lambda: dict(DESK_AUGMENT))
    visual_on: bool = True
    semantic_on: bool = True
    # "bde" or "pixels"; coarse-direct is run through run_baseline_coarse_direct
    embedding: str = "bde"
    n_s: int | None = None
    meta: dict = field(default_factory=lambda: dict(DESK_META))
    eval_way: int = 5
    eval_shots: list = field(default_factory=lambda: [1, 5])
    eval_query: int = 15
    eval_episodes: int = 1000

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.embedding not in ("bde", "pixels"):
            raise ConfigError(f"embedding must be 'bde' or 'pixels', got {self.embedding!r}")
        if set(self.splits) != {"train", "val", "test"}:
            raise ConfigError("splits must define train, val and test coarse ids")
        if self.embedding == "bde" and not (self.visual_on or self.semantic_on):
            raise ConfigError("at least one of visual_on / semantic_on must be set")
        # surface bad nested values now rather than mid-run
        try:
            self.synth_spec().validate()
            self.train_config()
            self.augment_config()
            self.meta_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, SEED_OFFSETS[stage])

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**{**self.synth, "seed": self.stage_seed("data")})

    def train_config(self) -> bde_mod.TrainConfig:
        kw = dict(self.bde)
        if not self.visual_on:
            kw["m"] = 0.0
        if not self.semantic_on:
            kw["n"] = 0.0
        return bde_mod.TrainConfig(**{**kw, "seed": self.stage_seed("bde")})

    def augment_config(self) -> bde_mod.AugmentConfig:
        return bde_mod.AugmentConfig(**self.augment)

    def meta_config(self) -> MetaTrainConfig:
        return MetaTrainConfig(**{**self.meta, "seed": self.stage_seed("meta")})

    def variant(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


class StageError(C2FError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def compute_ns_from_validation(val: FineDataset) -> int:
    """Mean samples per fine class of the validation split, rounded half-up, at least 2."""
    if len(val) == 0:
        raise EmptyInput("validation split is empty")
    sizes = np.bincount(np.unique(val.labels, return_inverse=True)[1])
    return max(2, int(math.floor(sizes.mean() + 0.5)))


# --- helpers ---------------------------------------------------------------

def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stamped(path: Path, cfg: ExperimentConfig) -> bool:
    if not path.exists():
        return False
    try:
        return json.loads(path.read_text()).get("config_hash") == cfg.config_hash()
    except json.JSONDecodeError:
        return False


def _stamp(cfg: ExperimentConfig) -> dict:
    # "seed" is left to each artifact for its own stage seed
    return {"config_hash": cfg.config_hash(), "master_seed": cfg.seed}


def _stamp_manifest(path: Path, cfg: ExperimentConfig) -> None:
    _write_json(path, {**json.loads(path.read_text()), **_stamp(cfg)})


def _run_stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# --- stages ----------------------------------------------------------------

def stage_data(cfg: ExperimentConfig, run_dir: Path) -> tuple[CoarseDataset, FineDataset, FineDataset]:
    paths = [run_dir / f"{s}.csv" for s in ("train", "val", "test")]
    if all(_stamped(p.with_suffix(".json"), cfg) for p in paths):
        return tuple(load_dataset(p) for p in paths)
    if cfg.data_path:
        full = load_dataset(cfg.data_path)
        if not isinstance(full, CoarseDataset) or full.hidden_fine_labels() is None:
            raise ConfigError("data_path must point to a coarse dataset with fine labels for splitting")
    else:
        full = generate_hierarchical(cfg.synth_spec())
    splits = split_meta(full, cfg.splits["train"], cfg.splits["val"], cfg.splits["test"])
    for ds, p in zip(splits, paths):
        save_dataset(ds, p)
        _stamp_manifest(p.with_suffix(".json"), cfg)
    return splits


def stage_bde(cfg: ExperimentConfig, run_dir: Path, train: CoarseDataset) -> bde_mod.BdeParams:
    ckpt = run_dir / "bde"
    if _stamped(ckpt.with_suffix(".json"), cfg) and ckpt.with_suffix(".bin").exists():
        return bde_mod.load_bde(ckpt)
    tc = cfg.train_config()
    params, hist = bde_mod.train_bde(train, tc, cfg.augment_config())
    bde_mod.save_bde(ckpt, params,
                     {**_stamp(cfg), "epoch": tc.epochs, "seed": tc.seed, "train_config": asdict(tc)})
    _write_json(run_dir / "bde_trace.json", {**_stamp(cfg), **hist.to_dict()})
    return params


def stage_pseudo(cfg: ExperimentConfig, run_dir: Path, train: CoarseDataset, val: FineDataset,
                 params: bde_mod.BdeParams | None):
    path = run_dir / "pseudo.csv"
    report_path = run_dir / "c2f_report.json"
    if _stamped(report_path, cfg) and path.exists():
        return load_pseudo(path)
    n_s = cfg.n_s or compute_ns_from_validation(val)
    if cfg.embedding == "pixels":
        embed, emb_id = pixels_embed, "pixels"
    else:
        embed = lambda X: bde_mod.encode_batch(params.encoder, X)  # noqa: E731
        emb_id = f"bde@{cfg.config_hash()}"
    pd = pseudo_label(train, embed, n_s, seed=cfg.stage_seed("pseudo"), embedding_id=emb_id)
    save_pseudo(pd, path)
    _stamp_manifest(path.with_suffix(".json"), cfg)
    # scoring against hidden fine labels happens here, after pseudo-labels are fixed
    fine = train.hidden_fine_labels()
    ari = adjusted_rand_index(pd.pseudo, fine[pd.source_index]) if fine is not None and len(pd) >= 2 else None
    _write_json(report_path, {**_stamp(cfg), "N_s": n_s, "num_pseudo_classes": pd.num_pseudo_classes,
                              "dropped_count": pd.dropped_count, "embedding": emb_id, "ari": ari})
    return pd


def stage_meta(cfg: ExperimentConfig, run_dir: Path, source, tag: str = "meta") -> dict:
    ckpt = run_dir / tag
    if _stamped(ckpt.with_suffix(".json"), cfg) and ckpt.with_suffix(".bin").exists():
        return bde_mod.load_checkpoint(ckpt)[0]
    mc = cfg.meta_config()
    init = None
    if mc.warm_start:
        tensors, _ = bde_mod.load_checkpoint(mc.warm_start)
        init = {k: tensors[k] for k in bde_mod.ENCODER_KEYS}
    enc, hist = meta_train(source, mc, init)
    bde_mod.save_checkpoint(ckpt, {k: enc[k] for k in bde_mod.ENCODER_KEYS},
                            {**_stamp(cfg), "kind": "protonet", "seed": mc.seed, "meta_config": asdict(mc)})
    _write_json(run_dir / f"{tag}_trace.json", {**_stamp(cfg), **hist.to_dict()})
    return enc


def stage_eval(cfg: ExperimentConfig, run_dir: Path, enc: dict, test: FineDataset,
               prefix: str = "eval") -> dict[int, EvalReport]:
    reports = {}
    for k in cfg.eval_shots:
        rep = meta_eval(enc, test, cfg.eval_way, k, cfg.eval_query, cfg.eval_episodes, cfg.stage_seed("eval"))
        _write_json(run_dir / f"{prefix}_{k}shot.json", {**rep.to_dict(), **_stamp(cfg)})
        reports[k] = rep
    return reports


# --- orchestration ---------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, run_dir) -> dict[int, EvalReport]:
    """Data -> embedding -> C2F pseudo-labels -> ProtoNet -> evaluation."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    train, val, test = _run_stage("data", stage_data, cfg, run_dir)
    params = _run_stage("bde", stage_bde, cfg, run_dir, train) if cfg.embedding == "bde" else None
    pd = _run_stage("pseudo", stage_pseudo, cfg, run_dir, train, val, params)
    enc = _run_stage("meta", stage_meta, cfg, run_dir, pd)
    return _run_stage("eval", stage_eval, cfg, run_dir, enc, test)


def run_baseline_coarse_direct(cfg: ExperimentConfig, run_dir) -> dict[int, EvalReport]:
    """Meta-train directly on coarse classes (no pseudo-labelling), evaluate on fine test classes."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    train, _, test = _run_stage("data", stage_data, cfg, run_dir)
    mc = cfg.meta_config()
    if train.num_coarse_classes < mc.N:
        raise StageError("meta", InsufficientClasses(
            f"{mc.N}-way training needs {mc.N} coarse classes, only {train.num_coarse_classes}"))
    enc = _run_stage("meta", stage_meta, cfg, run_dir, train)
    return _run_stage("eval", stage_eval, cfg, run_dir, enc, test)


VARIANTS = ("bde", "pixels", "coarse_direct", "visual_only", "semantic_only")


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name == "bde":
        return cfg.variant(embedding="bde", visual_on=True, semantic_on=True)
    if name == "pixels":
        return cfg.variant(embedding="pixels")
    if name == "coarse_direct":
        return cfg.variant(embedding="pixels")
    if name == "visual_only":
        return cfg.variant(embedding="bde", visual_on=True, semantic_on=False)
    if name == "semantic_only":
        return cfg.variant(embedding="bde", visual_on=False, semantic_on=True)
    raise ConfigError(f"unknown variant {name!r}")


def run_variant(cfg: ExperimentConfig, name: str, run_dir) -> dict:
    vcfg = variant_config(cfg, name)
    run_dir = Path(run_dir)
    if name == "coarse_direct":
        reports = run_baseline_coarse_direct(vcfg, run_dir)
        ari = None
    else:
        reports = run_pipeline(vcfg, run_dir)
        ari = json.loads((run_dir / "c2f_report.json").read_text())["ari"]
    return {"variant": name, "seed": cfg.seed, "ari": ari,
            "reports": {str(k): r.to_dict() for k, r in reports.items()}}


def compare(cfg: ExperimentConfig, out_dir, seeds=(0,), variants=VARIANTS) -> dict:
    """Run the variant matrix for every master seed and aggregate per-variant means."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in seeds:
        scfg = cfg.variant(seed=int(s))
        for name in variants:
            log.info("seed %s variant %s", s, name)
            rows.append(run_variant(scfg, name, out_dir / f"seed{s}" / name))
    summary = {}
    for name in variants:
        mine = [r for r in rows if r["variant"] == name]
        entry = {"ari": None, "accuracy": {}, "ci95": {}}
        aris = [r["ari"] for r in mine if r["ari"] is not None]
        if aris:
            entry["ari"] = float(np.mean(aris))
        for k in cfg.eval_shots:
            entry["accuracy"][str(k)] = float(np.mean([r["reports"][str(k)]["mean_accuracy"] for r in mine]))
            entry["ci95"][str(k)] = float(np.mean([r["reports"][str(k)]["ci95"] for r in mine]))
        summary[name] = entry
    result = {"config_hash": cfg.config_hash(), "seeds": [int(s) for s in seeds], "runs": rows,
              "summary": summary}
    _write_json(out_dir / "compare.json", result)
    return result


LABELS = {
    "coarse_direct": "ProtoNet (inexact sup.)",
    "pixels": "C2F w/ Pixels-ProtoNet",
    "bde": "C2F w/ BDE-ProtoNet",
    "visual_only": "BDE visual dis. only",
    "semantic_only": "BDE semantic dis. only",
}


def render_tables(result: dict, shots=(1, 5), way: int = 5) -> str:
    summary = result["summary"]
    cols = [str(k) for k in shots]
    lines = []

    def table(title, names, with_ari=False):
        head = f"{'Method':<28}" + "".join(f"{k + '-shot':>18}" for k in cols)
        if with_ari:
            head += f"{'ARI':>8}"
        lines.extend([title, head, "-" * len(head)])
        for n in names:
            if n not in summary:
                continue
            e = summary[n]
            row = f"{LABELS[n]:<28}" + "".join(
                f"{100 * e['accuracy'][k]:>10.2f} ± {100 * e['ci95'][k]:<5.2f}" for k in cols)
            if with_ari:
                row += f"{e['ari']:>8.3f}" if e["ari"] is not None else f"{'-':>8}"
            lines.append(row)
        lines.append("")

    table(f"Average {way}-way accuracy (%) over seeds {result['seeds']}",
          ["coarse_direct", "pixels", "bde"], with_ari=True)
    table("Ablation of the BDE components", ["semantic_only", "visual_only", "bde"], with_ari=True)
    return "\n".join(lines)
