"""Experiment presets (few/zero-shot, ablations, hyperparameter grid), depth rendering and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .apg import PROMPT_MODES, Tokenizer
from .backbone import BackboneConfig
from .dataset import (FEW_SHOT_CLASSES, SCENE_TYPES, ZERO_SHOT_TEST_SCENES, DepthMap, SplitSpec,
                      load_manifest, load_sample, make_split, synthetic_pool)
from .errors import ConfigError, IoError, LlmMdeError, ReportError
from .metrics import HIGHER_IS_BETTER, METRIC_NAMES, MetricsReport, compute_metrics
from .model import LORA_SCHEMES, LlmMde, LoraSettings, ModelConfig
from .training import FULL_SCALE_LR0, TrainConfig, fit, write_history

log = logging.getLogger(__name__)

EXPERIMENTS = ("few_shot", "zero_shot", "ablation_prompts", "ablation_lora", "hparam_grid", "train", "eval")

# Hyperparameter sensitivity grid: LoRA alpha/rank for the vision
# encoder, rank for the text encoder, batch size and learning rate.
HPARAM_GRID = (
    {"scheme": 1, "alpha_vit": 120, "rank_vit": 60, "rank_llm": 32, "batch_size": 32, "lr": 2e-5},
    {"scheme": 2, "alpha_vit": 192, "rank_vit": 192, "rank_llm": 32, "batch_size": 32, "lr": 2e-5},
    {"scheme": 3, "alpha_vit": 192, "rank_vit": 96, "rank_llm": 32, "batch_size": 32, "lr": 2e-5},
    {"scheme": 4, "alpha_vit": 192, "rank_vit": 96, "rank_llm": 32, "batch_size": 32, "lr": 1e-4},
    {"scheme": 5, "alpha_vit": 192, "rank_vit": 96, "rank_llm": 32, "batch_size": 16, "lr": 2e-5},
    {"scheme": 6, "alpha_vit": 320, "rank_vit": 160, "rank_llm": 32, "batch_size": 32, "lr": 2e-5},
    {"scheme": 7, "alpha_vit": 192, "rank_vit": 96, "rank_llm": 16, "batch_size": 32, "lr": 2e-5},
    {"scheme": 8, "alpha_vit": 192, "rank_vit": 96, "rank_llm": 32, "batch_size": 48, "lr": 2e-5},
)
FULL_WIDTH = 768
FULL_BATCH = 16

PROMPT_ABLATION = (("LLM-MDE-A", "apg"), ("LLM-MDE-B", "fixed"), ("LLM-MDE-C", "none"))
LORA_ABLATION = (("scheme1", "frozen"), ("scheme2", "lora_vision"), ("scheme3", "lora_both"))


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat run configuration; every field can be set from a key=value file or a flag."""

    experiment: str = "train"
    seed: int = 0
    out: str = "runs"
    # data
    data_dir: str = ""
    synthetic: int = 6                 # samples per scene type when no data_dir
    synthetic_seed: int = 0
    depth_scale: float = 0.001
    resolution: int = 64
    dataset_name: str = ""             # defaults to "nyu" / "synthetic"
    split: str = "k_shot:4"            # used by train / eval
    per_class_cap: int = 50
    val_per_class: int = 1
    test_per_class: int = 2
    zero_shot_scene: str = "bedroom"
    # model
    d_m: int = 64
    D: int = 64
    V: int = 512
    vision_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    patch_size: int = 16
    dropout: float = 0.0                # 0.1 drowns patch detail in random frozen encoders
    n_prototypes: int = 32
    head_channels: tuple[int, ...] = (16, 8, 8, 4)
    d_min: float = 1e-3
    d_max: float = 10.0
    # optimisation (desk-scale lr; 1e-5 suits pretrained backbones only)
    batch_size: int = 4
    lr0: float = 1e-3
    lr_min_ratio: float = 0.01
    epochs: int = 50
    patience: int = 5
    weight_decay: float = 0.01
    max_steps: int = 0
    prompt_mode: str = "apg"
    lora_scheme: str = "lora_both"
    vision_rank: int = 8
    vision_alpha: float = 16.0
    text_rank: int = 8
    text_alpha: float = 8.0
    # evaluation / output
    metrics_cap: float = 10.0
    max_render: int = 8
    weights: str = ""
    runs: str = ""                     # comma-separated run names to keep
    device_free: bool = False

    # -- derived ----------------------------------------------------------

    @property
    def name(self) -> str:
        return self.dataset_name or ("nyu" if self.data_dir else "synthetic")

    def model_config(self) -> ModelConfig:
        b = BackboneConfig(d_m=self.d_m, D=self.D, V=self.V, vision_layers=self.vision_layers,
                           text_layers=self.text_layers, heads=self.heads, patch_size=self.patch_size,
                           dropout=self.dropout, image_size=self.resolution)
        return ModelConfig(backbone=b, n_prototypes=self.n_prototypes,
                           head_channels=tuple(self.head_channels), d_min=self.d_min, d_max=self.d_max)

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(batch_size=self.batch_size, lr0=self.lr0, lr_min_ratio=self.lr_min_ratio,
                    epochs=self.epochs, patience=self.patience, weight_decay=self.weight_decay,
                    max_steps=self.max_steps, prompt_mode=self.prompt_mode, dataset_name=self.name)
        base.update(overrides)
        return TrainConfig(**base)

    def lora_settings(self, **overrides) -> LoraSettings:
        base = dict(scheme=self.lora_scheme, vision_rank=self.vision_rank, vision_alpha=self.vision_alpha,
                    text_rank=self.text_rank, text_alpha=self.text_alpha)
        base.update(overrides)
        return LoraSettings(**base)

    def split_spec(self, protocol: str | None = None, **overrides) -> SplitSpec:
        protocol = protocol or self.split
        kind, _, arg = protocol.partition(":")
        kw = dict(seed=self.seed, per_class_cap=self.per_class_cap, val_per_class=self.val_per_class,
                  test_per_class=self.test_per_class)
        if kind == "k_shot":
            kw["k"] = int(arg or 4)
        elif kind == "zero_shot":
            kw["train_scene"] = arg or self.zero_shot_scene
        elif kind == "few_shot":
            kind = "few_shot_one_per_scene"
        kw.update(overrides)
        return SplitSpec(protocol=kind, **kw)

    def run_filter(self) -> set[str]:
        return {r.strip() for r in self.runs.split(",") if r.strip()}

    # -- (de)serialisation -------------------------------------------------

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(v, hints[k]) for k, v in d.items()})

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_dict({**self.as_dict(), **changes})


def _coerce(value, hint):
    if hint is bool:
        if isinstance(value, str):
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ConfigError(f"not a boolean: {value!r}")
            return low in ("1", "true", "yes", "on")
        return bool(value)
    if typing.get_origin(hint) is tuple:
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        return tuple(int(v) for v in value)
    try:
        return hint(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {value!r} as {hint.__name__}") from exc


def parse_config_file(path) -> dict[str, str]:
    """UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_config_file(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in cfg.as_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k} = {v}\n")


# ---------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    name: str
    tag: str
    experiment: str
    seed: int
    snapshot: dict
    history: list[dict]
    metrics: MetricsReport
    metadata: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def metrics_json(self) -> str:
        body = {"run": self.name, "tag": self.tag, "experiment": self.experiment, "seed": self.seed,
                "metrics": self.metrics.as_dict(), "metadata": self.metadata}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def as_dict(self) -> dict:
        return {"name": self.name, "tag": self.tag, "experiment": self.experiment, "seed": self.seed,
                "snapshot": self.snapshot, "history": self.history, "metrics": self.metrics.as_dict(),
                "metadata": self.metadata, "wall_time": self.wall_time}


# ---------------------------------------------------------------------------
# rendering and reports


def render_depth_image(depth, path, valid_mask=None) -> Path:
    """Min-max normalise valid depths to an 8-bit grayscale PNG; invalid pixels are black."""
    if isinstance(depth, DepthMap):
        valid_mask = depth.valid_mask if valid_mask is None else valid_mask
        depth = depth.depth
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    img = np.zeros(depth.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = depth[valid].min(), depth[valid].max()
        if hi > lo:
            img[valid] = np.rint((depth[valid] - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img[valid] = 128
    path = Path(path)
    try:
        Image.fromarray(img, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _best_flags(records: list[RunRecord]) -> list[list[str]]:
    flags = [[] for _ in records]
    for m in METRIC_NAMES:
        values = [getattr(r.metrics, m) for r in records]
        best = int(np.argmax(values) if m in HIGHER_IS_BETTER else np.argmin(values))
        flags[best].append(m)
    return flags


def write_report(records: list[RunRecord], out_dir) -> tuple[Path, Path]:
    """``summary.csv`` (one row per run, best run per metric flagged) and ``report.json``."""
    if not records:
        raise ReportError("no run records to report")
    out_dir = Path(out_dir)
    flags = _best_flags(records)
    summary, report = out_dir / "summary.csv", out_dir / "report.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(summary, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["run", "tag", "experiment", "seed", "prompt_mode", "lora_scheme",
                             *METRIC_NAMES, "n_valid", "best_for"])
            for rec, best in zip(records, flags):
                writer.writerow([rec.name, rec.tag, rec.experiment, rec.seed,
                                 rec.metadata.get("prompt_mode", ""), rec.metadata.get("lora_scheme", ""),
                                 *rec.metrics.csv_row(), ";".join(best)])
        body = [dict(r.as_dict(), best_for=b) for r, b in zip(records, flags)]
        report.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report to {out_dir}: {exc}") from exc
    return summary, report


# ---------------------------------------------------------------------------
# experiment plans


@dataclass
class RunPlan:
    name: str
    tag: str
    split: SplitSpec
    train: TrainConfig
    lora: LoraSettings
    metadata: dict = field(default_factory=dict)
    eval_scenes: tuple[str, ...] = ()     # zero-shot: one record per scene


def desk_lora_row(row: dict, cfg: ExperimentConfig) -> dict:
    """Map a full-scale grid row to desk dimensions keeping alpha/rank, batch and lr ratios."""
    def rank(r, width):
        return max(1, round(r * width / FULL_WIDTH))

    rv, rt = rank(row["rank_vit"], cfg.d_m), rank(row["rank_llm"], cfg.D)
    return {
        "vision_rank": rv,
        "vision_alpha": row["alpha_vit"] * rv / row["rank_vit"],
        "text_rank": rt,
        "text_alpha": float(rt),   # the grid never lists a text-encoder alpha; alpha = rank
        "batch_size": max(1, round(row["batch_size"] * cfg.batch_size / FULL_BATCH)),
        "lr0": row["lr"] * cfg.lr0 / FULL_SCALE_LR0,
    }


def plan_runs(cfg: ExperimentConfig, scenes: set[str]) -> list[RunPlan]:
    exp = cfg.experiment
    base_meta = {"prompt_mode": cfg.prompt_mode, "lora_scheme": cfg.lora_scheme}
    if exp in ("train", "eval"):
        return [RunPlan(exp, exp, cfg.split_spec(), cfg.train_config(), cfg.lora_settings(), dict(base_meta))]
    if exp == "few_shot":
        plans = [RunPlan(f"{k}-shot", f"{k}-shot", cfg.split_spec(f"k_shot:{k}"), cfg.train_config(),
                         cfg.lora_settings(), dict(base_meta, classes=list(FEW_SHOT_CLASSES[:k])))
                 for k in range(1, 5)]
        plans.append(RunPlan("few-shot", "few-shot", cfg.split_spec("few_shot"), cfg.train_config(),
                             cfg.lora_settings(), dict(base_meta, classes="one per scene type")))
        return plans
    if exp == "zero_shot":
        test = tuple(s for s in ZERO_SHOT_TEST_SCENES if s != cfg.zero_shot_scene and s in scenes)
        return [RunPlan("zero_shot", "zero_shot", cfg.split_spec(f"zero_shot:{cfg.zero_shot_scene}"),
                        cfg.train_config(), cfg.lora_settings(),
                        dict(base_meta, train_scene=cfg.zero_shot_scene), eval_scenes=test)]
    if exp == "ablation_prompts":
        return [RunPlan(tag, tag, cfg.split_spec(), cfg.train_config(prompt_mode=mode), cfg.lora_settings(),
                        dict(base_meta, prompt_mode=mode)) for tag, mode in PROMPT_ABLATION]
    if exp == "ablation_lora":
        return [RunPlan(tag, tag, cfg.split_spec(), cfg.train_config(), cfg.lora_settings(scheme=scheme),
                        dict(base_meta, lora_scheme=scheme)) for tag, scheme in LORA_ABLATION]
    if exp == "hparam_grid":
        plans = []
        for row in HPARAM_GRID:
            desk = desk_lora_row(row, cfg)
            tag = f"scheme{row['scheme']}"
            plans.append(RunPlan(
                tag, tag, cfg.split_spec(),
                cfg.train_config(batch_size=desk["batch_size"], lr0=desk["lr0"]),
                cfg.lora_settings(scheme="lora_both", vision_rank=desk["vision_rank"],
                                  vision_alpha=desk["vision_alpha"], text_rank=desk["text_rank"],
                                  text_alpha=desk["text_alpha"]),
                dict(base_meta, lora_scheme="lora_both", grid_row=dict(row), desk=desk,
                     text_alpha_note="not listed in the grid; held at alpha = rank")))
        return plans
    raise ConfigError(f"unknown experiment {exp!r}; choose from {EXPERIMENTS}")


# ---------------------------------------------------------------------------
# running


def validate(cfg: ExperimentConfig) -> None:
    """Reject inconsistent configurations before any data is built or training starts."""
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}; choose from {EXPERIMENTS}")
    if cfg.prompt_mode not in PROMPT_MODES:
        raise ConfigError(f"prompt_mode {cfg.prompt_mode!r} not in {PROMPT_MODES}")
    if cfg.lora_scheme not in LORA_SCHEMES:
        raise ConfigError(f"lora_scheme {cfg.lora_scheme!r} not in {LORA_SCHEMES}")
    if cfg.experiment == "eval" and not cfg.weights:
        raise ConfigError("eval needs weights=<path>")
    if cfg.weights and not Path(cfg.weights).is_file():
        raise ConfigError(f"weights file {cfg.weights} not found")
    if not cfg.data_dir and cfg.synthetic < 1:
        raise ConfigError("need data_dir or synthetic >= 1")
    if cfg.data_dir and not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data_dir {cfg.data_dir} is not a directory")
    if cfg.max_render < 0:
        raise ConfigError("max_render must be >= 0")
    try:
        model_cfg = cfg.model_config()
        model_cfg.head  # grid / channel checks
        cfg.train_config()
        cfg.split_spec()
        for rank, width in ((cfg.vision_rank, cfg.d_m), (cfg.text_rank, cfg.D)):
            if not 1 <= rank <= width / 2:
                raise ConfigError(f"LoRA rank {rank} outside 1..{width // 2}")
    except LlmMdeError as exc:
        raise ConfigError(str(exc)) from exc
    valid_runs = {p.name for p in plan_runs(cfg, set(SCENE_TYPES))}
    if cfg.experiment == "zero_shot":
        valid_runs |= {f"zero_shot-{s}" for s in ZERO_SHOT_TEST_SCENES}
    bad = cfg.run_filter() - valid_runs
    if bad:
        raise ConfigError(f"unknown run names {sorted(bad)}; available {sorted(valid_runs)}")


def load_pool(cfg: ExperimentConfig) -> list:
    if cfg.data_dir:
        manifest = load_manifest(cfg.data_dir, cfg.depth_scale)
        return [load_sample(manifest, i, cfg.resolution, cfg.patch_size) for i in range(len(manifest))]
    return synthetic_pool(cfg.synthetic, cfg.synthetic_seed, cfg.resolution, SCENE_TYPES, cfg.patch_size)


def set_determinism(device_free: bool) -> None:
    if device_free:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _evaluate(model, samples, cfg: ExperimentConfig, mode: str, tokenizer) -> tuple[MetricsReport, np.ndarray]:
    preds = []
    for start in range(0, len(samples), cfg.batch_size):
        preds.append(model.predict(samples[start:start + cfg.batch_size], tokenizer, cfg.name, mode))
    pred = np.concatenate(preds)
    gt = np.stack([s.depth.depth for s in samples])
    mask = np.stack([s.depth.valid_mask for s in samples])
    return compute_metrics(pred, gt, mask, cap=cfg.metrics_cap), pred


def _render(preds: np.ndarray, run_dir: Path, limit: int) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(preds[:limit]):
        render_depth_image(p, run_dir / f"depth_{i}.png")


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    validate(cfg)
    set_determinism(cfg.device_free)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = load_pool(cfg)
    plans = plan_runs(cfg, {s.scene_label for s in pool})
    wanted = cfg.run_filter()
    tokenizer = Tokenizer.build(cfg.V, extra_words=(cfg.name,))
    records = []
    for plan in plans:
        names = [f"{plan.name}-{s}" for s in plan.eval_scenes] if plan.eval_scenes else [plan.name]
        if wanted and not wanted & ({plan.name} | set(names)):
            continue
        t0 = time.perf_counter()
        train, val, test = make_split(pool, plan.split)
        model = LlmMde(cfg.model_config(), seed=cfg.seed)
        if cfg.weights:
            model.load(cfg.weights)
        elif plan.lora.scheme != "frozen":
            model.apply_lora(plan.lora, seed=cfg.seed)
        history = []
        if cfg.experiment != "eval":
            log.info("run %s: %d train / %d val / %d test", plan.name, len(train), len(val), len(test))
            model, history = fit(model, train, val, plan.train, seed=cfg.seed, tokenizer=tokenizer)
            write_history(history, out / f"history_{plan.name}.csv")
        if cfg.experiment == "train":
            model.save(out / "model.lmde")
        groups = ([(n, [s for s in test if s.scene_label == scene]) for n, scene in zip(names, plan.eval_scenes)]
                  if plan.eval_scenes else [(plan.name, test)])
        for name, samples in groups:
            if wanted and name not in wanted and plan.name not in wanted:
                continue
            metrics, preds = _evaluate(model, samples, cfg, plan.train.prompt_mode, tokenizer)
            _render(preds, out / name, cfg.max_render)
            meta = dict(plan.metadata, n_train=len(train), n_val=len(val), n_test=len(samples),
                        epochs_run=len(history))
            if plan.eval_scenes:
                meta["test_scene"] = name.split("-", 1)[1]
            rec = RunRecord(name=name, tag=plan.tag, experiment=cfg.experiment, seed=cfg.seed,
                            snapshot=cfg.replace(runs=name).as_dict(), history=history, metrics=metrics,
                            metadata=meta, wall_time=time.perf_counter() - t0)
            (out / f"metrics_{name}.json").write_text(rec.metrics_json(), encoding="utf-8")
            records.append(rec)
    if records:
        write_report(records, out)
    return records
