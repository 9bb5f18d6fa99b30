"""End-to-end benchmark: train per-task adapters, merge them every way, score."""

from __future__ import annotations

import csv
import io
import logging
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from ..adapters import CLASSIFICATION, AdapterSet, MergeCoefficients, save_adapter_set
from ..config import ConfigError, as_list, read_kv
from ..mergers import MergeSpec, grid_search_scale, merge_adapter_sets
from ..nsc import NscConfig, optimize, prepare_gram_caches
from ..nullspace import RatioReport, mean_null_ratio
from ..toynet import BaseModel, ToyModelConfig, forward, save_base_model, train_lora
from .metrics import EvalResult, average_normalized, evaluate, mean_loss, metric_for, results_csv
from .pretrain import pretrain_base_model
from .tasks import SyntheticTask, gen_tasks

logger = logging.getLogger(__name__)

ALL_METHODS = ("ta", "ties", "dare-ties", "svd", "linear", "knots-ties", "adamerging", "nsc")
LEARNING_FREE = ("ta", "ties", "dare-ties", "svd", "linear", "knots-ties")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    classification_tasks: int = 3
    regression_tasks: int = 1
    methods: tuple[str, ...] = ALL_METHODS
    train_size: int = 2048
    val_size: int = 512
    test_size: int = 512
    num_classes: int = 4
    regression_dim: int = 2
    blocks: int = 4
    model_dim: int = 32
    heads: int = 2
    mlp_dim: int = 64
    seq_len: int = 8
    vocab: int = 16
    lora_rank: int = 4
    pretrain_steps: int = 2000
    pretrain_tasks: int = 8
    epochs: int = 30
    train_lr: float = 1e-3
    train_batch_size: int = 32
    # empty means grid search; a number fixes the scale of learning-free methods
    merge_scale: str = ""
    ties_keep_fraction: float = 0.2
    dare_drop_prob: float = 0.9
    svd_rank: int = 0
    steps: int = 100
    lr: float = 1e-3
    lambda_init: float = 0.4
    batch_size: int = 32
    target_blocks: str = "last-quarter"
    target_proj: str = "o"

    def __post_init__(self):
        methods = tuple(m.replace("_", "-") for m in self.methods)
        unknown = [m for m in methods if m not in ALL_METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(ALL_METHODS)}")
        object.__setattr__(self, "methods", methods)
        if self.merge_scale:
            float(self.merge_scale)

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown experiment option {key!r}")
            t = types[key]
            try:
                if key == "methods":
                    args[key] = tuple(as_list(raw))
                elif t == "int":
                    args[key] = int(raw)
                elif t == "float":
                    args[key] = float(raw)
                else:
                    args[key] = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**args)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(read_kv(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    def model_config(self) -> ToyModelConfig:
        return ToyModelConfig(
            blocks=self.blocks,
            model_dim=self.model_dim,
            heads=self.heads,
            mlp_dim=self.mlp_dim,
            seq_len=self.seq_len,
            vocab=self.vocab,
            lora_rank=self.lora_rank,
        )

    def base_model(self) -> BaseModel:
        return pretrain_base_model(self.model_config(), self.seed, self.pretrain_steps, self.pretrain_tasks)

    def nsc_config(self) -> NscConfig:
        return NscConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.lr,
            lambda_init=self.lambda_init,
            target_blocks=self.target_blocks,
            target_proj=self.target_proj,
            seed=self.seed,
        )

    def merge_spec(self, method: str) -> MergeSpec:
        return MergeSpec(
            method=method,
            ties_keep_fraction=self.ties_keep_fraction,
            dare_drop_prob=self.dare_drop_prob,
            svd_rank=self.svd_rank or None,
            seed=self.seed,
        )

    def make_tasks(self) -> list[SyntheticTask]:
        return gen_tasks(
            self.classification_tasks,
            self.regression_tasks,
            self.seed,
            vocab=self.vocab,
            seq_len=self.seq_len,
            sizes=(self.train_size, self.val_size, self.test_size),
            num_classes=self.num_classes,
            out_dim=self.regression_dim,
        )


@dataclass
class MethodOutcome:
    """One merge method's merged model and scores."""

    sets: list[AdapterSet]
    coefficients: MergeCoefficients
    results: list[EvalResult]
    grid: list[tuple[float, float]] = field(default_factory=list)
    trajectory: list[float] | None = None
    trajectory_csv: str | None = None


@dataclass
class SuiteResult:
    config: ExperimentConfig
    model: BaseModel
    tasks: list[SyntheticTask]
    adapters: list[AdapterSet]
    histories: dict[str, list]
    finetuned: list[EvalResult]
    outcomes: dict[str, MethodOutcome] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def references(self) -> dict[str, float]:
        return {r.task_id: r.score for r in self.finetuned}

    def scores(self) -> dict[str, list[EvalResult]]:
        return {m: o.results for m, o in self.outcomes.items()}


def _heads(sets) -> dict[str, object]:
    return {s.task_id: s.head for s in sets}


def _train_all(cfg: ExperimentConfig, model: BaseModel, tasks):
    adapters, histories = [], {}
    for k, task in enumerate(tasks):
        logger.info("fine-tuning %s", task.task_id)
        s, hist = train_lora(
            model, task, cfg.epochs, seed=cfg.seed * 7 + k, lr=cfg.train_lr, batch_size=cfg.train_batch_size
        )
        adapters.append(s)
        histories[task.task_id] = hist
    return adapters, histories


def _finetuned(model, adapters, tasks):
    rows = []
    for s, task in zip(adapters, tasks):
        coeffs = MergeCoefficients.constant([s.task_id], model.config.layer_ids, 1.0)
        rows.extend(evaluate(model, [s], coeffs, [task], {s.task_id: s.head}))
    return [replace(r, reference=r.score, normalized=100.0) for r in rows]


def _learning_free(cfg, model, adapters, tasks, refs, method) -> MethodOutcome:
    # every baseline is homogeneous in its scale, so merge once at 1 and rescale
    unit = merge_adapter_sets(adapters, cfg.merge_spec(method))
    heads = _heads(adapters)
    layers = model.config.layer_ids

    def coeffs_at(s: float) -> MergeCoefficients:
        return MergeCoefficients.constant(["merged"], layers, s)

    grid: list[tuple[float, float]] = []
    if cfg.merge_scale:
        scale = float(cfg.merge_scale)
    else:

        def val_loss(s: float) -> float:
            return mean_loss(evaluate(model, [unit], coeffs_at(s), tasks, heads, split="val"))

        scale, grid = grid_search_scale(val_loss)
    results = evaluate(model, [unit], coeffs_at(scale), tasks, heads, references=refs)
    return MethodOutcome([unit], coeffs_at(scale), results, grid)


def _learned(cfg, model, adapters, tasks, refs, objective: str) -> MethodOutcome:
    pools = {t.task_id: t.splits["val"][0] for t in tasks}
    res = optimize(model, adapters, pools, cfg.nsc_config(), objective=objective)
    results = evaluate(model, adapters, res.coefficients, tasks, _heads(adapters), refs)
    return MethodOutcome(
        list(adapters), res.coefficients, results, trajectory=res.trajectory, trajectory_csv=res.trajectory_csv()
    )


def run_suite(cfg: ExperimentConfig, adapters: list[AdapterSet] | None = None) -> SuiteResult:
    """Run the full pipeline in memory; per-method failures are recorded, not raised."""
    tasks = cfg.make_tasks()
    model = cfg.base_model()
    histories: dict[str, list] = {}
    if adapters is None:
        adapters, histories = _train_all(cfg, model, tasks)
    finetuned = _finetuned(model, adapters, tasks)
    suite = SuiteResult(cfg, model, tasks, adapters, histories, finetuned)
    for method in cfg.methods:
        logger.info("merging with %s", method)
        if method == "adamerging" and any(t.kind != CLASSIFICATION for t in tasks):
            reg = ", ".join(t.task_id for t in tasks if t.kind != CLASSIFICATION)
            suite.notes.append(f"adamerging excluded: entropy objective is undefined for regression tasks ({reg})")
            continue
        try:
            if method in LEARNING_FREE:
                suite.outcomes[method] = _learning_free(cfg, model, adapters, tasks, suite.references, method)
            else:
                suite.outcomes[method] = _learned(cfg, model, adapters, tasks, suite.references, "nsc" if method == "nsc" else "entropy")
        except Exception as exc:  # noqa: BLE001 - one failing method must not sink the report
            logger.warning("%s failed: %s", method, exc)
            suite.errors[method] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return suite


def ratio_report(model: BaseModel, sets, coeffs, adapter: AdapterSet, tokens) -> RatioReport:
    """Null-space ratios of ``adapter`` at every LoRA layer, measured on the model ``sets``/``coeffs``."""
    layers = model.config.layer_ids
    _, trace = forward(model, sets, coeffs, tokens)
    contexts = prepare_gram_caches([adapter], layers)
    return mean_null_ratio(trace.inputs, {l: contexts[(adapter.task_id, l)] for l in layers}, layers)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _num(x) -> str:
    # shortest round-trip text; empty when undefined
    return "" if x is None else repr(float(x))


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "val_metric", "mean_omega"])
    for r in history:
        w.writerow([r.epoch] + [_num(x) for x in (r.train_loss, r.val_loss, r.metric, r.mean_omega)])
    return buf.getvalue()


def method_csv(results: list[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "metric", "direction", "score", "reference", "normalized", "loss"])
    for r in results:
        w.writerow([r.task_id, r.metric, r.direction] + [_num(x) for x in (r.score, r.reference, r.normalized, r.loss)])
    return buf.getvalue()


def grid_csv(grid) -> str:
    return "scale,val_loss\n" + "".join(f"{_num(s)},{_num(v)}\n" for s, v in grid)


def write_report(suite: SuiteResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", suite.config.to_text())
    rows = {"finetuned": suite.finetuned}
    rows.update(suite.scores())
    _write(out / "summary.csv", results_csv(rows, "normalized"))
    _write(out / "raw_scores.csv", results_csv(rows, "score"))
    _write(out / "finetuned.csv", method_csv(suite.finetuned))

    tasks_csv = ["task_id,kind,metric,direction,seed"]
    for t in suite.tasks:
        name, direction = metric_for(t.kind)
        tasks_csv.append(f"{t.task_id},{t.kind},{name},{direction},{t.seed}")
    _write(out / "tasks.csv", "\n".join(tasks_csv) + "\n")

    save_base_model(suite.model, out / "base")
    for s in suite.adapters:
        save_adapter_set(s, out / "adapters" / s.task_id)
    for task_id, hist in suite.histories.items():
        _write(out / "training" / f"{task_id}.csv", history_csv(hist))

    layers = suite.model.config.layer_ids
    for s, task in zip(suite.adapters, suite.tasks):
        own = MergeCoefficients.constant([s.task_id], layers, 1.0)
        rep = ratio_report(suite.model, [s], own, s, task.splits["test"][0])
        _write(out / "ratios" / f"finetuned_{s.task_id}.csv", rep.to_csv())

    for method, oc in suite.outcomes.items():
        mdir = out / "methods" / method
        _write(mdir / "scores.csv", method_csv(oc.results))
        _write(mdir / "coefficients.txt", oc.coefficients.to_text())
        if oc.grid:
            _write(mdir / "grid.csv", grid_csv(oc.grid))
        if oc.trajectory_csv is not None:
            _write(mdir / "trajectory.csv", oc.trajectory_csv)
        for s, task in zip(suite.adapters, suite.tasks):
            rep = ratio_report(suite.model, oc.sets, oc.coefficients, s, task.splits["test"][0])
            _write(mdir / "ratios" / f"{s.task_id}.csv", rep.to_csv())
    for method, err in suite.errors.items():
        _write(out / "methods" / method / "error.txt", err + "\n")

    notes = list(suite.notes) + [f"{m} failed: {e.splitlines()[-1]}" for m, e in suite.errors.items()]
    _write(out / "notes.txt", "".join(n + "\n" for n in notes))
    return out


def run_experiment(config_path, out_dir, seed: int | None = None) -> Path:
    cfg = ExperimentConfig.from_file(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    suite = run_suite(cfg)
    for line in suite.notes:
        logger.warning(line)
    return write_report(suite, out_dir)


def average_by_method(suite: SuiteResult) -> dict[str, float | None]:
    return {m: average_normalized(r) for m, r in suite.scores().items()}
