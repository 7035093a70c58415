"""Training loop, evaluation driver, and the full-model gradient checker.

Everything here is deterministic for a fixed (seed, config, fixture): data
order, parameter init, and the optimizer trajectory, so two runs produce
bit-identical checkpoints and reports. Checkpoints reuse the fixture
manifest format for weights, with scalar optimizer state in a JSON sidecar.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import plots
from .config import RunConfig
from .data import (
    Batch,
    Instance,
    Split,
    assemble_batch,
    load_annotations,
)
from .fixtures import EmbeddingFixture, load_arrays, load_fixture, save_arrays
from .hierarchy import AttributeHierarchy
from .losses import total_loss
from .metrics import ScoreReport, grouped_report
from .model import (
    ForwardOutputs,
    ModelDims,
    ModelParameters,
    forward,
    init_parameters,
    prepare_batch,
)
from .optim import AdamW
from .zrse import enhance, retrieval_scores


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, cause: Exception):
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {cause}")


class CheckpointError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass
class LoadedDataset:
    fixture: EmbeddingFixture
    hierarchy: AttributeHierarchy
    split: Split
    train_instances: list[Instance]
    train_labels: np.ndarray
    eval_instances: list[Instance]
    eval_labels: np.ndarray


def load_dataset(cfg: RunConfig) -> LoadedDataset:
    hierarchy = AttributeHierarchy.load(cfg.paths.hierarchy)
    fixture = load_fixture(cfg.paths.fixture)
    split = Split.load(cfg.paths.split, hierarchy)
    train_instances, train_labels = load_annotations(cfg.paths.annotations, hierarchy)
    if cfg.paths.eval_annotations:
        eval_instances, eval_labels = load_annotations(cfg.paths.eval_annotations, hierarchy)
    else:
        eval_instances, eval_labels = [], np.zeros((0, hierarchy.n_attrs), dtype=np.int8)
    return LoadedDataset(
        fixture=fixture,
        hierarchy=hierarchy,
        split=split,
        train_instances=train_instances,
        train_labels=train_labels,
        eval_instances=eval_instances,
        eval_labels=eval_labels,
    )


def build_model(cfg: RunConfig, fixture: EmbeddingFixture) -> ModelParameters:
    dims = ModelDims(d=cfg.dims.d, d_ff=cfg.dims.d_ff, n_heads=cfg.dims.n_heads)
    return init_parameters(
        dims, d_q=fixture.dims.d_q, d_v=fixture.dims.d_v, seed=cfg.seed,
        n_blocks=cfg.dims.n_blocks,
    )


def _loss_for_batch(
    batch: Batch,
    ds: LoadedDataset,
    params: ModelParameters,
    cfg: RunConfig,
    base_labels: np.ndarray,
):
    prepared = prepare_batch(
        batch, ds.fixture, ds.hierarchy,
        query_mode=cfg.toggles.query_mode, pool_mode=cfg.toggles.pool_mode,
    )
    out = forward(
        prepared, ds.fixture, ds.hierarchy, params,
        query_mode=cfg.toggles.query_mode, multi_context=cfg.toggles.md,
    )
    loss_cfg = cfg.loss if cfg.toggles.scr else _with_lambda(cfg.loss, 0.0)
    return total_loss(
        out.context_logits, base_labels, out.q_bar,
        prepared.scr_targets, prepared.scr_active, params.scr_head, loss_cfg,
    )


def _with_lambda(loss_cfg, lam: float):
    from .losses import LossConfig

    return LossConfig(
        gamma_pos=loss_cfg.gamma_pos, gamma_neg=loss_cfg.gamma_neg,
        clip=loss_cfg.clip, scr_weight=lam,
    )


def train(cfg: RunConfig, out_dir: Path | str) -> tuple[Path, ModelParameters]:
    """Run the configured training and write checkpoint + log + figures.

    Returns the checkpoint directory and the trained parameters.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    if not ds.train_instances:
        raise EvaluationError("training set is empty")
    params = build_model(cfg, ds.fixture)
    opt = AdamW(
        params.parameters(),
        lr=cfg.optimizer.lr,
        weight_decay=cfg.optimizer.weight_decay,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x73687566]))
    base_labels_all = ds.split.mask_to_base(ds.train_labels)

    n = len(ds.train_instances)
    log_records: list[dict] = []
    log_path = out_dir / "training_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.lr_at_epoch(epoch)
            order = shuffle_rng.permutation(n)
            sums = {"loss_total": 0.0, "loss_asym": 0.0, "loss_scr": 0.0}
            steps = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = assemble_batch(
                    [ds.train_instances[i] for i in idx], ds.train_labels[idx],
                    ds.fixture, ds.hierarchy,
                )
                try:
                    loss, parts = _loss_for_batch(batch, ds, params, cfg, base_labels_all[idx])
                    opt.zero_grad()
                    nm.backward(loss)
                except nm.NonFiniteError as exc:
                    raise TrainingDivergedError(epoch, steps, exc) from exc
                opt.step()
                for k in sums:
                    sums[k] += parts[k]
                steps += 1
            record = {"epoch": epoch, "lr": opt.lr}
            record.update({k: sums[k] / steps for k in sums})
            log_fh.write(json.dumps(record) + "\n")
            log_records.append(record)

    checkpoint_dir = out_dir / "checkpoint"
    save_checkpoint(params, cfg, opt, checkpoint_dir)
    plots.save_training_curves(log_records, out_dir / "training_loss.png")
    return checkpoint_dir, params


def save_checkpoint(
    params: ModelParameters, cfg: RunConfig, opt: AdamW | None, path: Path | str
) -> None:
    arrays = {f"param/{name}": p.data for name, p in params.named_parameters().items()}
    meta = {
        "d": params.dims.d,
        "d_ff": params.dims.d_ff,
        "n_heads": params.dims.n_heads,
        "d_q": params.d_q,
        "d_v": params.d_v,
        "n_blocks": len(params.contexts["crop"].blocks),
        "query_mode": cfg.toggles.query_mode,
    }
    save_arrays(path, arrays, metadata=meta)
    state = opt.state_summary() if opt is not None else {}
    (Path(path) / "optimizer_state.json").write_text(json.dumps(state, indent=1))


def load_checkpoint(path: Path | str, cfg: RunConfig, fixture: EmbeddingFixture) -> ModelParameters:
    arrays, manifest = load_arrays(path)
    meta = manifest.get("metadata", {})
    for key, want in (
        ("d", cfg.dims.d), ("d_ff", cfg.dims.d_ff), ("n_heads", cfg.dims.n_heads),
        ("n_blocks", cfg.dims.n_blocks),
        ("d_q", fixture.dims.d_q), ("d_v", fixture.dims.d_v),
    ):
        if key in meta and int(meta[key]) != int(want):
            raise CheckpointError(f"checkpoint {key}={meta[key]} incompatible with configured {want}")
    params = build_model(cfg, fixture)
    for name, p in params.named_parameters().items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        arr = arrays[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != expected {p.data.shape}"
            )
        p.data[...] = arr
    return params


def _eval_forward(
    ds: LoadedDataset, params: ModelParameters, cfg: RunConfig, batch_size: int = 64
) -> np.ndarray:
    """Deterministic batched forward over the eval set; returns c_bar [N, N_a]."""
    rows = []
    for start in range(0, len(ds.eval_instances), batch_size):
        chunk = ds.eval_instances[start:start + batch_size]
        batch = assemble_batch(
            chunk, ds.eval_labels[start:start + batch_size], ds.fixture, ds.hierarchy
        )
        prepared = prepare_batch(
            batch, ds.fixture, ds.hierarchy,
            query_mode=cfg.toggles.query_mode, pool_mode=cfg.toggles.pool_mode,
        )
        out = forward(
            prepared, ds.fixture, ds.hierarchy, params,
            query_mode=cfg.toggles.query_mode, multi_context=cfg.toggles.md,
        )
        rows.append(out.c_bar.data)
    return np.concatenate(rows, axis=0)


def predict_scores(ds: LoadedDataset, params: ModelParameters, cfg: RunConfig) -> np.ndarray:
    """Final prediction scores for the eval set, honoring the zrse toggle."""
    c_bar = _eval_forward(ds, params, cfg)
    if not cfg.toggles.zrse:
        return 1.0 / (1.0 + np.exp(-c_bar))
    eligible = ds.split.novel if cfg.toggles.zrse_novel_only else None
    scores = np.empty_like(c_bar)
    for i, inst in enumerate(ds.eval_instances):
        r = retrieval_scores(ds.fixture.attr_text_emb, ds.fixture.z_hat[inst.instance_id])
        scores[i] = enhance(c_bar[i], r, cfg.toggles.zrse_topk, eligible=eligible)
    return scores


def evaluate(
    cfg: RunConfig,
    checkpoint_dir: Path | str,
    out_dir: Path | str,
    params: ModelParameters | None = None,
) -> ScoreReport:
    """Score the eval set and write report.json / summary.csv / figures."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    if not ds.eval_instances:
        raise EvaluationError("evaluation set is empty")
    if params is None:
        params = load_checkpoint(checkpoint_dir, cfg, ds.fixture)
    scores = predict_scores(ds, params, cfg)
    report = grouped_report(scores, ds.eval_labels, ds.split, cfg.metrics.thresholds())
    report.save_json(out_dir / "report.json")
    report.save_csv(out_dir / "summary.csv")
    plots.save_ap_figures(report, out_dir / "figures", novel_indices=ds.split.novel)
    return report


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]
    tolerance: float
    runtime_s: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def to_json_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "worst_param": self.worst_param,
            "tolerance": self.tolerance,
            "runtime_s": self.runtime_s,
            "per_param": self.per_param,
        }


def gradcheck(
    cfg: RunConfig,
    ds: LoadedDataset | None = None,
    n_instances: int = 2,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradcheckReport:
    """Compare analytic gradients of the total loss against central
    differences for every parameter entry.

    Only tiny configurations are accepted (d <= 16 and N_a <= 8); anything
    larger would make the elementwise sweep pointless to wait for.
    """
    cfg.validate()
    if ds is None:
        ds = load_dataset(cfg)
    if cfg.dims.d > 16:
        raise ValueError(f"gradcheck requires d <= 16, got {cfg.dims.d}")
    if ds.hierarchy.n_attrs > 8:
        raise ValueError(f"gradcheck requires N_a <= 8, got {ds.hierarchy.n_attrs}")
    start = time.perf_counter()
    params = build_model(cfg, ds.fixture)
    instances = ds.train_instances[:n_instances]
    labels = ds.train_labels[:n_instances]
    base_labels = ds.split.mask_to_base(labels)
    batch = assemble_batch(instances, labels, ds.fixture, ds.hierarchy)

    def loss_value() -> float:
        loss, _ = _loss_for_batch(batch, ds, params, cfg, base_labels)
        return float(loss.data)

    plist = params.parameters()
    nm.zero_grad(plist)
    loss, _ = _loss_for_batch(batch, ds, params, cfg, base_labels)
    nm.backward(loss)
    numeric = nm.finite_difference(loss_value, plist, eps=eps)
    per_param = {
        p.name: nm.max_relative_error(p.grad, num) for p, num in zip(plist, numeric)
    }
    worst = max(per_param, key=per_param.get)
    return GradcheckReport(
        max_rel_err=per_param[worst],
        worst_param=worst,
        per_param=per_param,
        tolerance=tolerance,
        runtime_s=time.perf_counter() - start,
    )
