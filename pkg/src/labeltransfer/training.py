"""Optimisation loop: ray batches, loss assembly, checkpoints and resume."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import fields as fl
from . import losses as ls
from .autodiff import Tensor
from .camera import pixel_rays
from .geometry import IntervalTable
from .rendering import make_bundle, render_rays
from .scene_io import Dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr") + tuple(f"loss_{n}" for n in ls.PART_NAMES) + ("loss_total",)


class TrainingDiverged(FloatingPointError):
    """A loss or parameter became non-finite; a diagnostic snapshot was written."""


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 1024
    lr: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    n_per_interval: int = 8
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    field: fl.FieldConfig = field(default_factory=fl.FieldConfig)
    deterministic: bool = True
    checkpoint_every: int = 1000
    log_every: int = 25
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_rays < 1 or self.n_per_interval < 1:
            raise ValueError("iterations >= 0, batch_rays >= 1 and n_per_interval >= 1 are required")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    def lr_at(self, step: int) -> float:
        """Exponential decay from ``lr`` to ``lr_final`` over the run."""
        frac = step / max(self.iterations, 1)
        return self.lr * (self.lr_final / self.lr) ** frac

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = ls.LossWeights(**d["weights"])
        if "field" in d:
            d["field"] = fl.FieldConfig(**d["field"])
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Reduced network and batch that train on one CPU core in minutes."""
    base = TrainConfig(iterations=3000, batch_rays=256, lr=5e-3, lr_final=5e-4,
                       field=fl.FieldConfig(pos_bands=10, dir_bands=4, depth=4, width=64, skip=2,
                                            color_width=32, semantic_width=32),
                       checkpoint_every=500)
    return replace(base, **overrides)


@dataclass
class SupervisionSet:
    """Every ray of every frame with its targets.

    Right-camera rays only carry color: their semantic label is ``VOID`` and
    their depth target 0.
    """

    origins: np.ndarray
    dirs: np.ndarray
    rgb: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    frame: np.ndarray
    table: IntervalTable

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "SupervisionSet":
        intr = ds.scene.intrinsics
        n_pix = intr.width * intr.height
        parts: dict[str, list] = {k: [] for k in ("o", "d", "rgb", "lab", "dep", "frame", "tab")}
        for f in ds.scene.frames:
            o, d = pixel_rays(intr, f)
            parts["o"].append(o)
            parts["d"].append(d)
            parts["rgb"].append(ds.rgb(f.id).reshape(-1, 3))
            lab = ds.pseudo_semantic(f.id) if f.side == "left" else None
            dep = ds.pseudo_depth(f.id) if f.side == "left" else None
            parts["lab"].append(np.full(n_pix, ls.VOID) if lab is None else lab.reshape(-1))
            parts["dep"].append(np.zeros(n_pix, np.float32) if dep is None else dep.reshape(-1))
            parts["frame"].append(np.full(n_pix, f.id))
            parts["tab"].append(ds.intervals(f.id))
        return cls(np.concatenate(parts["o"]), np.concatenate(parts["d"]),
                   np.concatenate(parts["rgb"]).astype(np.float32), np.concatenate(parts["lab"]).astype(np.int64),
                   np.concatenate(parts["dep"]).astype(np.float32), np.concatenate(parts["frame"]),
                   IntervalTable.concat(parts["tab"]))


@dataclass
class RayBatch:
    index: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    table: IntervalTable
    rgb: np.ndarray
    labels: np.ndarray
    depth: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def sample_batch(sup: SupervisionSet, cfg: TrainConfig, rng: np.random.Generator) -> RayBatch:
    """Rays drawn uniformly without replacement across all frames."""
    idx = np.sort(rng.choice(len(sup), size=min(cfg.batch_rays, len(sup)), replace=False))
    return RayBatch(idx, sup.origins[idx], sup.dirs[idx], sup.table.rows(idx), sup.rgb[idx], sup.labels[idx],
                    sup.depth[idx])


def compute_losses(batch: RayBatch, params: dict[str, Tensor], cfg: TrainConfig, scene,
                   rng: np.random.Generator) -> tuple[Tensor, dict[str, Tensor], int]:
    """Forward pass and loss terms; returns (total, parts, number of points in the 3D term)."""
    bundle = make_bundle(batch.origins, batch.dirs, batch.table, scene, cfg.n_per_interval, jitter=True, rng=rng)
    out = render_rays(bundle, params, cfg.field, scene)
    comp = out.comp
    labels = batch.labels
    w = cfg.weights
    parts: dict[str, Tensor] = {
        "fixed_2d": ls.loss_fixed_semantic(comp.sem_fixed, labels),
        "learned_2d": ls.loss_learned_semantic(comp.sem_learned, labels, ls.ray_mask(bundle.slot_cls, labels)),
        "photometric": ls.loss_photometric(comp.color, batch.rgb),
        "depth": ls.loss_depth(comp.depth, batch.depth),
    }
    # the 3D term sees detached trunk features so it only trains the semantic head
    n_cand = bundle.n_candidates.reshape(-1)[out.flat_index]
    sel = np.flatnonzero(ls.point_mask(n_cand, out.sigma.data, w.sigma_threshold))
    if len(sel):
        log_s = ad.log_softmax(fl.semantic_logits(Tensor(out.feat.data[sel]), params))
        m = scene.classes.num_classes
        s_fix = bundle.s_fixed.reshape(-1, m)[out.flat_index[sel]]
        parts["point_3d"] = ls.loss_3d_semantic(log_s, s_fix, np.ones(len(sel), bool))
    else:
        parts["point_3d"] = Tensor(0.0)
    return ls.total_loss(parts, w), parts, len(sel)


def _write_log_rows(path: Path, rows: list[dict[str, Any]], keep_until: int | None = None) -> None:
    existing: list[dict[str, str]] = []
    if path.exists():
        with path.open(newline="") as fh:
            existing = list(csv.DictReader(fh))
        if keep_until is not None:
            existing = [r for r in existing if int(r["step"]) <= keep_until]
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(existing)
        wr.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)


def read_loss_log(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in LOG_COLUMNS}


def _ckpt_path(run_dir: Path, step: int) -> Path:
    return run_dir / "checkpoints" / f"step_{step:07d}.ckpt"


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    found = sorted((Path(run_dir) / "checkpoints").glob("step_*.ckpt"))
    return found[-1] if found else None


def _save(run_dir: Path, path: Path, params, opt, step, rng, cfg: TrainConfig, extra=None) -> None:
    meta = {"rng_state": rng.bit_generator.state, "train_config": cfg.to_dict(),
            "field_config": cfg.field.to_dict()}
    if extra:
        meta.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(path, params, step, opt, meta)


def load_model(path: str | Path) -> tuple[dict[str, Tensor], fl.FieldConfig]:
    ckpt = ad.load_checkpoint(path)
    cfg = fl.FieldConfig(**ckpt.meta["field_config"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.params.items()}
    return params, cfg


def train(dataset: Dataset, cfg: TrainConfig, run_dir: str | Path, resume: bool = False,
          stop_after: int | None = None, progress: bool = False) -> Path:
    """Train the fields and return the path of the final model checkpoint.

    ``stop_after`` ends the run early at that step (after checkpointing),
    which is how interrupted runs are simulated.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    scene = dataset.scene.scene_frame()
    fcfg = replace(cfg.field, num_classes=scene.classes.num_classes)
    cfg = replace(cfg, field=fcfg)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    sup = SupervisionSet.from_dataset(dataset)
    if not np.any(sup.labels != ls.VOID):
        raise ValueError("dataset has no pseudo semantic labels")
    limits = threadpool_limits(limits=1) if cfg.deterministic else None
    try:
        return _train_loop(sup, scene, cfg, run_dir, resume, stop_after, progress)
    finally:
        if limits is not None:
            limits.restore_original_limits()


def _train_loop(sup, scene, cfg: TrainConfig, run_dir: Path, resume, stop_after, progress) -> Path:
    log_path = run_dir / "losses.csv"
    start = 0
    ckpt_file = latest_checkpoint(run_dir) if resume else None
    if ckpt_file is not None:
        ckpt = ad.load_checkpoint(ckpt_file)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.params.items()}
        opt = ad.restore_adam(ckpt, params)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.meta["rng_state"]
        start = ckpt.step
        _write_log_rows(log_path, [], keep_until=start)
        log.info("resumed from %s at step %d", ckpt_file, start)
    else:
        params = fl.init_params(cfg.field, np.random.default_rng(cfg.seed))
        opt = ad.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
        rng = np.random.default_rng([cfg.seed, 1])
        if log_path.exists():
            log_path.unlink()
        _write_log_rows(log_path, [])
    end = cfg.iterations if stop_after is None else min(stop_after, cfg.iterations)
    pending: list[dict[str, Any]] = []
    for step in range(start, end):
        batch = sample_batch(sup, cfg, rng)
        idx = batch.index
        try:
            total, parts, _ = compute_losses(batch, params, cfg, scene, rng)
        except ls.LossError as exc:
            ad.clear_tape()
            _diverged(run_dir, params, opt, step, rng, cfg, str(exc), idx)
        opt.lr = cfg.lr_at(step)
        ad.backward(total)
        for p in params.values():
            if p.grad is None:  # e.g. semantic head when every 2D and 3D term is masked out
                p.zero_grad()
        opt.step()
        if not all(np.all(np.isfinite(p.data)) for p in params.values()):
            _diverged(run_dir, params, opt, step, rng, cfg, "non-finite parameters after update", idx)
        done = step + 1
        if done % cfg.log_every == 0 or done == end:
            row = {"step": done, "lr": opt.lr, "loss_total": float(total.data)}
            row.update({f"loss_{k}": float(v.data) for k, v in parts.items()})
            pending.append(row)
            if progress:
                log.info("step %d total %.4f", done, row["loss_total"])
        if done % cfg.checkpoint_every == 0 or done == end:
            _write_log_rows(log_path, pending)
            pending = []
            _save(run_dir, _ckpt_path(run_dir, done), params, opt, done, rng, cfg)
    if pending:
        _write_log_rows(log_path, pending)
    final = run_dir / "model.ckpt"
    if end == cfg.iterations:
        _save(run_dir, final, params, opt, end, rng, cfg)
    return final


def _diverged(run_dir, params, opt, step, rng, cfg, reason: str, idx: np.ndarray):
    path = run_dir / f"diverged_step_{step:07d}.ckpt"
    _save(run_dir, path, params, opt, step, rng, cfg, {"reason": reason, "batch_rays": idx.tolist()})
    raise TrainingDiverged(f"step {step}: {reason}; snapshot written to {path}")

