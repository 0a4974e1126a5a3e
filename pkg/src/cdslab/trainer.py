"""Optimizer, schedules, the training regimes and run orchestration.

Regimes and their objectives:

* ``baseline``: cross entropy on the final classifier.
* ``dsn``: plus alpha-weighted cross entropy on auxiliary classifiers.
* ``dks``: plus beta-weighted KL from the final classifier to each auxiliary one.
* ``cds``: cross entropy on view 1 plus lambda1-weighted contrastive losses
  from projection heads on a stacked two-view batch.
* ``cds-semi``: ``cds`` on labeled batches plus contrastive losses on
  unlabeled batches.
* ``kd-cds``: ``cds`` plus embedding distillation and logit KL from a frozen
  teacher.
* ``kd-feature``: as ``kd-cds`` but distilling backbone stage features.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .config import TrainConfig, dump_config
from .data import (ImageDataset, load_datasets, make_batch, make_contrastive_batch, epoch_batches,
                   semi_split, normalize)
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import CalibrationReport, ece, softmax, top1
from .network import (StagedNetwork, atomic_write, attach_heads, build_backbone, forward_tapped,
                      head_discard, load_checkpoint, save_checkpoint)
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "SGD", "sgd_momentum_step", "lr_at", "train_epoch", "evaluate",
           "run_experiment", "replay_manifest", "train_teacher_then_distill", "EpochStats", "RunArtifacts"]

PROJECTION_REGIMES = ("cds", "cds-semi", "kd-cds", "kd-feature")
CLASSIFIER_REGIMES = ("dsn", "dks")


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def sgd_momentum_step(params, grads, lr, momentum, weight_decay, velocity=None):
    """One SGD step with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + g + weight_decay * p``; ``p <- p - lr * v``. Works on
    numpy arrays in place and returns the velocity list.
    """
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ValueError(f"parameter {p.shape} and gradient {g.shape} differ")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter of shape {p.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return velocity


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        ids = [id(p) for p in self.params]
        if len(set(ids)) != len(ids):
            raise ValueError("a parameter was passed to the optimizer twice")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        sgd_momentum_step([p.data for p in self.params], grads, self.lr, self.momentum,
                          self.weight_decay, self.velocity)


def lr_at(schedule: str, epoch: int, total_epochs: int, base_lr: float,
          milestones=(30, 60), gamma: float = 0.1) -> float:
    if schedule == "cosine":
        return base_lr * (1 + math.cos(math.pi * epoch / total_epochs)) / 2
    if schedule == "step":
        return base_lr * gamma ** sum(epoch >= m for m in milestones)
    raise ConfigError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    total: float
    components: dict[str, float]
    train_ce: float
    train_top1: float
    seconds: float


@dataclass
class Teacher:
    net: StagedNetwork
    bn_mode: str = "eval"


def _as_input(x: np.ndarray, dtype) -> Tensor:
    return Tensor(x.astype(dtype, copy=False))


def _param_dtype(model: Module):
    return model.parameters()[0].dtype


def feature_adapters(student: StagedNetwork, teacher: StagedNetwork, seed: int) -> ModuleList:
    """1x1 convolutions mapping student stage channels onto the teacher's."""
    if student.K != teacher.K:
        raise ConfigError(f"feature distillation needs equal stage counts ({student.K} vs {teacher.K})")
    s_sp, t_sp = student.backbone.stage_out_spatial, teacher.backbone.stage_out_spatial
    if s_sp != t_sp:
        raise ConfigError(f"stage spatial sizes differ: student {s_sp}, teacher {t_sp}")
    rng = np.random.default_rng([seed, 31337])
    adapters = []
    for cs, ct in zip(student.backbone.stage_out_channels, teacher.backbone.stage_out_channels):
        adapters.append(Conv2d(cs, ct, 1, rng, pad=0).astype(_param_dtype(student)))
    return ModuleList(adapters)


def _teacher_taps(teacher: Teacher, x: Tensor):
    with T.no_grad():
        return forward_tapped(teacher.net, x, mode=teacher.bn_mode)


def step_loss(model: StagedNetwork, cfg: TrainConfig, train: ImageDataset, idx: np.ndarray, seed,
              teacher: Teacher | None = None, adapters: ModuleList | None = None,
              unlabeled: tuple[ImageDataset, np.ndarray] | None = None):
    """Loss bundle, first-view logits and labels for one batch of ``idx``."""
    regime = cfg.regime
    dtype = _param_dtype(model)
    w = cfg.loss
    if regime in ("baseline", "dsn", "dks"):
        x, y = make_batch(train, idx, cfg.single_policy(), seed)
        taps = forward_tapped(model, _as_input(x, dtype), mode="train")
        if regime == "baseline":
            bundle = L._bundle([("ce_final", L.cross_entropy(taps.final_logits, y), 1.0)])
        elif regime == "dsn":
            bundle = L.deep_supervision_loss(taps, y, w)
        else:
            bundle = L.dks_loss(taps, y, w)
        return bundle, taps.final_logits.data, y
    x, y = make_contrastive_batch(train, idx, cfg.contrast_policy(), seed)
    xt = _as_input(x, dtype)
    taps = forward_tapped(model, xt, mode="train")
    logits = taps.final_logits.data[:len(y)]
    if regime == "cds":
        return L.cds_loss(taps, y, w, cfg.train.contrast_kind), logits, y
    if regime == "cds-semi":
        u_taps = None
        if unlabeled is not None and len(unlabeled[1]):
            xu, _ = make_contrastive_batch(unlabeled[0], unlabeled[1], cfg.contrast_policy(),
                                           np.append(np.atleast_1d(seed), 1))
            u_taps = forward_tapped(model, _as_input(xu, dtype), mode="train")
        return L.semi_cds_loss(taps, y, u_taps, w, cfg.train.contrast_kind), logits, y
    if teacher is None:
        raise ConfigError(f"regime {regime} needs a teacher")
    t_taps = _teacher_taps(teacher, xt)
    if regime == "kd-cds":
        bundle = L.dcds_loss(taps, t_taps, y, w, cfg.train.contrast_kind, distill="embedding")
    else:
        feats = taps.stage_features
        if adapters is not None:
            feats = [a(f) for a, f in zip(adapters, feats)]
        bundle = L.dcds_loss(taps, t_taps, y, w, cfg.train.contrast_kind, distill="feature",
                             student_feats=feats)
    return bundle, logits, y


def train_epoch(model: StagedNetwork, train: ImageDataset, cfg: TrainConfig, optimizer: SGD,
                epoch: int, teacher: Teacher | None = None, adapters: ModuleList | None = None,
                labeled_idx: np.ndarray | None = None, unlabeled_idx: np.ndarray | None = None) -> EpochStats:
    """One pass over the (labeled) training indices."""
    t0 = time.perf_counter()
    base = np.arange(len(train)) if labeled_idx is None else np.asarray(labeled_idx)
    bs = cfg.train.batch_size
    batches = epoch_batches(len(base), bs, cfg.train.seed, epoch)
    u_batches = []
    if unlabeled_idx is not None and len(unlabeled_idx):
        ubs = cfg.semi.unlabeled_batch_size or bs
        u_perm = epoch_batches(len(unlabeled_idx), ubs, [cfg.train.seed, 1], epoch)
        u_batches = [np.asarray(unlabeled_idx)[b] for b in u_perm]
    sums: dict[str, float] = {}
    total_sum, correct, seen = 0.0, 0, 0
    for step, b in enumerate(batches):
        idx = base[b]
        seed = [cfg.train.seed, epoch, step]
        unl = (train, u_batches[step % len(u_batches)]) if u_batches else None
        bundle, logits, y = step_loss(model, cfg, train, idx, seed, teacher, adapters, unl)
        value = float(bundle.total.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch} step {step} "
                               f"(batch of {len(idx)}, first indices {idx[:8].tolist()})")
        optimizer.zero_grad()
        T.backward(bundle.total)
        optimizer.step()
        for k, v in bundle.values().items():
            sums[k] = sums.get(k, 0.0) + v
        total_sum += value
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        seen += len(y)
    n = max(len(batches), 1)
    comps = {k: v / n for k, v in sums.items()}
    return EpochStats(epoch, optimizer.lr, total_sum / n, comps, comps.get("ce_final", float("nan")),
                      correct / max(seen, 1), time.perf_counter() - t0)


def predict_logits(net: StagedNetwork, ds: ImageDataset, cfg: TrainConfig,
                   discard_heads: bool = True) -> np.ndarray:
    """Eval-mode final logits. With ``discard_heads=False`` the full tapped
    forward runs, heads included, and only the final logits are kept."""
    dtype = _param_dtype(net)
    policy = cfg.eval_policy()
    inference = head_discard(net) if discard_heads else None
    out = []
    with T.no_grad():
        for i in range(0, len(ds), cfg.eval.batch_size):
            x = _as_input(normalize(ds.images[i:i + cfg.eval.batch_size], policy), dtype)
            if inference is not None:
                out.append(inference.forward(x, mode="eval").data)
            else:
                out.append(forward_tapped(net, x, mode="eval").final_logits.data)
    return np.concatenate(out) if out else np.zeros((0, net.spec.num_classes))


def head_embeddings(net: StagedNetwork, ds: ImageDataset, cfg: TrainConfig, count: int = 256) -> list[np.ndarray]:
    """Projection-head embeddings (eval mode) of the first ``count`` images."""
    x = normalize(ds.images[:count], cfg.eval_policy())
    with T.no_grad():
        taps = forward_tapped(net, _as_input(x, _param_dtype(net)), mode="eval")
    return [e.data for e in taps.aux_embeddings]


def evaluate(net: StagedNetwork, ds: ImageDataset, cfg: TrainConfig,
             discard_heads: bool = True) -> tuple[float, CalibrationReport]:
    logits = predict_logits(net, ds, cfg, discard_heads)
    return top1(logits, ds.labels), ece(softmax(logits), ds.labels, cfg.eval.bins)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    run_dir: str
    config: TrainConfig
    curves: list[EpochStats] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    calibration: CalibrationReport | None = None
    paths: dict[str, str] = field(default_factory=dict)
    model: StagedNetwork | None = None
    test_set: ImageDataset | None = None


def build_model(cfg: TrainConfig) -> StagedNetwork:
    net = build_backbone(cfg.arch, seed=cfg.train.seed)
    h = cfg.heads
    if cfg.regime in PROJECTION_REGIMES:
        net = attach_heads(net, "projection", h.scheme, cfg.head_count(), h.embed_dim, h.hidden_dim,
                           seed=cfg.train.seed)
    elif cfg.regime in CLASSIFIER_REGIMES:
        net = attach_heads(net, "classifier", h.scheme, cfg.head_count(), seed=cfg.train.seed)
    return net


def load_teacher(cfg: TrainConfig, student: StagedNetwork) -> Teacher:
    path = cfg.kd.teacher_checkpoint
    if not path or not os.path.exists(path):
        raise ConfigError(f"teacher checkpoint not found: {path}")
    net, _ = load_checkpoint(path)
    if cfg.regime == "kd-cds":
        if not len(net.heads):
            raise ConfigError("kd-cds needs a teacher trained with projection heads")
        if len(net.heads) != len(student.heads):
            raise ConfigError(f"teacher has {len(net.heads)} projection heads, student has {len(student.heads)}")
        if net.heads[0].embed_dim != student.heads[0].embed_dim:
            raise ConfigError(f"embedding sizes differ: teacher {net.heads[0].embed_dim}, "
                              f"student {student.heads[0].embed_dim}")
    net.astype(_param_dtype(student))
    return Teacher(net, cfg.kd.teacher_bn)


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def curves_csv(curves: list[EpochStats]) -> str:
    comp_names: list[str] = []
    for c in curves:
        comp_names += [k for k in c.components if k not in comp_names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "total", *comp_names, "train_top1"])
    for c in curves:
        w.writerow([c.epoch, _fmt(c.lr), _fmt(c.total),
                    *[_fmt(c.components[k]) if k in c.components else "" for k in comp_names],
                    _fmt(c.train_top1)])
    return buf.getvalue()


def read_curves(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in summary.items():
        w.writerow([k, _fmt(v) if isinstance(v, float) else v])
    return buf.getvalue()


def read_summary(path: str) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        try:
            out[r["key"]] = float(r["value"]) if r["key"] not in ("regime", "dataset", "run") else r["value"]
        except ValueError:
            out[r["key"]] = r["value"]
    return out


def source_version() -> str:
    from . import __version__
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5, check=True).stdout.strip()
        return f"{__version__}+g{rev}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def run_experiment(cfg: TrainConfig, keep_model: bool = False) -> RunArtifacts:
    """Train one configuration and write its artifacts under ``run.out_dir/<run name>``."""
    cfg.validate()
    if cfg.regime.startswith("kd-") and not os.path.exists(cfg.kd.teacher_checkpoint):
        raise ConfigError(f"teacher checkpoint not found: {cfg.kd.teacher_checkpoint}")
    train, test = load_datasets(cfg.data)
    if train.images.shape[1:] != (cfg.arch.in_channels, cfg.arch.input_size, cfg.arch.input_size):
        raise ConfigError(f"dataset images {train.images.shape[1:]} do not match the architecture input")
    model = build_model(cfg)
    teacher = load_teacher(cfg, model) if cfg.regime.startswith("kd-") else None
    adapters = feature_adapters(model, teacher.net, cfg.train.seed) if cfg.regime == "kd-feature" else None
    labeled_idx = unlabeled_idx = None
    if cfg.regime == "cds-semi":
        split = semi_split(train, cfg.semi.fraction, cfg.train.seed)
        labeled_idx, unlabeled_idx = split.labeled_indices, split.unlabeled_indices
    params = model.parameters() + (adapters.parameters() if adapters is not None else [])
    opt = SGD(params, cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay)
    curves: list[EpochStats] = []
    for epoch in range(cfg.train.epochs):
        opt.lr = lr_at(cfg.train.schedule, epoch, cfg.train.epochs, cfg.train.lr,
                       cfg.train.milestones, cfg.train.gamma)
        stats = train_epoch(model, train, cfg, opt, epoch, teacher, adapters, labeled_idx, unlabeled_idx)
        log.info("%s epoch %d lr %.4g loss %.4f ce %.4f top1 %.4f (%.1fs)", cfg.run_name, epoch,
                 stats.lr, stats.total, stats.train_ce, stats.train_top1, stats.seconds)
        curves.append(stats)
    acc, report = evaluate(model, test, cfg)
    summary = {
        "run": cfg.run_name,
        "regime": cfg.regime,
        "dataset": f"{cfg.data.name}:{test.checksum()[:16]}",
        "seed": cfg.train.seed,
        "epochs": cfg.train.epochs,
        "test_samples": len(test),
        "test_top1": acc,
        "test_ece": report.ece,
        "final_train_ce": curves[-1].train_ce if curves else float("nan"),
        "final_train_top1": curves[-1].train_top1 if curves else float("nan"),
    }
    run_dir = os.path.join(cfg.run.out_dir, cfg.run_name)
    paths = {name: os.path.join(run_dir, name) for name in
             ("config.snapshot", "manifest.json", "curves.csv", "timing.csv", "final.ckpt",
              "calibration.csv", "summary.csv")}
    snapshot = dump_config(cfg)
    manifest = {
        "config_snapshot": snapshot,
        "version": source_version(),
        "seed": cfg.train.seed,
        "dataset_checksums": {"train": train.checksum(), "test": test.checksum()},
        "layout": sorted(paths),
    }
    atomic_write(paths["config.snapshot"], snapshot)
    atomic_write(paths["curves.csv"], curves_csv(curves))
    atomic_write(paths["timing.csv"], "epoch,seconds\n" + "".join(f"{c.epoch},{c.seconds:.3f}\n" for c in curves))
    save_checkpoint(paths["final.ckpt"], model, {"data": asdict(cfg.data), "regime": cfg.regime,
                                                 "eval_bins": cfg.eval.bins, "test_top1": acc})
    atomic_write(paths["calibration.csv"], report.to_csv())
    atomic_write(paths["summary.csv"], summary_csv(summary))
    atomic_write(paths["manifest.json"], json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(run_dir, cfg, curves, summary, report, paths,
                        model if keep_model else None, test if keep_model else None)


def replay_manifest(manifest_path: str, out_dir: str | None = None) -> RunArtifacts:
    """Re-run the configuration recorded in a manifest, optionally elsewhere."""
    from .config import parse_config_text
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        snapshot = manifest["config_snapshot"]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable run manifest {manifest_path}: {exc}") from exc
    cfg = parse_config_text(snapshot, [f"run.out_dir={out_dir}"] if out_dir else [])
    if cfg.train.seed != manifest.get("seed", cfg.train.seed):
        raise ConfigError("manifest seed disagrees with its config snapshot")
    return run_experiment(cfg)


def train_teacher_then_distill(teacher_cfg: TrainConfig, student_cfg: TrainConfig,
                               keep_model: bool = False) -> tuple[RunArtifacts | None, RunArtifacts]:
    """Train (or reuse) a cds teacher, then train the student against it.

    The teacher checkpoint is ``student_cfg.kd.teacher_checkpoint`` when set and
    present; otherwise the teacher is trained and its ``final.ckpt`` is used.
    """
    if teacher_cfg.regime != "cds":
        raise ConfigError(f"the teacher must be trained with regime cds, not {teacher_cfg.regime}")
    if student_cfg.regime not in ("kd-cds", "kd-feature"):
        raise ConfigError(f"student regime must be kd-cds or kd-feature, not {student_cfg.regime}")
    if teacher_cfg.heads.embed_dim != student_cfg.heads.embed_dim:
        raise ConfigError("teacher and student projection heads must share an embedding size")
    teacher_art = None
    ckpt = student_cfg.kd.teacher_checkpoint
    if ckpt and os.path.exists(ckpt):
        log.info("reusing teacher checkpoint %s", ckpt)
    else:
        teacher_art = run_experiment(teacher_cfg)
        if ckpt:
            os.makedirs(os.path.dirname(os.path.abspath(ckpt)), exist_ok=True)
            with open(teacher_art.paths["final.ckpt"], "rb") as fh:
                atomic_write(ckpt, fh.read())
        else:
            student_cfg.kd.teacher_checkpoint = teacher_art.paths["final.ckpt"]
    try:
        student_art = run_experiment(student_cfg, keep_model=keep_model)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    return teacher_art, student_art
