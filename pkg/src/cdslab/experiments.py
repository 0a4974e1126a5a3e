"""Desk-scale comparison protocols.

``reproduction`` trains baseline and cds on a CIFAR-10 subset for several
seeds and reports accuracy, final train CE, ECE and head-embedding spread.
``kd_ablation`` trains one cds teacher, then kd-cds and kd-feature students.

    python -m cdslab.experiments reproduction --data-dir ~/data --out protocol
    python -m cdslab.experiments kd --data-dir ~/data --out protocol

Both accept ``--dataset synthetic`` for an offline run of the same pipeline.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import statistics
import sys
from dataclasses import dataclass, field

import numpy as np

from . import trainer
from .config import TrainConfig, parse_config_text
from .metrics import mean_pairwise_cosine
from .network import atomic_write

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)


def desk_config(regime: str, seed: int, out_dir: str, dataset: str = "cifar10", data_dir: str | None = None,
                train_subset: int = 5000, test_subset: int = 2000, epochs: int = 30,
                extra: tuple[str, ...] = ()) -> TrainConfig:
    """small-resnet, four stages, batch 128, cosine schedule."""
    lines = [
        f"train.regime = {regime}",
        f"train.seed = {seed}",
        f"train.epochs = {epochs}",
        "train.batch_size = 128",
        "train.lr = 0.05",
        "train.schedule = cosine",
        "arch.family = small-resnet",
        "arch.K = 4",
        "arch.widths = 16,32,64,128",
        f"data.name = {dataset}",
        f"data.dir = {data_dir or 'none'}",
        f"data.train_subset = {train_subset}",
        f"data.test_subset = {test_subset}",
        f"data.synthetic_train = {train_subset}",
        f"data.synthetic_test = {test_subset}",
        f"run.out_dir = {out_dir}",
    ]
    return parse_config_text("\n".join(lines), list(extra))


@dataclass
class SeedResult:
    regime: str
    seed: int
    top1: float
    train_ce: float
    ece: float
    head_cosines: list[float] = field(default_factory=list)


@dataclass
class Check:
    name: str
    status: str  # PASS, FAIL or WARN
    detail: str


def _result(art: trainer.RunArtifacts, collapse_images: int) -> SeedResult:
    s = art.summary
    cos = []
    if art.model is not None and len(art.model.heads):
        cos = [mean_pairwise_cosine(z) for z in
               trainer.head_embeddings(art.model, art.test_set, art.config, collapse_images)]
    return SeedResult(s["regime"], s["seed"], s["test_top1"], s["final_train_ce"], s["test_ece"], cos)


def reproduction(out_dir: str, seeds=SEEDS, collapse_images: int = 256, **kw) -> list[SeedResult]:
    results = []
    for seed in seeds:
        for regime in ("baseline", "cds"):
            cfg = desk_config(regime, seed, out_dir, **kw)
            results.append(_result(trainer.run_experiment(cfg, keep_model=True), collapse_images))
            log.info("%s", results[-1])
    return results


def kd_ablation(out_dir: str, seeds=SEEDS, train_subset: int = 2000, test_subset: int = 1000,
                teacher_seed: int = 100, **kw) -> list[SeedResult]:
    """The teacher is trained once and shared by every student."""
    teacher_cfg = desk_config("cds", teacher_seed, out_dir, train_subset=train_subset,
                              test_subset=test_subset, **kw)
    ckpt = os.path.join(out_dir, teacher_cfg.run_name, "final.ckpt")
    results = []
    for seed in seeds:
        for regime in ("kd-cds", "kd-feature"):
            cfg = desk_config(regime, seed, out_dir, train_subset=train_subset, test_subset=test_subset,
                              extra=(f"kd.teacher_checkpoint={ckpt}",), **kw)
            _, art = trainer.train_teacher_then_distill(teacher_cfg, cfg)
            results.append(_result(art, 0))
            log.info("%s", results[-1])
    return results


def _median(results, regime, attr) -> float:
    return statistics.median(getattr(r, attr) for r in results if r.regime == regime)


def _paired(results, a, b, attr) -> list[tuple[float, float]]:
    by = {(r.regime, r.seed): getattr(r, attr) for r in results}
    seeds = sorted({r.seed for r in results})
    return [(by[(a, s)], by[(b, s)]) for s in seeds if (a, s) in by and (b, s) in by]


def reproduction_checks(results: list[SeedResult], cosine_limit: float = 0.99) -> list[Check]:
    checks = []
    mb, mc = _median(results, "baseline", "top1"), _median(results, "cds", "top1")
    checks.append(Check("median top-1 cds > baseline", "PASS" if mc > mb else "FAIL",
                        f"cds {mc:.4f} vs baseline {mb:.4f}"))
    pairs = _paired(results, "cds", "baseline", "train_ce")
    wins = sum(c > b for c, b in pairs)
    need = len(pairs) - len(pairs) // 3  # 2 of 3
    status = "PASS" if wins >= need else ("WARN" if wins == need - 1 else "FAIL")
    checks.append(Check("final train CE cds > baseline per seed", status, f"{wins} of {len(pairs)} seeds"))
    eb, ec = _median(results, "baseline", "ece"), _median(results, "cds", "ece")
    checks.append(Check("median ECE cds <= baseline", "PASS" if ec <= eb else "WARN",
                        f"cds {ec:.4f} vs baseline {eb:.4f}"))
    cos = [c for r in results if r.regime == "cds" for c in r.head_cosines]
    worst = max(cos) if cos else float("nan")
    checks.append(Check(f"head embedding mean cosine < {cosine_limit}",
                        "PASS" if cos and worst < cosine_limit else "FAIL", f"max over heads and seeds {worst:.4f}"))
    return checks


def kd_checks(results: list[SeedResult]) -> list[Check]:
    me, mf = _median(results, "kd-cds", "top1"), _median(results, "kd-feature", "top1")
    return [Check("median top-1 kd-cds >= kd-feature", "PASS" if me >= mf else "WARN",
                  f"kd-cds {me:.4f} vs kd-feature {mf:.4f}")]


def results_csv(results: list[SeedResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_heads = max((len(r.head_cosines) for r in results), default=0)
    w.writerow(["regime", "seed", "top1", "train_ce", "ece", *[f"head{i + 1}_cosine" for i in range(n_heads)]])
    for r in results:
        w.writerow([r.regime, r.seed, f"{r.top1:.6f}", f"{r.train_ce:.6f}", f"{r.ece:.6f}",
                    *[f"{c:.6f}" for c in r.head_cosines]])
    return buf.getvalue()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m cdslab.experiments")
    p.add_argument("protocol", choices=("reproduction", "kd"))
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="cifar10", choices=("cifar10", "synthetic"))
    p.add_argument("--data-dir")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    kw = dict(dataset=args.dataset, data_dir=args.data_dir, epochs=args.epochs)
    if args.protocol == "reproduction":
        results = reproduction(args.out, args.seeds, **kw)
        checks = reproduction_checks(results)
    else:
        results = kd_ablation(args.out, args.seeds, **kw)
        checks = kd_checks(results)
    atomic_write(os.path.join(args.out, f"{args.protocol}.csv"), results_csv(results))
    for c in checks:
        print(f"{c.status:4s} {c.name}: {c.detail}")
    return 0 if all(c.status != "FAIL" for c in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
