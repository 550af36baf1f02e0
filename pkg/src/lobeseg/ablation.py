"""Multi-task vs single-task comparison on held-out diseased phantoms."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import DiceReport, build_dice_report, hard_dice
from .phantom import PhantomSpec, make_case, make_dataset
from .preprocess import LOBES, VOCABULARY, PreparedCase, PreprocessConfig, preprocess_case
from .tensor import no_grad
from .trainer import TrainConfig, train
from .vnet import ModelConfig, VNet

logger = logging.getLogger(__name__)


def lobe_scores(model: VNet, cases) -> dict[str, list[float]]:
    """Per-case hard Dice for each lobe class of the main head."""
    scores: dict[str, list[float]] = {name: [] for name in LOBES}
    for case in cases:
        if case.main_onehot is None:
            raise FileNotFoundError(f"case {case.case_id} has no label map")
        with no_grad():
            main, _ = model.forward(case.image, "eval")
        pred = main.data.argmax(axis=1)
        gt = case.main_onehot.data.argmax(axis=1)
        for name in LOBES:
            scores[name].append(hard_dice(pred, gt, VOCABULARY.index(name)))
    return scores


@dataclass
class AblationConfig:
    size: int = 16
    phantom_size: int = 32
    depth: int = 3
    base_channels: int = 8
    epochs: int = 150
    n_train: int = 12
    test_diseases: tuple[str, ...] = ("collapse", "cancer")
    n_test: int = 6
    severity: float = 0.5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_seed: int = 100
    lambda_mtl: tuple[float, float] = (0.5, 0.5)
    train: dict = field(default_factory=dict)


@dataclass
class SeedResult:
    seed: int
    mtl: dict[str, list[float]]
    single: dict[str, list[float]]
    report: DiceReport

    @property
    def mtl_mean(self) -> float:
        return float(np.mean([np.mean(v) for v in self.mtl.values()]))

    @property
    def single_mean(self) -> float:
        return float(np.mean([np.mean(v) for v in self.single.values()]))

    @property
    def gap(self) -> float:
        return self.mtl_mean - self.single_mean


def ablation_data(cfg: AblationConfig) -> tuple[list[PreparedCase], list[PreparedCase]]:
    """Normal training phantoms and diseased held-out phantoms, preprocessed to ``cfg.size``."""
    pc = PreprocessConfig(target_size=cfg.size)
    base = PhantomSpec(size=cfg.phantom_size)
    prep = lambda c: preprocess_case(c.volume, c.labels, pc, case_id=c.case_id)  # noqa: E731
    train_set = [prep(c) for c in make_dataset(cfg.n_train, base, seed=cfg.data_seed)]
    test_set = []
    for i in range(cfg.n_test):
        mode = cfg.test_diseases[i % len(cfg.test_diseases)]
        spec = dataclasses.replace(base, disease=mode, severity=cfg.severity)
        test_set.append(prep(make_case(spec, i, cfg.data_seed + 1, prefix=f"test_{mode}")))
    return train_set, test_set


def run_ablation(cfg: AblationConfig = AblationConfig()) -> list[SeedResult]:
    """Train both variants once per seed; compare lobe Dice with a paired t-test.

    The single-task model drops the auxiliary head (lambda_aux = 0). Parameter
    initialization is keyed by name, so both variants start from the same trunk.
    """
    train_set, test_set = ablation_data(cfg)
    ids = [c.case_id for c in test_set]
    results = []
    for seed in cfg.seeds:
        scores = {}
        for label, lam_aux in (("mtl", cfg.lambda_mtl[1]), ("single", 0.0)):
            mc = ModelConfig(input_size=cfg.size, depth=cfg.depth, base_channels=cfg.base_channels,
                             aux_head=lam_aux > 0, seed=seed)
            tc = TrainConfig(**{"epochs": cfg.epochs, "seed": seed, "lambda_main": cfg.lambda_mtl[0],
                                "lambda_aux": lam_aux, **cfg.train})
            model, _ = train(VNet(mc), train_set, None, tc)
            scores[label] = lobe_scores(model, test_set)
        report = build_dice_report(scores["mtl"], ids, scores["single"], paired=True)
        res = SeedResult(seed, scores["mtl"], scores["single"], report)
        logger.info("seed %d: mtl %.4f single %.4f", seed, res.mtl_mean, res.single_mean)
        results.append(res)
    return results


def format_ablation(results: list[SeedResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"seed {r.seed}: MTL {r.mtl_mean:.4f}  single-task {r.single_mean:.4f}  gap {r.gap:+.4f}")
        lines.append("class,mtl_mean,single_mean,p_value")
        for row in r.report.rows:
            p = "" if row.p_value is None else f"{row.p_value:.4g}"
            lines.append(f"{row.name},{row.mean:.4f},{np.mean(r.single[row.name]):.4f},{p}")
    return "\n".join(lines)
