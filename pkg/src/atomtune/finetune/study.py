"""Synthetic transfer study: pretrain on source shapes, decompose, fine-tune each scheme on the target."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..data import gen_synthetic
from ..sparse_coding import SparseCodingConfig
from .model import Model, build_demo_cnn, reinit_head
from .schemes import (AtomsOnly, AtomsPlusLinear, DecomposeOptions, FullFinetune, LinearProbe,
                      OvercompletePlusLinear, TuningScheme, decompose_model, prepare_model)
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

STUDY_SCHEMES = (LinearProbe, AtomsOnly, AtomsPlusLinear, OvercompletePlusLinear)


@dataclass
class StudyConfig:
    # source pretraining
    pretrain_n: int = 2000
    pretrain_seed: int = 1
    pretrain_epochs: int = 8
    pretrain_lr: float = 2e-3
    model_seed: int = 0
    # decomposition
    m: int = 9
    lam: float = 1e-4
    m1: int = 3
    # target fine-tuning
    target_task: str = "shapes-rotated-target"
    n_train: int = 300
    n_eval: int = 1000
    train_data_seed: int = 11
    eval_data_seed: int = 12
    epochs: int = 12
    learning_rate: float = 1e-2
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class StudyResult:
    config: StudyConfig
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    tunable: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, scheme: TuningScheme) -> float:
        return float(np.mean(self.accuracy[str(scheme)]))

    def gaps(self) -> dict[str, float]:
        """The four ordered gaps (in accuracy units) that the scheme ranking should show."""
        lp, ao, apl, opl = (self.mean(s) for s in STUDY_SCHEMES)
        return {
            "atoms-only - linear-probe": ao - lp,
            "atoms-plus-linear - atoms-only": apl - ao,
            "overcomplete-plus-linear - atoms-only": opl - ao,
        }

    def to_json(self) -> str:
        cfg = asdict(self.config)
        cfg["seeds"] = list(cfg["seeds"])
        return json.dumps({"config": cfg, "accuracy": self.accuracy, "tunable": self.tunable,
                           "means": {k: float(np.mean(v)) for k, v in self.accuracy.items()},
                           "gaps": self.gaps(), "seconds": self.seconds}, indent=2, sort_keys=True)


def pretrain(cfg: StudyConfig) -> Model:
    """Dense demo CNN fully trained on the source task."""
    src = gen_synthetic("shapes-source", cfg.pretrain_seed, cfg.pretrain_n)
    model = build_demo_cnn(cfg.model_seed)
    train(model, src, FullFinetune,
          TrainConfig(epochs=cfg.pretrain_epochs, batch_size=64, learning_rate=cfg.pretrain_lr,
                      seed=cfg.pretrain_seed, eval_every=0))
    return model


def transfer_study(cfg: Optional[StudyConfig] = None, base: Optional[Model] = None) -> StudyResult:
    """Run every scheme in ``STUDY_SCHEMES`` for every seed; ``base`` skips pretraining."""
    cfg = cfg or StudyConfig()
    t0 = time.perf_counter()
    if base is None:
        base = pretrain(cfg)
    decomposed, _, _ = decompose_model(base, DecomposeOptions(m=cfg.m, m_c=cfg.m,
                                                              sparse=SparseCodingConfig(lam=cfg.lam)),
                                       seed=0)
    tgt = gen_synthetic(cfg.target_task, cfg.train_data_seed, cfg.n_train)
    tev = gen_synthetic(cfg.target_task, cfg.eval_data_seed, cfg.n_eval)
    result = StudyResult(cfg)
    for scheme in STUDY_SCHEMES:
        accs = []
        for seed in cfg.seeds:
            model = prepare_model(decomposed, scheme, m1=cfg.m1, seed=seed)
            reinit_head(model, seed=seed)
            hist = train(model, tgt, scheme,
                         TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                     learning_rate=cfg.learning_rate, seed=seed, eval_every=0))
            accs.append(evaluate(model, tev)[0])
            result.tunable[str(scheme)] = hist.partition.backbone
            log.info("%s seed %d: %.3f", scheme, seed, accs[-1])
        result.accuracy[str(scheme)] = accs
    result.seconds = time.perf_counter() - t0
    return result
