"""Shared fixtures. The desk-scale 5-seed experiment bundle is session-scoped
and computed once; the acceptance criteria and several module invariants all
read from it."""
import numpy as np
import pytest

from seqcl import harness as hn
from seqcl import taskforge as tf
from seqcl.exemplar import FixedPolicy, GrowingPolicy
from seqcl.seqmodel import ModelConfig

FAMILY_SEED = 42
FAMILY_SIMILARITY = 0.8
FAMILY_SIZES = (200, 40, 50)
E2E_SEEDS = (0, 1, 2, 3, 4)
MEMORY_PER_TASK = 50

DESK_MODEL = dict(d=6, h=32, enc_layers=2, o=8, ctc_weight=0.3)
DESK_TRAIN = dict(max_epochs=30, patience=8, snapshot_count=5, batch_size=8,
                  warmup_steps=50, lr_factor_first=10.0, lr_factor_later=1.0)

E2E_METHODS = {
    "FT": ({}, None),
    "CJT": ({}, None),
    "KD": ({"lam": 1.0}, "growing"),
    "ER_LAMBDA": ({"lam": 0.3}, "growing"),
    "ER": ({}, "growing"),
}


def desk_model_cfg() -> ModelConfig:
    return ModelConfig(**DESK_MODEL)


def desk_train_cfg() -> hn.TrainConfig:
    return hn.TrainConfig(**DESK_TRAIN)


@pytest.fixture(scope="session")
def desk_family():
    return tf.generate_family(FAMILY_SEED, FAMILY_SIMILARITY, sizes=FAMILY_SIZES)


@pytest.fixture(scope="session")
def tiny_family():
    return tf.generate_family(7, FAMILY_SIMILARITY, sizes=(60, 16, 20))


def _policy(kind):
    if kind == "growing":
        return GrowingPolicy(MEMORY_PER_TASK)
    if kind == "fixed":
        return FixedPolicy(MEMORY_PER_TASK)
    return None


@pytest.fixture(scope="session")
def e2e_runs(desk_family):
    """Full 4-task runs for {FT, CJT, KD, ER_LAMBDA, ER} x 5 seeds."""
    runs = {}
    for method, (hyper, policy) in E2E_METHODS.items():
        for seed in E2E_SEEDS:
            runs[(method, seed)] = hn.run_sequence(
                desk_family, method, seed=seed, hyper=dict(hyper),
                model_cfg=desk_model_cfg(), train_cfg=desk_train_cfg(),
                memory_policy=_policy(policy))
    for (method, seed), res in runs.items():
        if method != "FT":
            hn.comparative_metrics(res, runs[("FT", seed)], runs[("CJT", seed)])
    return runs


@pytest.fixture(scope="session")
def kd_fixed_runs(desk_family):
    """KD with the fixed-capacity memory, same seeds as the growing runs."""
    return {
        seed: hn.run_sequence(desk_family, "KD", seed=seed, hyper={"lam": 1.0},
                              model_cfg=desk_model_cfg(),
                              train_cfg=desk_train_cfg(),
                              memory_policy=_policy("fixed"))
        for seed in E2E_SEEDS
    }


def median_over_seeds(runs, method, key):
    vals = [getattr(runs[(method, s)], key) for s in E2E_SEEDS]
    return float(np.median(vals))
