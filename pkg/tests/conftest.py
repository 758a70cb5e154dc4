"""Session-scoped trained-model fixtures shared by the train tests and the
acceptance suite, so each scaled-down experiment trains exactly once."""

import numpy as np
import pytest

from proxflow import linalg, problems
from proxflow import train as tr
from proxflow.conditional import model_from_checkpoint
from proxflow.flow import flow_from_checkpoint

TWO_MOONS_CONFIG = dict(n=2, K=6, p=16, h=32, gamma=1.5, batch_b=200,
                        epochs_e=4, steps_s=2000, lr_tau=2e-3, seed=1)

CIRCLE_CONFIG = dict(n=2, d=1, K=8, p=8, h=32, gamma=1.5, batch_b=256,
                     epochs_e=2, steps_s=1750, lr_tau=2e-3, seed=2)

MIXTURE_CONFIG = dict(n=8, d=8, K=12, p=2, h=48, gamma=2.9, kappa=2,
                      batch_b=128, epochs_e=6, steps_s=1000, lr_tau=5e-3,
                      seed=3)

MIXTURE_PROBLEM_SEED = 7


@pytest.fixture(scope="session")
def two_moons_run():
    """(config, model, history) for the reduced-budget two-moons fit.

    The first 3000 history entries coincide bitwise with a 3000-step run of
    the same seed (training consumes the rng stream step by step), so this
    one fixture also serves the 3000-step smoke example.
    """
    cfg = tr.TrainConfig(**TWO_MOONS_CONFIG)
    sampler = lambda rng, size: problems.sample_toy("two_moons", size, rng)
    ckpt, history = tr.train_loop(cfg, sampler)
    return cfg, flow_from_checkpoint(ckpt), history


@pytest.fixture(scope="session")
def circle_run():
    """(problem, model, history) for the conditional circle posterior fit."""
    spec = problems.circle_problem()
    cfg = tr.TrainConfig(**CIRCLE_CONFIG)
    sampler = lambda rng, size: spec.sample_pairs(rng, size)
    ckpt, history = tr.train_loop(cfg, sampler)
    return spec, model_from_checkpoint(ckpt), history


@pytest.fixture(scope="session")
def mixture_run():
    """(problem, y_scale, model) for the scaled mixture posterior fit.

    The condition coordinates are standardized in the training pairs (a
    fixed bijection of y, so the posterior it learns is unchanged); feed
    y_obs / y_scale when sampling.
    """
    spec = problems.mixture_problem(
        n=MIXTURE_CONFIG["n"], rng=linalg.make_rng(MIXTURE_PROBLEM_SEED))
    cal = spec.sample_pairs(linalg.make_rng(55), 20_000)
    y_scale = cal[:, :spec.dim_y].std(axis=0)

    def sampler(rng, size):
        rows = spec.sample_pairs(rng, size)
        rows[:, :spec.dim_y] /= y_scale
        return rows

    cfg = tr.TrainConfig(**MIXTURE_CONFIG)
    ckpt, _ = tr.train_loop(cfg, sampler)
    return spec, y_scale, model_from_checkpoint(ckpt)
