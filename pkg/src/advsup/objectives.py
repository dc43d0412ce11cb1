"""Supervised, Wasserstein and augmented training objectives.

Every expectation is a full-batch mean over the empirical sample.  Losses
are written with the autodiff primitives so the same code evaluates
eagerly on arrays and records on a tape for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .models import CriticParams, GeneratorParams, critic_forward, generator_forward

OBJECTIVES = ("supervised", "adversarial", "augmented")


@dataclass(frozen=True)
class Dataset:
    """Paired samples; ``x`` is (n, d_x), ``y`` is (n, d_y)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = ad.as_tensor(self.x, "x")
        y = ad.as_tensor(self.y, "y")
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"dataset needs x (n, d_x) and y (n, d_y), got {x.shape} and {y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]


def _require_nonempty(batch):
    if len(batch.x) == 0:
        raise ValueError("batch is empty")


def lipschitz_constant(d_y: int) -> float:
    """K for the coordinate-wise Huber loss: its p-gradient has norm at most sqrt(d_y)."""
    return float(np.sqrt(d_y))


def supervised_loss(p, y):
    """Sum over coordinates of Huber(p_i - y_i) with threshold 1.

    A batch of rows gives one loss per row.
    """
    p_shape = p.shape if isinstance(p, ad.Var) else np.shape(p)
    if p_shape != np.shape(y):
        raise ShapeError(f"prediction shape {p_shape} does not match target shape {np.shape(y)}")
    return ad.sum(ad.huber(ad.sub(p, y)), axis=-1)


def risk(theta: GeneratorParams, batch) -> float:
    """Mean supervised loss over the batch."""
    _require_nonempty(batch)
    return float(ad.mean(supervised_loss(generator_forward(theta, batch.x), batch.y)))


def wgan_generator_loss(theta: GeneratorParams, psi: CriticParams, batch):
    """-E_x[g(f(x))]."""
    _require_nonempty(batch)
    return ad.neg(ad.mean(critic_forward(psi, generator_forward(theta, batch.x))))


def wgan_critic_loss(theta: GeneratorParams, psi: CriticParams, batch):
    """E_x[g(f(x))] - E_y[g(y)]."""
    _require_nonempty(batch)
    fake = critic_forward(psi, generator_forward(theta, batch.x))
    real = critic_forward(psi, batch.y)
    return ad.sub(ad.mean(fake), ad.mean(real))


def augmented_loss(theta: GeneratorParams, psi: CriticParams, batch):
    """E[l(f(x); y) - g(f(x))]."""
    _require_nonempty(batch)
    p = generator_forward(theta, batch.x)
    return ad.mean(ad.sub(supervised_loss(p, batch.y), critic_forward(psi, p)))


def _objective_program(objective: str, psi, batch):
    if objective == "supervised":
        def loss(th):
            return ad.mean(supervised_loss(generator_forward(th, batch.x), batch.y))
    elif objective == "adversarial":
        def loss(th):
            return wgan_generator_loss(th, psi, batch)
    elif objective == "augmented":
        def loss(th):
            return augmented_loss(th, psi, batch)
    else:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    return loss


def value_and_grad(objective: str, theta: GeneratorParams, psi: CriticParams | None, batch):
    """Objective value and its theta-gradient (as a GeneratorParams of arrays)."""
    _require_nonempty(batch)
    loss = _objective_program(objective, psi, batch)
    value, tape = ad.forward(lambda *arrs: loss(theta.with_arrays(arrs)), theta.arrays())
    grads = tape.vjp(np.ones(()))
    return float(value), theta.with_arrays(grads)


def critic_value_and_grad(theta: GeneratorParams, psi: CriticParams, batch):
    """Critic loss and its psi-gradient with the generator frozen."""
    _require_nonempty(batch)
    fake_pts = generator_forward(theta, batch.x)

    def loss(*arrs):
        c = psi.with_arrays(arrs)
        return ad.sub(ad.mean(critic_forward(c, fake_pts)), ad.mean(critic_forward(c, batch.y)))

    value, tape = ad.forward(loss, psi.arrays())
    return float(value), psi.with_arrays(tape.vjp(np.ones(())))
