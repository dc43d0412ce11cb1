"""Measured constants (lambda, delta, M), gradient norms and bound certificates.

Every quantity is a root-mean-square over the same empirical batch, so each
certificate inequality follows from Cauchy-Schwarz and must hold on any
input; a failing check is a bug, not noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError
from .models import CriticParams, GeneratorParams, critic_input_gradients, generator_forward, tile
from .objectives import OBJECTIVES, supervised_loss, value_and_grad

PASS_SLACK = 1e-9
POWER_ITERS = 1000
POWER_TOL = 1e-12


def spectral_norm(
    jvp: Callable,
    vjp: Callable,
    in_dim: int,
    out_dim: int,
    iters: int = POWER_ITERS,
    tol: float = POWER_TOL,
    seed: int = 0,
    batch: int | None = None,
):
    """Largest singular value of a linear map by power iteration on J^T J.

    ``jvp`` maps (in_dim,) -> (out_dim,) and ``vjp`` the reverse.  With
    ``batch`` set, vectors carry a leading batch axis and one estimate per
    batch entry is returned.  The estimate is ``||J v||`` for a unit ``v``,
    hence never above the true value.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    shape = (in_dim,) if batch is None else (batch, in_dim)
    out_shape = (out_dim,) if batch is None else (batch, out_dim)

    def unit(rng_seed):
        v = np.random.default_rng(rng_seed).standard_normal(shape)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def apply(fn, vec, expect):
        r = np.asarray(fn(vec), dtype=np.float64)
        if r.shape != expect:
            raise ShapeError(f"linear map returned shape {r.shape}, expected {expect}")
        if not np.all(np.isfinite(r)):
            raise NonFiniteError("non-finite Jacobian product during power iteration")
        return r

    v = unit(seed)
    prev = None
    sigma = None
    for k in range(iters):
        u = apply(jvp, v, out_shape)
        sigma = np.linalg.norm(u, axis=-1)
        if k == 0 and np.any(sigma == 0.0):
            # start vector in the null space: one restart with a fresh seed
            dead = sigma == 0.0
            fresh = unit(seed + 1)
            v = np.where(dead[..., None], fresh, v) if batch is not None else fresh
            u = apply(jvp, v, out_shape)
            sigma = np.linalg.norm(u, axis=-1)
        if prev is not None and np.all(np.abs(sigma - prev) <= tol * sigma):
            break
        prev = sigma
        w = apply(vjp, u, shape)
        wn = np.linalg.norm(w, axis=-1, keepdims=True)
        v = np.where(wn > 0, w / np.where(wn > 0, wn, 1.0), v)
    return float(sigma) if batch is None else sigma


def parameter_jacobian_maps(theta: GeneratorParams, x):
    """Per-sample ``J_theta f(x_i)`` as batched (jvp, vjp) closures.

    Returns ``(jvp, vjp, n_params, d_y, n)``; ``jvp`` takes (n, n_params)
    and ``vjp`` takes (n, d_y).
    """
    x = np.atleast_2d(ad.as_tensor(x, "x"))
    n = x.shape[0]
    tiled = tile(theta, n)
    arrays = tiled.arrays()
    shapes = [a.shape for a in arrays]
    sizes = [int(np.prod(s[1:])) for s in shapes]
    _, tape = ad.forward(lambda *arrs: generator_forward(theta.with_arrays(arrs), x), arrays)

    def split(V):
        out, k = [], 0
        for s, m in zip(shapes, sizes):
            out.append(V[:, k:k + m].reshape(s))
            k += m
        return out

    def jvp(V):
        return tape.jvp(split(V))

    def vjp(U):
        return np.concatenate([g.reshape(n, -1) for g in tape.vjp(U)], axis=1)

    return jvp, vjp, int(np.sum(sizes)), theta.d_y, n


def per_sample_spectral_norms(theta: GeneratorParams, x, iters=POWER_ITERS, tol=POWER_TOL, seed=0):
    jvp, vjp, p, d_y, n = parameter_jacobian_maps(theta, x)
    return spectral_norm(jvp, vjp, p, d_y, iters=iters, tol=tol, seed=seed, batch=n)


def _rms(values) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def estimate_M(theta: GeneratorParams, dataset, iters=POWER_ITERS, tol=POWER_TOL, seed=0) -> float:
    """sqrt(mean_i ||J_theta f(x_i)||^2)."""
    if len(dataset.x) == 0:
        raise ValueError("dataset is empty")
    return _rms(per_sample_spectral_norms(theta, dataset.x, iters, tol, seed))


def prediction_gradients(theta: GeneratorParams, dataset) -> np.ndarray:
    """Per-sample gradient of the supervised loss with respect to the prediction."""
    y_hat = generator_forward(theta, dataset.x)
    _, tape = ad.forward(lambda p: ad.sum(supervised_loss(p, dataset.y)), [y_hat])
    return tape.vjp(np.ones(()))[0]


def estimate_lambda(theta: GeneratorParams, dataset) -> float:
    """sqrt(mean_i ||grad_yhat l(f(x_i); y_i)||^2)."""
    if len(dataset.x) == 0:
        raise ValueError("dataset is empty")
    return _rms(np.linalg.norm(prediction_gradients(theta, dataset), axis=1))


def estimate_delta(theta: GeneratorParams, psi: CriticParams, dataset) -> float:
    """Operational critic residual: sqrt(mean_i ||grad g(f(x_i))||^2)."""
    if len(dataset.x) == 0:
        raise ValueError("dataset is empty")
    g = critic_input_gradients(psi, generator_forward(theta, dataset.x))
    return _rms(np.linalg.norm(g, axis=1))


def full_gradient_norm(objective: str, theta: GeneratorParams, psi: CriticParams | None, dataset) -> float:
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    _, grad = value_and_grad(objective, theta, psi, dataset)
    return float(np.linalg.norm(grad.flat()))


def epsilon_hat(theta: GeneratorParams, theta_star: GeneratorParams, x) -> float:
    """mean_i ||f_theta(x_i) - f_theta*(x_i)||."""
    diff = generator_forward(theta, x) - generator_forward(theta_star, x)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


@dataclass
class BoundCertificate:
    lambda_hat: float
    delta_hat: float
    M_hat: float
    grad_norm_sup: float
    grad_norm_adv: float
    grad_norm_aug: float
    epsilon_measured: float | None
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c[2] for c in self.checks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checks"] = {k: {"lhs": v[0], "rhs": v[1], "pass": v[2]} for k, v in self.checks.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundCertificate":
        d = dict(d)
        d["checks"] = {k: (v["lhs"], v["rhs"], v["pass"]) for k, v in d["checks"].items()}
        return cls(**d)


def check(lhs: float, rhs: float) -> tuple:
    return (float(lhs), float(rhs), bool(lhs <= rhs * (1.0 + PASS_SLACK)))


def certify(theta: GeneratorParams, psi: CriticParams, dataset, theta_star: GeneratorParams | None = None,
            seed: int = 0) -> BoundCertificate:
    """Measure lambda, delta, M and the three gradient norms; evaluate each bound.

    Checks: supervised ``|grad| <= lambda M``, adversarial ``|grad| <= delta M``,
    augmented ``|grad| <= (lambda + delta) M``.
    """
    lam = estimate_lambda(theta, dataset)
    dlt = estimate_delta(theta, psi, dataset)
    M = estimate_M(theta, dataset, seed=seed)
    g_sup = full_gradient_norm("supervised", theta, psi, dataset)
    g_adv = full_gradient_norm("adversarial", theta, psi, dataset)
    g_aug = full_gradient_norm("augmented", theta, psi, dataset)
    eps = None if theta_star is None else epsilon_hat(theta, theta_star, dataset.x)
    checks = {
        "supervised": check(g_sup, lam * M),
        "adversarial": check(g_adv, dlt * M),
        "augmented": check(g_aug, (lam + dlt) * M),
    }
    return BoundCertificate(lam, dlt, M, g_sup, g_adv, g_aug, eps, checks)
