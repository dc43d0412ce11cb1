"""Paired supervised / augmented training on realizable teacher tasks.

Both arms start from the same theta_0, run full-batch gradient descent for
the same number N of generator updates, and record every iterate so that
bound certificates can be re-evaluated after the fact.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .estimators import BoundCertificate, certify, estimate_delta, estimate_lambda, estimate_M
from .models import (
    CriticParams,
    Dims,
    GeneratorParams,
    clip_critic,
    digest,
    generator_forward,
    init_generator,
    init_params,
)
from .objectives import Dataset, critic_value_and_grad, lipschitz_constant, supervised_loss, value_and_grad

_TEACHER_STREAM = 0x746561
_DATA_STREAM = 0x646174

DISPLACEMENT_SLACK = 0.05
TRIANGLE_SLACK = 1e-9


@dataclass(frozen=True)
class TeacherTask:
    """Realizable regression task: targets are exactly f_theta*(x)."""

    theta_star: GeneratorParams
    inputs: np.ndarray
    targets: np.ndarray
    seed: int
    dims: Dims

    @property
    def x(self):
        return self.inputs

    @property
    def y(self):
        return self.targets

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dataset(self) -> Dataset:
        return Dataset(self.inputs, self.targets)

    def digest(self) -> str:
        h = hashlib.sha256(digest(self.theta_star).encode())
        for a in (self.inputs, self.targets):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def make_teacher_task(seed: int, n_samples: int, dims: Dims) -> TeacherTask:
    if not isinstance(dims, Dims):
        dims = Dims(**dims)
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    teacher_rng = np.random.default_rng(np.random.SeedSequence([int(seed), _TEACHER_STREAM]))
    data_rng = np.random.default_rng(np.random.SeedSequence([int(seed), _DATA_STREAM]))
    theta_star = init_generator(teacher_rng, dims)
    x = data_rng.standard_normal((n_samples, dims.d_x))
    y = generator_forward(theta_star, x)
    return TeacherTask(theta_star, x, y, int(seed), dims)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-2
    N: int = 50
    n_critic: int = 5
    clip: float = 0.01
    critic_eta: float = 100.0  # clipped weights need a large step to move
    init: str = "perturb"  # "perturb": theta* + init_scale * xavier draw; "xavier": plain draw
    init_scale: float = 0.15
    critic_init: str = "xavier"  # "xavier" or "zero" (critic identically 0)
    estimate_every: int = 1  # M_hat cadence; 0 disables it
    risk_threshold: float = 1e-3

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.N < 0:
            raise ValueError(f"N must be >= 0, got {self.N}")
        if self.n_critic < 0:
            raise ValueError(f"n_critic must be >= 0, got {self.n_critic}")
        if not self.clip > 0:
            raise ValueError(f"clip must be positive, got {self.clip}")
        if self.init not in ("perturb", "xavier", "teacher"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.critic_init not in ("xavier", "zero"):
            raise ValueError(f"unknown critic_init {self.critic_init!r}")


@dataclass
class StepRecord:
    n: int
    risk: float
    grad_norm: float
    epsilon_hat: float
    step_size: float
    lambda_hat: float
    delta_hat: float | None
    M_hat: float | None
    digest: str
    wallclock_ms: float


@dataclass
class Trajectory:
    arm: str
    records: list = field(default_factory=list)
    params: list = field(default_factory=list)
    critics: list = field(default_factory=list)
    diverged: bool = False
    divergence_message: str = ""
    last_state: GeneratorParams | None = None
    critic_steps: int = 0

    def __len__(self):
        return len(self.records)

    @property
    def risks(self) -> np.ndarray:
        return np.array([r.risk for r in self.records])

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([r.epsilon_hat for r in self.records])


def zero_critic(dims: Dims) -> CriticParams:
    widths = (dims.d_y,) + dims.critic_widths + (1,)
    return CriticParams(tuple((np.zeros((o, i)), np.zeros(o)) for i, o in zip(widths[:-1], widths[1:])))


def initial_state(task: TeacherTask, seed: int, config: TrainConfig) -> tuple[GeneratorParams, CriticParams]:
    """Shared (theta_0, psi_0) for both arms; a deterministic function of ``seed``."""
    gen, critic = init_params(seed, task.dims)
    if config.init == "teacher":
        gen = task.theta_star
    elif config.init == "perturb":
        gen = task.theta_star.with_flat(task.theta_star.flat() + config.init_scale * gen.flat())
    if config.critic_init == "zero":
        critic = zero_critic(task.dims)
    return gen, critic


def critic_step(theta: GeneratorParams, psi: CriticParams, batch, config: TrainConfig) -> CriticParams:
    """One descent step on E[g(f(x))] - E[g(y)] followed by weight clipping."""
    _, grad = critic_value_and_grad(theta, psi, batch)
    updated = psi.with_arrays([a - config.critic_eta * g for a, g in zip(psi.arrays(), grad.arrays())])
    return clip_critic(updated, config.clip)


def train_critic(theta, psi, batch, config: TrainConfig, steps: int) -> CriticParams:
    for _ in range(steps):
        psi = critic_step(theta, psi, batch, config)
    return psi


def _record(arm, n, theta, psi, task, grad_norm, config, t0, with_M):
    y_hat = generator_forward(theta, task.x)
    risk = float(ad.mean(supervised_loss(y_hat, task.y)))
    eps = float(np.mean(np.linalg.norm(y_hat - task.y, axis=1)))
    lam = estimate_lambda(theta, task)
    dlt = estimate_delta(theta, psi, task) if psi is not None else None
    M = estimate_M(theta, task) if with_M else None
    return StepRecord(n, risk, grad_norm, eps, config.eta, lam, dlt, M, digest(theta),
                      (time.perf_counter() - t0) * 1e3)


def _train(arm: str, task: TeacherTask, theta_0: GeneratorParams, psi_0: CriticParams | None,
           config: TrainConfig) -> Trajectory:
    traj = Trajectory(arm)
    theta, psi = theta_0, psi_0
    t0 = time.perf_counter()
    for n in range(config.N + 1):
        try:
            if arm == "aug":
                for _ in range(config.n_critic):
                    psi = critic_step(theta, psi, task, config)
                    traj.critic_steps += 1
                _, grad = value_and_grad("augmented", theta, psi, task)
            else:
                _, grad = value_and_grad("supervised", theta, None, task)
            g = grad.flat()
            grad_norm = float(np.linalg.norm(g))
            every = config.estimate_every
            with_M = every > 0 and (n % every == 0 or n == config.N)
            rec = _record(arm, n, theta, psi, task, grad_norm, config, t0, with_M)
            if not (math.isfinite(rec.risk) and math.isfinite(grad_norm)):
                raise ad.NonFiniteError("non-finite risk or gradient")
        except ad.NonFiniteError as exc:
            traj.diverged = True
            traj.divergence_message = f"iteration {n}: {exc}"
            traj.last_state = theta
            break
        traj.records.append(rec)
        traj.params.append(theta)
        if arm == "aug":
            traj.critics.append(psi)
        if n == config.N:
            break
        new_flat = theta.flat() - config.eta * g
        if not np.all(np.isfinite(new_flat)):
            traj.diverged = True
            traj.divergence_message = f"iteration {n + 1}: non-finite parameters"
            traj.last_state = theta
            break
        theta = theta.with_flat(new_flat)
    if traj.last_state is None and traj.params:
        traj.last_state = traj.params[-1]
    return traj


def train_supervised(task: TeacherTask, theta_0: GeneratorParams, config: TrainConfig) -> Trajectory:
    """theta_{n+1} = theta_n - eta * grad E[l(f(x); y)], full batch."""
    return _train("sup", task, theta_0, None, config)


def train_augmented(task: TeacherTask, theta_0: GeneratorParams, psi_0: CriticParams,
                    config: TrainConfig) -> Trajectory:
    """n_critic clipped critic steps, then one generator step on E[l - g]; N counts generator steps."""
    return _train("aug", task, theta_0, psi_0, config)


def run_pair(task: TeacherTask, seed: int, config: TrainConfig) -> tuple[Trajectory, Trajectory]:
    theta_0, psi_0 = initial_state(task, seed, config)
    return train_supervised(task, theta_0, config), train_augmented(task, theta_0, psi_0, config)


def near_optimal_probe(trajectory: Trajectory, task: TeacherTask, epsilon: float,
                       psi: CriticParams | None = None, max_certificates: int | None = None) -> list:
    """Certify every recorded iterate with epsilon_hat <= epsilon.

    Returns ``[(n, BoundCertificate), ...]``.  Supervised-arm iterates are
    certified against ``psi`` (default: the zero critic).  ``max_certificates``
    thins the selection evenly, always keeping the first selected iterate.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    idx = [i for i, r in enumerate(trajectory.records) if r.epsilon_hat <= epsilon]
    if max_certificates is not None and len(idx) > max_certificates:
        pick = np.unique(np.linspace(0, len(idx) - 1, max_certificates).round().astype(int))
        idx = [idx[k] for k in pick]
    out = []
    for i in idx:
        if trajectory.critics:
            critic = trajectory.critics[i]
        else:
            critic = psi if psi is not None else zero_critic(task.dims)
        cert = certify(trajectory.params[i], critic, task, theta_star=task.theta_star)
        out.append((trajectory.records[i].n, cert))
    return out


def first_crossing(values, threshold) -> int | None:
    hits = np.nonzero(np.asarray(values) <= threshold)[0]
    return int(hits[0]) if hits.size else None


def certificate_at_epsilon(trajectory: Trajectory, task: TeacherTask, epsilon: float,
                           psi: CriticParams | None = None):
    """Certificate at the first iterate whose epsilon_hat is at most ``epsilon``."""
    i = first_crossing(trajectory.epsilons, epsilon)
    if i is None:
        return None
    critic = trajectory.critics[i] if trajectory.critics else (psi if psi is not None else zero_critic(task.dims))
    return trajectory.records[i].n, certify(trajectory.params[i], critic, task, theta_star=task.theta_star)


def final_certificate(trajectory: Trajectory, task: TeacherTask, psi: CriticParams) -> BoundCertificate | None:
    if not trajectory.params:
        return None
    critic = trajectory.critics[-1] if trajectory.critics else psi
    return certify(trajectory.params[-1], critic, task, theta_star=task.theta_star)


def compare_risks(task: TeacherTask, seed: int, N: int, config: TrainConfig,
                  trajectories: tuple | None = None) -> dict:
    """Paired risk comparison at a fixed generator-step budget N.

    R_sup and R_aug are minima of the risk over each trajectory: the infimum
    over final parameters is not observable, so it is approximated by the
    trajectory minimum and by aggregating over seeds.
    """
    if N < 0:
        raise ValueError(f"N must be >= 0, got {N}")
    config = replace(config, N=N)
    sup, aug = trajectories if trajectories is not None else run_pair(task, seed, config)
    digest_sup = sup.records[0].digest if sup.records else None
    digest_aug = aug.records[0].digest if aug.records else None
    valid = not (sup.diverged or aug.diverged)
    report = {
        "seed": int(seed),
        "N": int(N),
        "theta0_digest_sup": digest_sup,
        "theta0_digest_aug": digest_aug,
        "theta0_match": digest_sup is not None and digest_sup == digest_aug,
        "diverged": {"sup": sup.diverged, "aug": aug.diverged},
        "valid": valid,
        "critic_steps": aug.critic_steps,
        "inf_approximation": "minimum risk over the trajectory; aggregate over seeds",
    }
    if sup.records and aug.records:
        r_sup = float(np.min(sup.risks))
        r_aug = float(np.min(aug.risks))
        report.update({
            "R_sup": r_sup,
            "R_aug": r_aug,
            "difference": r_aug - r_sup,
            "aug_le_sup": bool(r_aug <= r_sup),
            "final_risk_sup": sup.records[-1].risk,
            "final_risk_aug": aug.records[-1].risk,
        })
        report["risk_gap"] = risk_gap_check(sup, aug, task)
        critic = aug.critics[-1]
        report["final_certificates"] = {
            "sup": final_certificate(sup, task, critic).to_dict(),
            "aug": final_certificate(aug, task, critic).to_dict(),
        }
    return report


def risk_gap_check(sup: Trajectory, aug: Trajectory, task: TeacherTask) -> dict:
    """|R_aug - R_sup| <= K mean ||f_aug(x) - f_sup(x)|| at the final iterates."""
    K = lipschitz_constant(task.dims.d_y)
    f_sup = generator_forward(sup.params[-1], task.x)
    f_aug = generator_forward(aug.params[-1], task.x)
    lhs = abs(aug.records[-1].risk - sup.records[-1].risk)
    rhs = K * float(np.mean(np.linalg.norm(f_aug - f_sup, axis=1))) + TRIANGLE_SLACK
    return {"lhs": lhs, "rhs": rhs, "K": K, "pass": bool(lhs <= rhs)}


def measure_convergence(task: TeacherTask, seed: int, risk_threshold: float, config: TrainConfig,
                        trajectories: tuple | None = None) -> dict:
    """Iterations to first reach ``risk <= risk_threshold`` in each arm.

    The predicted ratio lambda/(lambda + delta) is read at the supervised
    arm's crossing index (or its last iterate if it never crosses), with
    lambda from the supervised arm and delta from the augmented arm's
    critic at the same index.
    """
    if not risk_threshold > 0:
        raise ValueError(f"risk_threshold must be positive, got {risk_threshold}")
    sup, aug = trajectories if trajectories is not None else run_pair(task, seed, config)
    n_sup = first_crossing(sup.risks, risk_threshold)
    n_aug = first_crossing(aug.risks, risk_threshold)
    out = {
        "seed": int(seed),
        "risk_threshold": float(risk_threshold),
        "N_sup_star": n_sup,
        "N_aug_star": n_aug,
        "sup_reached": n_sup is not None,
        "aug_reached": n_aug is not None,
        "predicted_ratio": None,
        "measured_ratio": None,
        "aug_le_sup": None,
        "ratio_defined": False,
    }
    if n_sup is None and n_aug is None:
        return out
    k = n_sup if n_sup is not None else len(sup.records) - 1
    k = min(k, len(aug.records) - 1)
    lam = sup.records[k].lambda_hat
    dlt = aug.records[k].delta_hat or 0.0
    out["predicted_ratio"] = lam / (lam + dlt) if lam + dlt > 0 else None
    if n_sup is not None and n_aug is not None:
        out["aug_le_sup"] = bool(n_aug <= n_sup)
        if n_sup > 0:
            out["measured_ratio"] = n_aug / n_sup
            out["ratio_defined"] = True
    elif n_aug is not None:
        out["aug_le_sup"] = True
    else:
        out["aug_le_sup"] = False
    return out


def displacement_bounds(trajectory: Trajectory, task: TeacherTask, slack: float = DISPLACEMENT_SLACK) -> dict:
    """Per-step and cumulative first-order displacement bounds.

    Step n: mean ||f_{n}(x) - f_{n+1}(x)|| <= M(theta_n) ||theta_{n+1} - theta_n|| (1 + slack).
    """
    steps = []
    outputs = [generator_forward(p, task.x) for p in trajectory.params]
    for n in range(len(trajectory.params) - 1):
        rec = trajectory.records[n]
        M = rec.M_hat if rec.M_hat is not None else estimate_M(trajectory.params[n], task)
        lhs = float(np.mean(np.linalg.norm(outputs[n] - outputs[n + 1], axis=1)))
        move = float(np.linalg.norm(trajectory.params[n + 1].flat() - trajectory.params[n].flat()))
        rhs = M * move
        steps.append({"n": n, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else 0.0,
                      "pass": bool(lhs <= rhs * (1.0 + slack))})
    total_lhs = float(np.mean(np.linalg.norm(outputs[0] - outputs[-1], axis=1))) if outputs else 0.0
    total_rhs = sum(s["rhs"] for s in steps) * (1.0 + slack)
    return {
        "steps": steps,
        "all_steps_pass": all(s["pass"] for s in steps),
        "cumulative": {"lhs": total_lhs, "rhs": total_rhs, "pass": bool(total_lhs <= total_rhs)},
    }


def risk_monotonicity(trajectory: Trajectory) -> dict:
    """Count risk increases along the trajectory (a symptom of a step size that is too large)."""
    r = trajectory.risks
    inc = np.nonzero(np.diff(r) > 0)[0]
    return {"increases": int(inc.size), "first_increase": int(inc[0]) + 1 if inc.size else None,
            "monotone": bool(inc.size == 0)}


def trained_critic_certificate(theta: GeneratorParams, task: TeacherTask, psi_0: CriticParams,
                               config: TrainConfig, steps: int) -> tuple[BoundCertificate, CriticParams]:
    """Fit the critic against a frozen theta, then certify theta with it.

    Compares the supervised and augmented gradients at one and the same
    iterate, with a critic that has converged for that iterate.
    """
    psi = train_critic(theta, psi_0, task, config, steps)
    return certify(theta, psi, task, theta_star=task.theta_star), psi


def gradient_epsilon_curve(sup: Trajectory, aug: Trajectory, task: TeacherTask, epsilons,
                           psi_0: CriticParams | None = None, config: TrainConfig | None = None,
                           critic_steps: int = 0) -> list:
    """Gradient norms at the first iterate of each arm below each epsilon.

    With ``psi_0`` and ``critic_steps > 0`` each row also carries a
    ``sup_trained_critic`` entry: the supervised iterate certified with a
    critic fitted to it (see :func:`trained_critic_certificate`).
    """
    rows = []
    for eps in epsilons:
        row = {"epsilon": float(eps)}
        for arm, traj in (("sup", sup), ("aug", aug)):
            hit = certificate_at_epsilon(traj, task, eps)
            if hit is None:
                row[arm] = None
            else:
                n, cert = hit
                row[arm] = {"n": n, "certificate": cert.to_dict()}
        if psi_0 is not None and critic_steps > 0:
            i = first_crossing(sup.epsilons, eps)
            if i is None:
                row["sup_trained_critic"] = None
            else:
                cert, _ = trained_critic_certificate(sup.params[i], task, psi_0, config or TrainConfig(),
                                                     critic_steps)
                row["sup_trained_critic"] = {"n": sup.records[i].n, "certificate": cert.to_dict()}
        rows.append(row)
    return rows
