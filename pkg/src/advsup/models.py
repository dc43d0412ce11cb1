"""Residual generator, tanh critic, initialization and serialization."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError

PARAMS_FORMAT = "advsup-params"
PARAMS_VERSION = 1

_GENERATOR_STREAM = 0x67656E
_CRITIC_STREAM = 0x637269


@dataclass(frozen=True)
class Dims:
    d_x: int
    d_y: int
    d_h: int
    L: int
    critic_widths: tuple = (16, 16)
    phi: str = "tanh"  # "tanh" (no parameters) or "mlp" (one hidden layer)

    def __post_init__(self):
        for name in ("d_x", "d_y", "d_h", "L"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        object.__setattr__(self, "critic_widths", tuple(int(w) for w in self.critic_widths))
        if any(w < 1 for w in self.critic_widths):
            raise ValueError(f"critic widths must be positive, got {self.critic_widths}")
        if self.phi not in ("tanh", "mlp"):
            raise ValueError(f"phi must be 'tanh' or 'mlp', got {self.phi!r}")


@dataclass(frozen=True)
class GeneratorParams:
    """theta = {omega, z, U_1, V_1, ..., U_L, V_L}.

    ``omega`` is d_x x d_y (the output is ``omega^T h_L``), ``blocks`` holds
    ``(U_l, V_l)`` with U_l d_h x d_x and V_l d_x x d_h, and ``phi`` holds the
    per-block inner-network parameters ``(A_l, b_l)``; empty for plain tanh.
    Arrays may carry a leading batch axis (see :func:`tile`).
    """

    omega: np.ndarray
    blocks: tuple
    phi: tuple = ()

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def d_x(self) -> int:
        return self.omega.shape[-2]

    @property
    def d_y(self) -> int:
        return self.omega.shape[-1]

    @property
    def d_h(self) -> int:
        return self.blocks[0][0].shape[-2]

    def arrays(self) -> list:
        """Canonical order: omega, U_1, V_1, ..., U_L, V_L, then A_1, b_1, ..."""
        out = [self.omega]
        for U, V in self.blocks:
            out += [U, V]
        for A, b in self.phi:
            out += [A, b]
        return out

    def names(self) -> list:
        out = ["omega"]
        for l in range(1, self.L + 1):
            out += [f"U{l}", f"V{l}"]
        for l in range(1, len(self.phi) + 1):
            out += [f"A{l}", f"b{l}"]
        return out

    def with_arrays(self, arrays: Sequence) -> "GeneratorParams":
        arrays = list(arrays)
        L, P = self.L, len(self.phi)
        if len(arrays) != 1 + 2 * L + 2 * P:
            raise ShapeError(f"expected {1 + 2 * L + 2 * P} arrays, got {len(arrays)}")
        blocks = tuple((arrays[1 + 2 * l], arrays[2 + 2 * l]) for l in range(L))
        phi = tuple((arrays[1 + 2 * L + 2 * k], arrays[2 + 2 * L + 2 * k]) for k in range(P))
        return GeneratorParams(arrays[0], blocks, phi)

    @property
    def size(self) -> int:
        return int(np.sum([np.size(a) for a in self.arrays()]))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    def with_flat(self, vec) -> "GeneratorParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector must have shape ({self.size},), got {vec.shape}")
        out, k = [], 0
        for a in self.arrays():
            n = np.size(a)
            out.append(vec[k:k + n].reshape(np.shape(a)))
            k += n
        return self.with_arrays(out)


@dataclass(frozen=True)
class CriticParams:
    """psi: ``((W_1, b_1), ..., (W_k, b_k))`` with W_i of shape out x in; last out is 1."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise ValueError("critic needs at least one layer")
        if np.shape(self.layers[-1][0])[0] != 1:
            raise ShapeError(f"critic output layer must have one unit, got {np.shape(self.layers[-1][0])}")

    @property
    def d_y(self) -> int:
        return self.layers[0][0].shape[1]

    def arrays(self) -> list:
        return [a for layer in self.layers for a in layer]

    def with_arrays(self, arrays: Sequence) -> "CriticParams":
        arrays = list(arrays)
        return CriticParams(tuple((arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)))

    @property
    def size(self) -> int:
        return int(np.sum([np.size(a) for a in self.arrays()]))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _xavier(rng, rows, cols):
    b = xavier_bound(cols, rows)
    return rng.uniform(-b, b, size=(rows, cols))


def init_generator(rng: np.random.Generator, dims: Dims) -> GeneratorParams:
    omega = _xavier(rng, dims.d_x, dims.d_y)
    blocks = []
    for _ in range(dims.L):
        U = _xavier(rng, dims.d_h, dims.d_x)
        V = _xavier(rng, dims.d_x, dims.d_h)
        blocks.append((U, V))
    phi = []
    if dims.phi == "mlp":
        for _ in range(dims.L):
            phi.append((_xavier(rng, dims.d_h, dims.d_h), np.zeros(dims.d_h)))
    return GeneratorParams(omega, tuple(blocks), tuple(phi))


def init_critic(rng: np.random.Generator, dims: Dims) -> CriticParams:
    widths = (dims.d_y,) + dims.critic_widths + (1,)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        layers.append((_xavier(rng, fan_out, fan_in), np.zeros(fan_out)))
    return CriticParams(tuple(layers))


def init_params(seed: int, dims: Dims) -> tuple[GeneratorParams, CriticParams]:
    """Seeded Xavier-uniform initialization; biases start at zero."""
    if not isinstance(dims, Dims):
        dims = Dims(**dims)
    gen_rng = np.random.default_rng(np.random.SeedSequence([int(seed), _GENERATOR_STREAM]))
    crit_rng = np.random.default_rng(np.random.SeedSequence([int(seed), _CRITIC_STREAM]))
    return init_generator(gen_rng, dims), init_critic(crit_rng, dims)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _phi(params: GeneratorParams, l: int, u):
    a = ad.tanh(u)
    if params.phi:
        A, b = params.phi[l]
        a = ad.add(ad.matvec(A, a), b)
    return a


def _check_input(params: GeneratorParams, x):
    if isinstance(x, ad.Var):
        return x
    x = ad.as_tensor(x, "x")
    if x.ndim not in (1, 2) or x.shape[-1] != params.d_x:
        raise ShapeError(f"x must have trailing dimension d_x={params.d_x}, got shape {x.shape}")
    return x


def hidden_states(params: GeneratorParams, x) -> list:
    """h_0, ..., h_L for input ``x``."""
    h = _check_input(params, x)
    hs = [h]
    for l, (U, V) in enumerate(params.blocks):
        h = ad.add(h, ad.matvec(V, _phi(params, l, ad.matvec(U, h))))
        hs.append(h)
    return hs


def generator_forward(params: GeneratorParams, x):
    """f_theta(x) = omega^T h_L(x) with h_l = h_{l-1} + V_l phi(U_l h_{l-1})."""
    h = hidden_states(params, x)[-1]
    return ad.matvec(params.omega, h, transpose=True)


def critic_forward(params: CriticParams, y_hat):
    """Scalar critic score; a batch ``(n, d_y)`` gives shape ``(n,)``."""
    h = y_hat
    if not isinstance(h, ad.Var):
        h = ad.as_tensor(h, "y_hat")
        if h.ndim not in (1, 2) or h.shape[-1] != params.d_y:
            raise ShapeError(f"y_hat must have trailing dimension d_y={params.d_y}, got shape {h.shape}")
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        h = ad.add(ad.matvec(W, h), b)
        if i < last:
            h = ad.tanh(h)
    return ad.sum(h, axis=-1)


def clip_critic(params: CriticParams, c: float) -> CriticParams:
    """Clamp every weight entry to [-c, c]; biases are left alone."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    return CriticParams(tuple((np.clip(W, -c, c), b) for W, b in params.layers))


def critic_input_gradients(params: CriticParams, points) -> np.ndarray:
    """Per-point gradient of the critic with respect to its input, shape (n, d_y)."""
    points = np.atleast_2d(ad.as_tensor(points, "points"))
    _, tape = ad.forward(lambda y: critic_forward(params, y), [points])
    return tape.vjp(np.ones(points.shape[0]))[0]


def critic_lipschitz_estimate(params: CriticParams, probes) -> float:
    """Largest input-gradient norm over the probe points (a lower Lipschitz estimate)."""
    g = critic_input_gradients(params, probes)
    return float(np.max(np.linalg.norm(g, axis=1)))


def tile(params: GeneratorParams, n: int) -> GeneratorParams:
    """Independent per-sample copies: every array gains a leading axis of length n."""
    return params.with_arrays([np.repeat(a[None], n, axis=0) for a in params.arrays()])


# ---------------------------------------------------------------------------
# Digests and serialization
# ---------------------------------------------------------------------------


def digest(*params) -> str:
    """SHA-256 over shapes and raw float64 bytes, in canonical order."""
    h = hashlib.sha256()
    for p in params:
        for a in p.arrays():
            a = np.ascontiguousarray(a, dtype="<f8")
            h.update(repr(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


def _fmt_array(name: str, a: np.ndarray) -> str:
    dims = " ".join(str(s) for s in a.shape)
    vals = " ".join(repr(float(v)) for v in np.ravel(a))
    return f"{name} {a.ndim} {dims} {vals}".rstrip()


def dump_params(generator: GeneratorParams, critic: CriticParams | None = None) -> str:
    """Versioned text record: omega, U_1, V_1, ..., U_L, V_L, phi arrays, critic layers."""
    lines = [f"{PARAMS_FORMAT} {PARAMS_VERSION}"]
    phi = "mlp" if generator.phi else "tanh"
    lines.append(f"generator L={generator.L} phi={phi}")
    for name, a in zip(generator.names(), generator.arrays()):
        lines.append(_fmt_array(name, a))
    if critic is not None:
        lines.append(f"critic layers={len(critic.layers)}")
        for i, (W, b) in enumerate(critic.layers, 1):
            lines.append(_fmt_array(f"W{i}", W))
            lines.append(_fmt_array(f"c{i}", b))
    return "\n".join(lines) + "\n"


def _parse_array(line: str) -> tuple[str, np.ndarray]:
    parts = line.split()
    name, ndim = parts[0], int(parts[1])
    shape = tuple(int(s) for s in parts[2:2 + ndim])
    vals = np.array([float(v) for v in parts[2 + ndim:]], dtype=np.float64)
    if vals.size != int(np.prod(shape)):
        raise ValueError(f"array {name}: expected {int(np.prod(shape))} values, got {vals.size}")
    return name, vals.reshape(shape)


def load_params(text: str) -> tuple[GeneratorParams, CriticParams | None]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split()[0] != PARAMS_FORMAT:
        raise ValueError("not a parameter record")
    version = int(lines[0].split()[1])
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter record version {version}")
    head = dict(kv.split("=") for kv in lines[1].split()[1:])
    L, has_phi = int(head["L"]), head["phi"] == "mlp"
    n_gen = 1 + 2 * L + (2 * L if has_phi else 0)
    arrays = [_parse_array(ln)[1] for ln in lines[2:2 + n_gen]]
    blocks = tuple((arrays[1 + 2 * l], arrays[2 + 2 * l]) for l in range(L))
    phi = tuple((arrays[1 + 2 * L + 2 * l], arrays[2 + 2 * L + 2 * l]) for l in range(L)) if has_phi else ()
    gen = GeneratorParams(arrays[0], blocks, phi)
    rest = lines[2 + n_gen:]
    critic = None
    if rest:
        n_layers = int(rest[0].split("=")[1])
        carr = [_parse_array(ln)[1] for ln in rest[1:1 + 2 * n_layers]]
        critic = CriticParams(tuple((carr[2 * i], carr[2 * i + 1]) for i in range(n_layers)))
    return gen, critic
