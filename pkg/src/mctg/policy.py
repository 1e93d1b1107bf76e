"""Parallel three-branch policy: frequency-specific feature networks whose
weighted outputs concatenate into the state fed to Gaussian policy and value
heads.

Each enabled branch flattens its window, runs a small dense network with
dropout, and is multiplied elementwise by a learned 16-vector before
concatenation. Actions are a scalar Gaussian with a state-independent log-std,
clipped to [-1, 1] at the environment boundary; log-densities are always taken
at the pre-clip draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .marketdata import LONG_SHAPE, MID_SHAPE, SHORT_SHAPE, Observation

LOG2PI = math.log(2.0 * math.pi)
BRANCH_NAMES = ("short", "mid", "long")


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    branches: tuple[str, ...] = BRANCH_NAMES
    garch_feature: bool = True
    branch_hidden: tuple[int, ...] = (32, 16)
    branch_out: int = 16
    dropout: float = 0.25
    trunk_hidden: int = 32
    init_log_std: float = -0.5
    log_std_min: float = -5.0
    log_std_max: float = 1.0

    def __post_init__(self):
        if not self.branches:
            raise PolicyError("at least one branch must be enabled")
        for b in self.branches:
            if b not in BRANCH_NAMES:
                raise PolicyError(f"unknown branch {b!r}")
        if len(set(self.branches)) != len(self.branches):
            raise PolicyError("duplicate branch names")

    def input_dims(self) -> dict[str, int]:
        mid_cols = MID_SHAPE[1] if self.garch_feature else MID_SHAPE[1] - 1
        dims = {
            "short": SHORT_SHAPE[0] * SHORT_SHAPE[1],
            "mid": MID_SHAPE[0] * mid_cols,
            "long": LONG_SHAPE[0] * LONG_SHAPE[1],
        }
        return {b: dims[b] for b in self.branches}

    @property
    def state_dim(self) -> int:
        return self.branch_out * len(self.branches)


@dataclass
class PolicyOutput:
    """Gaussian head outputs for one observation (or a batch of them)."""

    action_mean: np.ndarray
    action_std: float
    value: np.ndarray


@dataclass
class PolicyCache:
    branch_caches: dict = field(default_factory=dict)
    branch_outputs: dict = field(default_factory=dict)
    state: np.ndarray | None = None
    policy_cache: object = None
    value_cache: object = None
    squeezed: bool = False


class Policy:
    """Parameter container plus forward/backward for the full actor-critic."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.config = config
        dims = config.input_dims()
        sizes = lambda d: [d, *config.branch_hidden, config.branch_out]
        self.branches = {
            name: nn.mlp(sizes(dim), hidden_activation="tanh", out_activation="tanh",
                         dropout=config.dropout, rng=rng)
            for name, dim in dims.items()
        }
        self.branch_weights = {name: np.ones(config.branch_out) for name in config.branches}
        self.policy_trunk = nn.mlp([config.state_dim, config.trunk_hidden, 1],
                                   hidden_activation="tanh", rng=rng)
        self.value_trunk = nn.mlp([config.state_dim, config.trunk_hidden, 1],
                                  hidden_activation="tanh", rng=rng)
        self.log_std = np.array(config.init_log_std, dtype=np.float64)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for name in self.config.branches:
            params.extend(self.branches[name].parameters())
            params.append(self.branch_weights[name])
        params.extend(self.policy_trunk.parameters())
        params.extend(self.value_trunk.parameters())
        params.append(self.log_std)
        return params

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for name in self.config.branches:
            n_dense = sum(isinstance(l, nn.DenseLayer) for l in self.branches[name].layers)
            for i in range(n_dense):
                names.append(f"branch.{name}.dense{i}.weights")
                names.append(f"branch.{name}.dense{i}.bias")
            names.append(f"branch_weight.{name}")
        for trunk in ("policy_trunk", "value_trunk"):
            net = getattr(self, trunk)
            n_dense = sum(isinstance(l, nn.DenseLayer) for l in net.layers)
            for i in range(n_dense):
                names.append(f"{trunk}.dense{i}.weights")
                names.append(f"{trunk}.dense{i}.bias")
        names.append("log_std")
        return names

    def set_parameters(self, values: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise PolicyError(f"expected {len(params)} parameter arrays, got {len(values)}")
        for p, v in zip(params, values):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise PolicyError(f"parameter shape {v.shape} does not match {p.shape}")
            p[...] = v

    # -- observation handling ----------------------------------------------

    def flatten_observation(self, obs: Observation) -> dict[str, np.ndarray]:
        """Flatten the windows of the enabled branches, row-major. The GARCH
        column is dropped from the mid window when the variant disables it."""
        mid = obs.mid_window if self.config.garch_feature else obs.mid_window[:, :6]
        full = {
            "short": obs.short_window.ravel(),
            "mid": mid.ravel(),
            "long": obs.long_window.ravel(),
        }
        return {b: full[b] for b in self.config.branches}

    # -- forward / backward --------------------------------------------------

    @property
    def action_std(self) -> float:
        clamped = np.clip(self.log_std, self.config.log_std_min, self.config.log_std_max)
        return float(np.exp(clamped))

    def assemble_state(self, flat_obs: dict[str, np.ndarray], mode: str = "eval",
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, PolicyCache]:
        cache = PolicyCache()
        chunks = []
        squeezed = None
        for name in self.config.branches:
            x = np.asarray(flat_obs[name], dtype=np.float64)
            if squeezed is None:
                squeezed = x.ndim == 1
            out, bcache = nn.forward(self.branches[name], x, mode=mode, rng=rng)
            out = np.atleast_2d(out)
            cache.branch_caches[name] = bcache
            cache.branch_outputs[name] = out
            chunks.append(out * self.branch_weights[name])
        state = np.concatenate(chunks, axis=1)
        cache.state = state
        cache.squeezed = bool(squeezed)
        return (state[0] if squeezed else state), cache

    def forward(self, flat_obs: dict[str, np.ndarray], mode: str = "eval",
                rng: np.random.Generator | None = None) -> tuple[PolicyOutput, PolicyCache]:
        state, cache = self.assemble_state(flat_obs, mode=mode, rng=rng)
        state2d = np.atleast_2d(state)
        mean, pcache = nn.forward(self.policy_trunk, state2d, mode=mode, rng=rng)
        value, vcache = nn.forward(self.value_trunk, state2d, mode=mode, rng=rng)
        cache.policy_cache = pcache
        cache.value_cache = vcache
        mean = mean[:, 0]
        value = value[:, 0]
        if cache.squeezed:
            mean, value = mean[0], value[0]
        return PolicyOutput(mean, self.action_std, value), cache

    def backward(self, cache: PolicyCache, d_mean, d_value,
                 d_log_std: float = 0.0) -> list[np.ndarray]:
        """Gradients of a scalar loss given its derivatives w.r.t. the action
        mean, the value estimate, and the (raw) log-std. Output order matches
        ``parameters()``."""
        d_mean = np.atleast_1d(np.asarray(d_mean, dtype=np.float64))[:, None]
        d_value = np.atleast_1d(np.asarray(d_value, dtype=np.float64))[:, None]
        p_grads, d_state_p = nn.backward(self.policy_trunk, cache.policy_cache, d_mean)
        v_grads, d_state_v = nn.backward(self.value_trunk, cache.value_cache, d_value)
        d_state = np.atleast_2d(d_state_p) + np.atleast_2d(d_state_v)

        grads: list[np.ndarray] = []
        offset = 0
        width = self.config.branch_out
        for name in self.config.branches:
            d_chunk = d_state[:, offset:offset + width]
            offset += width
            b_out = cache.branch_outputs[name]
            d_branch_out = d_chunk * self.branch_weights[name]
            b_grads, _ = nn.backward(self.branches[name], cache.branch_caches[name],
                                     d_branch_out)
            grads.extend(b_grads)
            grads.append((d_chunk * b_out).sum(axis=0))
        grads.extend(p_grads)
        grads.extend(v_grads)

        # Clamped log-std saturates: no gradient outside the bounds.
        raw = float(self.log_std)
        inside = self.config.log_std_min < raw < self.config.log_std_max
        grads.append(np.array(d_log_std if inside else 0.0, dtype=np.float64))
        return grads


def gaussian_log_prob(u, mean, std: float):
    """Normal log-density at the pre-clip draw u."""
    z = (np.asarray(u, dtype=np.float64) - mean) / std
    return -0.5 * LOG2PI - math.log(std) - 0.5 * z * z


def gaussian_entropy(std: float) -> float:
    return 0.5 * (LOG2PI + 1.0) + math.log(std)


def sample_action(out: PolicyOutput, rng: np.random.Generator):
    """Draw u ~ N(mean, std); the environment action is u clipped to [-1, 1].

    Returns (action, u, log_prob) where log_prob is the density of the
    pre-clip draw, so ratios stay well-defined after saturation.
    """
    u = out.action_mean + out.action_std * rng.standard_normal(np.shape(out.action_mean))
    action = np.clip(u, -1.0, 1.0)
    return action, u, gaussian_log_prob(u, out.action_mean, out.action_std)


def log_prob_and_entropy(out: PolicyOutput, u):
    """Log-density of the stored pre-clip draw plus the closed-form entropy."""
    return gaussian_log_prob(u, out.action_mean, out.action_std), \
        gaussian_entropy(out.action_std)
