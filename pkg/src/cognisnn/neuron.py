"""Leaky integrate-and-fire neuron: charge, Heaviside fire, soft reset.

The per-step functions (:func:`charge`, :func:`fire`, :func:`soft_reset`,
:func:`step`) are built from recorded tensor primitives. :func:`lif_multistep`
runs the same recurrence over a whole ``[T, ...]`` current sequence as a single
recorded op with a hand-written BPTT rule; the network uses it for speed and
the tests hold it equal to the per-step composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidArgumentError
from .tensor import Tensor, as_tensor, make_result, unary

SURROGATES = ("arctan", "rectangular")


@dataclass(frozen=True)
class NeuronConfig:
    v_threshold: float = 1.0
    tau: float = 2.0
    surrogate_kind: str = "arctan"
    surrogate_width: float = 2.0

    def __post_init__(self):
        if not self.v_threshold > 0:
            raise InvalidArgumentError(f"v_threshold must be positive, got {self.v_threshold}")
        if not (self.tau > 1 and math.isfinite(self.tau)):
            raise InvalidArgumentError(f"tau must be finite and > 1, got {self.tau}")
        if self.surrogate_kind not in SURROGATES:
            raise InvalidArgumentError(f"surrogate_kind must be one of {SURROGATES}, got {self.surrogate_kind!r}")
        if not self.surrogate_width > 0:
            raise InvalidArgumentError(f"surrogate_width must be positive, got {self.surrogate_width}")


@dataclass
class NeuronState:
    """Membrane potential after the last reset; ``None`` means resting (all zeros)."""

    membrane: Tensor | None = None


def surrogate_primitive(x: np.ndarray, config: NeuronConfig) -> np.ndarray:
    """Smooth stand-in for the Heaviside step, used as the forward in smooth mode."""
    a = config.surrogate_width
    if config.surrogate_kind == "arctan":
        return np.arctan(0.5 * np.pi * a * x) / np.pi + 0.5
    return np.clip(x / a + 0.5, 0.0, 1.0)


def surrogate_derivative(x: np.ndarray, config: NeuronConfig) -> np.ndarray:
    a = config.surrogate_width
    if config.surrogate_kind == "arctan":
        return a / (2.0 * (1.0 + (0.5 * np.pi * a * x) ** 2))
    return np.where(np.abs(x) < 0.5 * a, 1.0 / a, 0.0)


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x >= 0).astype(np.float64)


def charge(state: NeuronState, input_current, config: NeuronConfig) -> Tensor:
    """H[t] = V[t-1] + (C[t] - V[t-1]) / tau."""
    current = as_tensor(input_current)
    if state.membrane is None:
        return current * (1.0 / config.tau)
    if state.membrane.shape != current.shape:
        raise DimensionError(f"membrane {state.membrane.shape} vs current {current.shape}")
    return state.membrane + (current - state.membrane) * (1.0 / config.tau)


def fire(h, config: NeuronConfig, smooth: bool = False) -> Tensor:
    """Spikes where ``h >= v_threshold``; the recorded derivative is the surrogate's."""
    h = as_tensor(h)
    x = h.data - config.v_threshold
    value = surrogate_primitive(x, config) if smooth else heaviside(x)
    return unary(h, value, surrogate_derivative(x, config), "fire")


def soft_reset(h, s, config: NeuronConfig) -> Tensor:
    """V[t] = H[t] - v_threshold * S[t]."""
    return as_tensor(h) - as_tensor(s) * config.v_threshold


def step(state: NeuronState, input_current, config: NeuronConfig,
         smooth: bool = False) -> tuple[Tensor, NeuronState]:
    h = charge(state, input_current, config)
    s = fire(h, config, smooth)
    return s, NeuronState(soft_reset(h, s, config))


def lif_multistep(currents: Tensor, config: NeuronConfig, smooth: bool = False) -> Tensor:
    """Run the neuron over axis 0 of ``currents[T, ...]`` from rest; returns spikes[T, ...]."""
    c = currents.data
    steps = c.shape[0]
    inv_tau = 1.0 / config.tau
    v_thr = config.v_threshold
    spikes = np.empty_like(c)
    slopes = np.empty_like(c)
    v = np.zeros(c.shape[1:])
    for t in range(steps):
        h = v + (c[t] - v) * inv_tau
        x = h - v_thr
        s = surrogate_primitive(x, config) if smooth else heaviside(x)
        slopes[t] = surrogate_derivative(x, config)
        spikes[t] = s
        v = h - v_thr * s

    def backward_fn(g):
        g_c = np.empty_like(c)
        g_v = np.zeros(c.shape[1:])
        for t in range(steps - 1, -1, -1):
            g_h = g[t] * slopes[t] + g_v * (1.0 - v_thr * slopes[t])
            g_c[t] = g_h * inv_tau
            g_v = g_h * (1.0 - inv_tau)
        return (g_c,)

    return make_result(spikes, (currents,), backward_fn, "lif")
