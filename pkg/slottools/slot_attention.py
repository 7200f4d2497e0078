#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Bottom-up slot attention. K slots, sampled from a learnable Gaussian, compete
for N input features: attention logits are normalised across the slot axis
(so every feature is shared out between slots), re-normalised across
positions to give a weighted mean of the value-projected features per slot,
and the slots are refined with a GRU followed by a residual MLP. This is
repeated T times.

The same SlotAttentionParams instance (and the same initial slots) is used
by the self-modulating second pass in slottools.top_down, which reuses
`iterate` with a modulation map.

Copyright 2020 Ross Burton

Permission is hereby granted, free of charge, to any person
obtaining a copy of this software and associated documentation
files (the "Software"), to deal in the Software without restriction,
including without limitation the rights to use, copy, modify,
merge, publish, distribute, sublicense, and/or sell copies of the
Software, and to permit persons to whom the Software is furnished
to do so, subject to the following conditions:
The above copyright notice and this permission notice shall be included
in all copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND,
EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF
MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT.
IN NO EVENT SHALL THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY
CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION OF CONTRACT,
TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE
SOFTWARE OR THE USE OR OTHER DEALINGS IN THE SOFTWARE.
"""
import logging
from dataclasses import dataclass
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .autodiff import Tensor
from .layers import GRUCell
from .layers import LayerNorm
from .layers import Linear
from .layers import MLP
from .layers import Module

logger = logging.getLogger(__name__)

BOTTOM_UP = "bottom_up"
MODULATED = "modulated"


class SlotAttentionError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


@dataclass
class SlotState:
    """
    Slots (K x D) after 'iteration' updates of the given pass ('bottom_up' or 'modulated').
    """

    slots: Tensor
    iteration: int
    pass_kind: str = BOTTOM_UP

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]


@dataclass
class AttentionMap:
    """
    Attributes
    ----------
    A: Tensor
        K x N, softmax over the slot axis (every column sums to one)
    A_tilde: Tensor
        K x N, A re-normalised over positions (every row sums to one)
    """

    A: Tensor
    A_tilde: Tensor


@dataclass
class EncodedInputs:
    """Adapted and layer-normed features with their key and value projections (shared by both passes)."""

    features: Tensor
    keys: Tensor
    values: Tensor

    @property
    def n_positions(self) -> int:
        return self.features.shape[0]


class SlotInitDistribution(Module):
    """
    Learnable diagonal Gaussian over initial slots.

    Parameters
    ----------
    dim: int
    init_sigma: float (default=1.0)
        Initial standard deviation, exp(log_sigma)
    """

    def __init__(self, dim: int, init_sigma: float = 1.0):
        self.mu = Parameter("mu", np.zeros(dim))
        self.log_sigma = Parameter("log_sigma", np.full(dim, np.log(init_sigma)))


class SlotAttentionParams(Module):
    """
    The single set of slot-attention weights; both passes read this instance.

    Parameters
    ----------
    feature_dim: int
        D_feat, dimension of the input features
    dim: int
        D = d_h, slot and attention dimension
    mlp_hidden: int
        Hidden width of the residual update MLP
    rng: numpy.random.Generator
    activation: str (default="gelu")
    """

    def __init__(self, feature_dim: int, dim: int, mlp_hidden: int, rng: np.random.Generator, activation: str = "gelu"):
        self.input_adapter = Linear(feature_dim, dim, rng)
        self.input_norm = LayerNorm(dim)
        self.slot_norm = LayerNorm(dim)
        self.q_proj = Linear(dim, dim, rng, bias=False)
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.v_proj = Linear(dim, dim, rng, bias=False)
        self.gru = GRUCell(dim, dim, rng)
        self.pre_mlp_norm = LayerNorm(dim)
        self.update_mlp = MLP(dim, mlp_hidden, dim, rng, activation=activation)
        self.dim = dim


def encode_inputs(params: SlotAttentionParams, x: Union[Tensor, np.ndarray]) -> EncodedInputs:
    """
    Map N x D_feat features to the slot dimension and layer-norm them (once per forward), then
    project to keys and values.

    Raises
    ------
    SlotAttentionError
        No positions
    """
    x = ad.as_tensor(x)
    if x.values.ndim != 2 or x.shape[0] == 0:
        raise SlotAttentionError(f"Expected a non-empty N x D_feat feature grid, got shape {x.shape}")
    features = params.input_norm(params.input_adapter(x))
    return EncodedInputs(features=features, keys=params.k_proj(features), values=params.v_proj(features))


def init_slots(
    dist: SlotInitDistribution, n_slots: int, rng: Union[int, np.random.Generator, None] = None
) -> SlotState:
    """
    Sample K initial slots with the reparameterisation trick: mu + exp(log_sigma) * eps.

    Parameters
    ----------
    dist: SlotInitDistribution
    n_slots: int
    rng: int or numpy.random.Generator, optional
        Seed or generator for eps ~ N(0, I)

    Returns
    -------
    SlotState

    Raises
    ------
    SlotAttentionError
        n_slots < 1
    """
    if n_slots < 1:
        raise SlotAttentionError(f"Number of slots must be >= 1, got {n_slots}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    noise = ad.constant(rng.standard_normal((n_slots, dist.mu.shape[0])))
    sigma = ad.expand(ad.exp(dist.log_sigma), n_slots)
    slots = ad.add(ad.expand(dist.mu, n_slots), ad.mul(sigma, noise))
    return SlotState(slots=slots, iteration=0, pass_kind=BOTTOM_UP)


def _attend(
    params: SlotAttentionParams, inputs: EncodedInputs, slots: Tensor, modulation: Optional[Tensor] = None
) -> Tuple[AttentionMap, Tensor]:
    n_slots, n = slots.shape[0], inputs.n_positions
    q = params.q_proj(params.slot_norm(slots))
    logits = ad.scale(ad.matmul(q, ad.transpose(inputs.keys)), 1.0 / np.sqrt(params.dim))
    attn = ad.softmax(logits, axis=0)
    attn_tilde = ad.normalize(attn, axis=1)
    values = ad.expand(inputs.values, n_slots)
    if modulation is not None:
        values = ad.mul(modulation, values)
    updates = ad.matmul(ad.reshape(attn_tilde, (n_slots, 1, n)), values)
    return AttentionMap(A=attn, A_tilde=attn_tilde), ad.reshape(updates, (n_slots, params.dim))


def attention_step(params: SlotAttentionParams, inputs: EncodedInputs, slots: Tensor) -> Tuple[AttentionMap, Tensor]:
    """
    One round of competitive attention.

    P = q(norm(S)) k(x)^T / sqrt(d_h); A = softmax of P over slots; A_tilde = A normalised over
    positions; U = A_tilde v(x).

    Parameters
    ----------
    params: SlotAttentionParams
    inputs: EncodedInputs
        Output of encode_inputs
    slots: Tensor
        K x D

    Returns
    -------
    Tuple[AttentionMap, Tensor]
        Attention map and the K x D update U
    """
    return _attend(params, inputs, slots)


def slot_update(params: SlotAttentionParams, updates: Tensor, prev: SlotState) -> SlotState:
    """
    S' = GRU(input=U, hidden=S); S_new = S' + MLP(norm(S')).

    Parameters
    ----------
    params: SlotAttentionParams
    updates: Tensor
        K x D
    prev: SlotState

    Returns
    -------
    SlotState
    """
    if updates.shape != prev.slots.shape:
        raise SlotAttentionError(f"Update shape {updates.shape} does not match slots {prev.slots.shape}")
    gru_out = params.gru(updates, prev.slots)
    slots = ad.add(gru_out, params.update_mlp(params.pre_mlp_norm(gru_out)))
    return SlotState(slots=slots, iteration=prev.iteration + 1, pass_kind=prev.pass_kind)


def iterate(
    params: SlotAttentionParams,
    inputs: EncodedInputs,
    initial: SlotState,
    n_iter: int,
    modulation: Optional[Tensor] = None,
    pass_kind: str = BOTTOM_UP,
) -> Tuple[SlotState, AttentionMap]:
    """
    Run n_iter attention + update rounds, optionally rescaling the expanded values (K x N x D)
    by a fixed modulation map. Returns the final slots and the attention map of the last round.
    """
    if n_iter < 1:
        raise SlotAttentionError(f"Number of iterations must be >= 1, got {n_iter}")
    state = SlotState(slots=initial.slots, iteration=0, pass_kind=pass_kind)
    attention = None
    for _ in range(n_iter):
        attention, updates = _attend(params, inputs, state.slots, modulation)
        state = slot_update(params, updates, state)
        if not np.all(np.isfinite(state.slots.values)):
            raise SlotAttentionError(f"Non-finite slots after iteration {state.iteration} of the {pass_kind} pass")
    return state, attention


def run_bottom_up(
    params: SlotAttentionParams, inputs: EncodedInputs, initial: SlotState, n_iter: int = 3
) -> Tuple[SlotState, AttentionMap]:
    """
    Vanilla slot attention: update the initial slots T times.

    Parameters
    ----------
    params: SlotAttentionParams
    inputs: EncodedInputs
    initial: SlotState
        S^0
    n_iter: int (default=3)

    Returns
    -------
    Tuple[SlotState, AttentionMap]
        S^T and the attention map of the final iteration (the spatial cue for the top-down pathway)
    """
    return iterate(params, inputs, initial, n_iter, modulation=None, pass_kind=BOTTOM_UP)
