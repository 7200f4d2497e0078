#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
The top-down pathway. Slots from a bottom-up pass are mapped to their
nearest code in a learned codebook ("what"), and the pass's final attention
rows are shifted to have mean one ("where"). An MLP on the code gives a
channel-wise modulation vector; its outer product with the spatial vector
gives one N x D modulation map per slot, which rescales the value features
during a second, self-modulating pass of slot attention that shares all
weights and the initial slots with the first.

Gradients of the quantised slots flow back to the continuous slots with the
straight-through estimator; codebook rows only learn from the vector
quantisation loss.

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
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.neighbors import NearestNeighbors

from . import autodiff as ad
from .autodiff import Parameter
from .autodiff import Tensor
from .layers import MLP
from .layers import Module
from .slot_attention import AttentionMap
from .slot_attention import EncodedInputs
from .slot_attention import iterate
from .slot_attention import MODULATED
from .slot_attention import SlotAttentionParams
from .slot_attention import SlotState

logger = logging.getLogger(__name__)


class TopDownError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


class Codebook(Module):
    """
    E x D learnable codes plus usage counters for the current logging window.

    Parameters
    ----------
    size: int
        E, must be >= 2
    dim: int
    rng: numpy.random.Generator
    init_sigma: float (default=1.0)
        Codes are drawn i.i.d. from N(0, init_sigma^2), the scale of the initial slot distribution

    Attributes
    ----------
    codes: Parameter
    usage_counts: numpy.ndarray
        Integer counts of how often each code was selected since the last reset
    """

    def __init__(self, size: int, dim: int, rng: np.random.Generator, init_sigma: float = 1.0):
        if size < 2:
            raise TopDownError(f"Codebook size must be >= 2, got {size}")
        self.codes = Parameter("codes", rng.normal(0.0, init_sigma, size=(size, dim)))
        self.usage_counts = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    def record_usage(self, indices: Sequence[int]):
        np.add.at(self.usage_counts, np.asarray(indices, dtype=np.int64), 1)

    def reset_usage(self):
        self.usage_counts = np.zeros(self.size, dtype=np.int64)


@dataclass
class QuantizedSlots:
    """
    Attributes
    ----------
    codes_selected: Tensor
        K x D; forward value is the selected code rows, gradient passes straight through to the slots
    codes_for_loss: Tensor
        K x D; the same values gathered from the codebook, differentiable w.r.t. the codes only
    indices: numpy.ndarray
        K selected code indices
    """

    codes_selected: Tensor
    codes_for_loss: Tensor
    indices: np.ndarray


@dataclass
class ModulationMap:
    """
    Attributes
    ----------
    m_c: Tensor
        K x D channel-wise modulation vectors
    m_s: Tensor
        K x N spatial-wise modulation vectors
    M: Tensor
        K x N x D, M[k] = outer(m_s[k], m_c[k])
    """

    m_c: Tensor
    m_s: Tensor
    M: Tensor


def nearest_codes(slots: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """
    Index of the nearest code (squared Euclidean distance) for every slot; ties go to the lowest index.
    """
    d2 = np.sum((slots[:, None, :] - codes[None, :, :]) ** 2, axis=-1)
    ad.record_macs(slots.shape[0] * codes.shape[0] * codes.shape[1])
    return np.argmin(d2, axis=1)


def quantize(slots: Tensor, codebook: Codebook) -> QuantizedSlots:
    """
    Map each slot to its nearest code.

    Parameters
    ----------
    slots: Tensor
        K x D
    codebook: Codebook

    Returns
    -------
    QuantizedSlots

    Raises
    ------
    TopDownError
        Empty codebook or dimension mismatch
    """
    codes = codebook.codes
    if codes.values.ndim != 2 or codes.shape[0] == 0:
        raise TopDownError("Cannot quantize against an empty codebook")
    if slots.shape[-1] != codes.shape[1]:
        raise TopDownError(f"Slot dimension {slots.shape} does not match codebook {codes.shape}")
    indices = nearest_codes(slots.values, codes.values)
    return QuantizedSlots(
        codes_selected=ad.straight_through(slots, codes.values[indices]),
        codes_for_loss=ad.gather_rows(codes, indices),
        indices=indices,
    )


def channel_modulation(codes: Union[QuantizedSlots, Tensor], mlp: MLP) -> Tensor:
    """
    m_c[k] = MLP(c*_k). A raw K x D tensor may be given instead of QuantizedSlots (no quantisation).
    """
    if isinstance(codes, QuantizedSlots):
        codes = codes.codes_selected
    return mlp(codes)


def spatial_modulation(a: Union[AttentionMap, Tensor]) -> Tensor:
    """
    m_s[k] = 1 + (a_k - mean(a_k)), so every row has mean one.

    Parameters
    ----------
    a: AttentionMap or Tensor
        K x N slot-normalised attention rows (A of the final bottom-up iteration)

    Returns
    -------
    Tensor
        K x N
    """
    if isinstance(a, AttentionMap):
        a = a.A
    n = a.shape[1]
    centred = ad.sub(a, ad.expand(ad.mean(a, axis=1), n, axis=1))
    return ad.add(centred, ad.ones(a.shape))


def build_modulation_map(m_c: Tensor, m_s: Tensor) -> ModulationMap:
    """
    M[k][n][d] = m_s[k][n] * m_c[k][d].

    Raises
    ------
    TopDownError
        Slot counts differ
    """
    if m_c.values.ndim != 2 or m_s.values.ndim != 2 or m_c.shape[0] != m_s.shape[0]:
        raise TopDownError(f"Cannot combine channel modulation {m_c.shape} with spatial modulation {m_s.shape}")
    return ModulationMap(m_c=m_c, m_s=m_s, M=ad.outer(m_s, m_c))


def run_modulated(
    params: SlotAttentionParams,
    inputs: EncodedInputs,
    initial: SlotState,
    modulation: Union[ModulationMap, Tensor],
    n_iter: int = 3,
) -> Tuple[SlotState, AttentionMap]:
    """
    Self-modulating slot attention: the standard iteration, except that each slot aggregates
    u_k = A_tilde_k (M_k * v(x)). M is fixed across all iterations.

    Parameters
    ----------
    params: SlotAttentionParams
        The same instance used for the bottom-up pass
    inputs: EncodedInputs
    initial: SlotState
        The same initial slots as the bottom-up pass
    modulation: ModulationMap or Tensor
        K x N x D map
    n_iter: int (default=3)

    Returns
    -------
    Tuple[SlotState, AttentionMap]
        Modulated slots and the attention map of the final iteration

    Raises
    ------
    TopDownError
        Modulation map shape is not (K, N, D)
    """
    M = modulation.M if isinstance(modulation, ModulationMap) else modulation
    expected = (initial.n_slots, inputs.n_positions, params.dim)
    if M.shape != expected:
        raise TopDownError(f"Modulation map has shape {M.shape}, expected {expected}")
    return iterate(params, inputs, initial, n_iter, modulation=M, pass_kind=MODULATED)


def perplexity(usage_counts: Sequence[int]) -> float:
    """
    Exponent of the entropy of the empirical code usage distribution (0 ln 0 := 0).

    Parameters
    ----------
    usage_counts: Sequence[int]

    Returns
    -------
    float
        Between 1 and the number of codes

    Raises
    ------
    TopDownError
        Counts sum to zero
    """
    counts = np.asarray(usage_counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise TopDownError("Perplexity is undefined when no code has been used")
    return float(np.exp(stats.entropy(counts)))


def codebook_report(codebook: Codebook, usage_counts: Sequence[int] = None) -> pd.DataFrame:
    """
    Per-code usage and distance to the nearest other code.

    Parameters
    ----------
    codebook: Codebook
    usage_counts: Sequence[int], optional
        Defaults to the codebook's current counters

    Returns
    -------
    Pandas.DataFrame
        Columns code_index, usage_count, nearest_other_distance
    """
    usage_counts = codebook.usage_counts if usage_counts is None else np.asarray(usage_counts)
    nn = NearestNeighbors(n_neighbors=2).fit(codebook.codes.values)
    dist, _ = nn.kneighbors(codebook.codes.values)
    return pd.DataFrame(
        {
            "code_index": np.arange(codebook.size),
            "usage_count": usage_counts,
            "nearest_other_distance": dist[:, 1],
        }
    )
