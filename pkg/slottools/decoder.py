#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Autoregressive transformer decoder. The feature sequence is shifted right by
one position behind a learnable [BOS] token, positional embeddings are added,
and a stack of pre-norm blocks (causal self-attention, cross-attention with
the slots as keys and values, feed-forward) predicts every feature from the
features before it and the slots. Reconstruction is teacher forced.

The cross-attention weights double as the predicted object masks: averaged
over blocks and heads they give, for every position, a distribution over
slots.

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
from dataclasses import field
from typing import List
from typing import Tuple
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .autodiff import Tensor
from .layers import LayerNorm
from .layers import Linear
from .layers import MLP
from .layers import Module

logger = logging.getLogger(__name__)


class DecoderError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


def causal_mask(n_heads: int, n: int) -> Tensor:
    """Additive mask, -inf strictly above the diagonal, repeated per head."""
    mask = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), -np.inf, 0.0)
    return ad.constant(np.repeat(mask[None], n_heads, axis=0))


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with n_heads heads over a width-'dim' stream.

    Parameters
    ----------
    dim: int
        Must be divisible by n_heads
    n_heads: int
    rng: numpy.random.Generator
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or dim % n_heads != 0:
            raise DecoderError(f"Width {dim} is not divisible by {n_heads} heads")
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.o_proj = Linear(dim, dim, rng)
        self.n_heads = n_heads
        self.dim = dim

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ad.swap_axes(ad.reshape(x, (n, self.n_heads, self.dim // self.n_heads)), 0, 1)

    def __call__(self, queries: Tensor, context: Tensor, causal: bool = False) -> Tuple[Tensor, Tensor]:
        """
        Parameters
        ----------
        queries: Tensor
            N x dim
        context: Tensor
            M x dim keys/values source
        causal: bool (default=False)
            Position i may only attend to context positions <= i (requires M == N)

        Returns
        -------
        Tuple[Tensor, Tensor]
            N x dim output and the h x N x M attention weights
        """
        n, m = queries.shape[0], context.shape[0]
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.dim // self.n_heads))
        if causal:
            if m != n:
                raise DecoderError(f"Causal attention needs equal query and key lengths, got {n} and {m}")
            scores = ad.add(scores, causal_mask(self.n_heads, n))
        weights = ad.softmax(scores, axis=-1)
        out = ad.reshape(ad.swap_axes(ad.matmul(weights, v), 0, 1), (n, self.dim))
        return self.o_proj(out), weights


class DecoderBlock(Module):
    """Pre-norm block: causal self-attention, cross-attention over slots, then a 4x wide feed-forward."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, activation: str = "gelu"):
        self.self_norm = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.cross_norm = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ffn_norm = LayerNorm(dim)
        self.ffn = MLP(dim, 4 * dim, dim, rng, activation=activation)

    def __call__(self, h: Tensor, slots: Tensor) -> Tuple[Tensor, Tensor]:
        normed = self.self_norm(h)
        attended, _ = self.self_attn(normed, normed, causal=True)
        h = ad.add(h, attended)
        attended, cross_weights = self.cross_attn(self.cross_norm(h), slots)
        h = ad.add(h, attended)
        h = ad.add(h, self.ffn(self.ffn_norm(h)))
        return h, cross_weights


class DecoderParams(Module):
    """
    Decoder weights.

    Parameters
    ----------
    feature_dim: int
        D_feat, also the decoder width
    slot_dim: int
        D; slots are linearly projected to D_feat when the two differ
    n_positions: int
        N, length of the learned positional embedding
    rng: numpy.random.Generator
    n_blocks: int (default=4)
    n_heads: int (default=8)
    activation: str (default="gelu")
    """

    def __init__(
        self,
        feature_dim: int,
        slot_dim: int,
        n_positions: int,
        rng: np.random.Generator,
        n_blocks: int = 4,
        n_heads: int = 8,
        activation: str = "gelu",
    ):
        if n_positions < 1:
            raise DecoderError(f"Decoder needs at least one position, got {n_positions}")
        if n_blocks < 0:
            raise DecoderError(f"Number of decoder blocks must be >= 0, got {n_blocks}")
        self.bos = Parameter("bos", rng.normal(0.0, 0.02, size=feature_dim))
        self.pos_embed = Parameter("pos_embed", rng.normal(0.0, 0.02, size=(n_positions, feature_dim)))
        self.slot_proj = Linear(slot_dim, feature_dim, rng) if slot_dim != feature_dim else None
        self.blocks = [DecoderBlock(feature_dim, n_heads, rng, activation=activation) for _ in range(n_blocks)]
        self.final_norm = LayerNorm(feature_dim)
        self.head = Linear(feature_dim, feature_dim, rng)
        self.feature_dim = feature_dim
        self.n_positions = n_positions
        self.n_heads = n_heads


@dataclass
class DecoderOutput:
    """
    Attributes
    ----------
    recon: Tensor
        N x D_feat predicted features
    cross_attn: List[numpy.ndarray]
        One h x K x N array per block; for every head and position the weights over slots sum to one
    """

    recon: Tensor
    cross_attn: List[np.ndarray] = field(default_factory=list)


def shifted_inputs(params: DecoderParams, x: Tensor) -> Tensor:
    """[BOS; x_1 .. x_{N-1}] + positional embeddings."""
    n = x.shape[0]
    bos = ad.reshape(params.bos, (1, params.feature_dim))
    seq = bos if n == 1 else ad.concat([bos, ad.slice_axis(x, 0, n - 1, axis=0)], axis=0)
    return ad.add(seq, params.pos_embed)


def decode(params: DecoderParams, x: Union[Tensor, np.ndarray], slots: Tensor) -> DecoderOutput:
    """
    Teacher-forced reconstruction of x from the slots.

    Parameters
    ----------
    params: DecoderParams
    x: Tensor or numpy.ndarray
        N x D_feat target features
    slots: Tensor
        K x D

    Returns
    -------
    DecoderOutput

    Raises
    ------
    DecoderError
        Empty sequence, or N / D_feat differ from the decoder's configuration
    """
    x = ad.as_tensor(x)
    if x.values.ndim != 2 or x.shape[0] == 0:
        raise DecoderError(f"Expected a non-empty N x D_feat feature grid, got shape {x.shape}")
    if x.shape != (params.n_positions, params.feature_dim):
        raise DecoderError(
            f"Feature grid shape {x.shape} does not match decoder ({params.n_positions}, {params.feature_dim})"
        )
    h = shifted_inputs(params, x)
    cross_attn = []
    if params.blocks:
        context = params.slot_proj(slots) if params.slot_proj is not None else slots
        for block in params.blocks:
            h, weights = block(h, context)
            cross_attn.append(np.swapaxes(weights.values, 1, 2).copy())
    recon = params.head(params.final_norm(h))
    return DecoderOutput(recon=recon, cross_attn=cross_attn)


def extract_masks(out: DecoderOutput, last_block_only: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Soft masks from the decoder's cross-attention and a hard label per position.

    Parameters
    ----------
    out: DecoderOutput
    last_block_only: bool (default=False)
        Average the heads of the final block only, instead of every block and head

    Returns
    -------
    Tuple[numpy.ndarray, numpy.ndarray]
        K x N soft masks (columns sum to one) and N labels (argmax over slots, ties to the lowest index)

    Raises
    ------
    DecoderError
        Decoder has no blocks, so no cross-attention to read
    """
    if not out.cross_attn:
        raise DecoderError("Decoder output carries no cross-attention maps")
    maps = out.cross_attn[-1] if last_block_only else np.concatenate(out.cross_attn, axis=0)
    soft = maps.mean(axis=0)
    return soft, np.argmax(soft, axis=0)
