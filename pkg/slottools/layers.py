#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Parameter containers for the layers the model is assembled from. A Module
collects the Parameters held in its attributes (recursively, including lists
of Modules) under dotted names, which is what the optimiser, checkpoints
and the weight-sharing audit iterate over.

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
from typing import Dict
from typing import Iterator
from typing import Optional
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .autodiff import Tensor

logger = logging.getLogger(__name__)

ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu}


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def assign_names(self):
        """Rename every parameter to its dotted path (used in error messages and checkpoints)."""
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Linear(Module):
    """
    Affine map d_in -> d_out (Glorot uniform weights, zero bias).

    Parameters
    ----------
    d_in: int
    d_out: int
    rng: numpy.random.Generator
    bias: bool (default=True)
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter("weight", glorot(rng, d_in, d_out))
        self.bias = Parameter("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Parameter("weight", np.ones(d))
        self.bias = Parameter("bias", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, eps=self.eps)


class MLP(Module):
    """
    Two-layer perceptron: Linear(d_in, hidden) -> activation -> Linear(hidden, d_out),
    with no output activation.

    Parameters
    ----------
    d_in: int
    hidden: int
    d_out: int
    rng: numpy.random.Generator
    activation: str (default="gelu")
        One of 'gelu' or 'relu'
    """

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, activation: str = "gelu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"Invalid activation, must be one of: {list(ACTIVATIONS.keys())}")
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ACTIVATIONS[self.activation](self.fc1(x)))


class GRUCell(Module):
    """
    GRU cell, gates ordered (reset, update, candidate); see autodiff.gru_cell.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.weight_ih = Parameter("weight_ih", glorot(rng, d_in, 3 * d_hidden))
        self.weight_hh = Parameter("weight_hh", glorot(rng, d_hidden, 3 * d_hidden))
        self.bias_ih = Parameter("bias_ih", np.zeros(3 * d_hidden))
        self.bias_hh = Parameter("bias_hh", np.zeros(3 * d_hidden))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return ad.gru_cell(x, h, self.weight_ih, self.weight_hh, self.bias_ih, self.bias_hh)


def fill_(module: Module, value: float, names: Optional[Tuple[str, ...]] = None):
    """Set every parameter of a module (or only those whose name ends with one of 'names') to a constant."""
    for name, p in module.named_parameters():
        if names is None or name.endswith(names):
            p.values = np.full(p.shape, float(value))
