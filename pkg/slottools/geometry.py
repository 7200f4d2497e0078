#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
Objects in a synthetic scene are simple geometric shapes laid on the
H x W token grid: axis-aligned rectangles and rotated ellipses. This module
rasterises those shapes into boolean masks over the N = H * W grid
positions (row-major), tests masks for overlap and splits a mask into
bands, which is how a single object is given several appearances.

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
from typing import List
from typing import Tuple
from typing import Union

import numpy as np
from numba import jit

logger = logging.getLogger(__name__)

SHAPES = ("rectangle", "ellipse")


class GeometryError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


def grid_coordinates(height: int, width: int) -> np.ndarray:
    """
    Cell centres of an H x W grid as an N x 2 matrix of (x, y) = (column, row), row-major.
    """
    if height < 1 or width < 1:
        raise GeometryError(f"Grid must be at least 1 x 1, got {height} x {width}")
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)


def rectangle_mask(height: int, width: int, top: int, left: int, box_height: int, box_width: int) -> np.ndarray:
    """
    Boolean N-vector, true for cells of the box [top, top + box_height) x [left, left + box_width).

    Raises
    ------
    GeometryError
        Box is empty or extends beyond the grid
    """
    if box_height < 1 or box_width < 1:
        raise GeometryError(f"Rectangle must be at least 1 x 1, got {box_height} x {box_width}")
    if top < 0 or left < 0 or top + box_height > height or left + box_width > width:
        raise GeometryError(f"Rectangle at ({top}, {left}) of size {box_height} x {box_width} leaves the grid")
    mask = np.zeros((height, width), dtype=bool)
    mask[top : top + box_height, left : left + box_width] = True
    return mask.ravel()


@jit(nopython=True)
def inside_ellipse(
    data: np.array,
    center: Tuple[float, float],
    width: Union[int, float],
    height: Union[int, float],
    angle: Union[int, float],
) -> np.ndarray:
    """
    Return mask of two-dimensional matrix specifying if a data point (row) falls
    within an ellipse

    Parameters
    -----------
    data: numpy.ndarray
        two-dimensional matrix (x,y)
    center: tuple
        x,y coordinate corresponding to center of ellipse
    width: int or float
        full extent along the (rotated) x axis
    height: int or float
        full extent along the (rotated) y axis
    angle: int or float
        rotation in degrees

    Returns
    --------
    numpy.ndarray
        Boolean vector, one entry per row of data
    """
    cos_angle = np.cos(np.radians(180.0 - angle))
    sin_angle = np.sin(np.radians(180.0 - angle))
    xc = data[:, 0] - center[0]
    yc = data[:, 1] - center[1]
    xct = xc * cos_angle - yc * sin_angle
    yct = xc * sin_angle + yc * cos_angle
    rad_cc = (xct**2 / (width / 2.0) ** 2) + (yct**2 / (height / 2.0) ** 2)
    return rad_cc <= 1.0


def ellipse_mask(
    height: int, width: int, center: Tuple[float, float], axes: Tuple[float, float], angle: float = 0.0
) -> np.ndarray:
    """
    Boolean N-vector of grid cells whose centre falls inside an ellipse.

    Parameters
    ----------
    height: int
    width: int
    center: Tuple[float, float]
        (x, y) in cell units
    axes: Tuple[float, float]
        Full width and height of the ellipse
    angle: float (default=0.0)
        Rotation in degrees

    Returns
    -------
    numpy.ndarray
    """
    if axes[0] <= 0 or axes[1] <= 0:
        raise GeometryError(f"Ellipse axes must be positive, got {axes}")
    coords = grid_coordinates(height, width)
    return np.asarray(
        inside_ellipse(coords, (float(center[0]), float(center[1])), float(axes[0]), float(axes[1]), float(angle)),
        dtype=bool,
    )


def masks_overlap(mask: np.ndarray, others: List[np.ndarray]) -> bool:
    return any(np.any(mask & other) for other in others)


def split_into_bands(mask: np.ndarray, height: int, width: int, n_bands: int) -> List[np.ndarray]:
    """
    Split the cells of a mask into n_bands contiguous, near-equal groups ordered along the
    mask's longer axis (ties broken by the other axis). Fewer bands are returned when the
    mask has fewer cells than n_bands.

    Returns
    -------
    List[numpy.ndarray]
        Disjoint boolean N-vectors whose union is the mask
    """
    cells = np.flatnonzero(mask)
    if cells.size == 0:
        return []
    rows, cols = np.divmod(cells, width)
    row_extent = rows.max() - rows.min()
    col_extent = cols.max() - cols.min()
    order = np.lexsort((rows, cols)) if col_extent > row_extent else np.lexsort((cols, rows))
    bands = []
    for chunk in np.array_split(cells[order], min(n_bands, cells.size)):
        band = np.zeros(height * width, dtype=bool)
        band[chunk] = True
        bands.append(band)
    return bands
