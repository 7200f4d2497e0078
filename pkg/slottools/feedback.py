"""
Progress feedback for long loops (training steps, evaluation scenes, ablation
runs) and aligned text rendering of result tables.
"""
from typing import Iterable
from typing import Optional

import pandas as pd
from IPython import get_ipython
from tqdm import tqdm
from tqdm import tqdm_notebook


class _SilentBar:
    """Stand-in for a manual tqdm bar when feedback is switched off."""

    def update(self, n: int = 1):
        pass

    def set_postfix(self, *args, **kwargs):
        pass

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def which_environment() -> str:
    """
    Test if module is being executed in the Jupyter environment.

    Returns
    -------
    str
        'jupyter', 'ipython' or 'terminal'
    """
    try:
        ipy_str = str(type(get_ipython()))
    except NameError:
        return "terminal"
    if "zmqshell" in ipy_str:
        return "jupyter"
    if "terminal" in ipy_str:
        return "ipython"
    return "terminal"


def progress_bar(x: Optional[Iterable] = None, verbose: bool = True, **kwargs):
    """
    Generate a progress bar using the tqdm library. If execution environment is Jupyter, return tqdm_notebook
    otherwise use tqdm.

    Parameters
    -----------
    x: iterable, optional
        Iterable to wrap; when omitted a manual bar is returned (pass 'total' and call update)
    verbose: bool, (default=True)
        Provide feedback (if False, x is returned unwrapped or a silent manual bar)
    kwargs:
        additional keyword arguments for tqdm

    Returns
    -------
        tqdm or tqdm_notebook, depending on environment
    """
    if not verbose:
        return x if x is not None else _SilentBar()
    bar = tqdm_notebook if which_environment() == "jupyter" else tqdm
    return bar(x, **kwargs) if x is not None else bar(**kwargs)


def format_table(table: pd.DataFrame, float_format: str = "{:.4f}") -> str:
    """Aligned plain-text rendering of a results table."""
    return table.to_string(index=False, float_format=float_format.format)
