"""Offline rendering of flow-toolkit CSV outputs into figure panels.

The implementation lives in :mod:`proxflow_plots.render`; import the module
directly (the package namespace stays empty so the submodule name is not
shadowed by the render() function).
"""

__version__ = "0.1.0"
