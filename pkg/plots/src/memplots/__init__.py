from .figures import FigureSpec, PlotError, render

__all__ = ["FigureSpec", "PlotError", "render"]
