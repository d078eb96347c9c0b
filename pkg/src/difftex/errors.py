"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class DifftexError(Exception):
    """Base error carrying enough context for a useful CLI diagnostic.

    Args:
        message: Human readable description of the failure.
        module: Pipeline module that raised the error.
        polygon: Index of the polygon being processed, if any.
        hint: Suggested remedy shown to the user.
    """

    module = "difftex"

    def __init__(self, message: str, *, module: str | None = None,
                 polygon: int | None = None, hint: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module
        self.polygon = polygon
        self.hint = hint

    def diagnostic(self) -> str:
        parts = [f"[{self.module}]"]
        if self.polygon is not None:
            parts.append(f"polygon {self.polygon}:")
        parts.append(str(self))
        if self.hint:
            parts.append(f"(hint: {self.hint})")
        return " ".join(parts)


class SceneError(DifftexError):
    """Invalid or unreadable input scene."""

    module = "scene_io"


class GeometryError(DifftexError):
    module = "camera_geometry"


class FilterError(DifftexError):
    """Every input photo was rejected by the photo filter."""

    module = "preprocess"

    def __init__(self, message: str, report=None, **kwargs):
        super().__init__(message, **kwargs)
        self.report = report


class OptimizationError(DifftexError):
    module = "optimizer"
