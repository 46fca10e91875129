"""Exception hierarchy shared by every spinekit module."""

from __future__ import annotations


class SpineError(Exception):
    """Base class for all spinekit errors."""


class GraphValidationError(SpineError):
    """Raised when an operation requires a valid graph and gets an invalid one."""

    def __init__(self, report):
        self.report = report
        lines = "; ".join(str(v) for v in report)
        super().__init__(f"invalid graph: {lines}")


class ShapeError(SpineError):
    pass


class SpecLoadError(SpineError):
    """A model spec file is missing or malformed."""


class ConfigError(SpineError):
    pass


class PlanError(SpineError):
    """A resample plan is inconsistent with the shapes it is applied to."""


class NonFiniteActivation(SpineError):
    pass
