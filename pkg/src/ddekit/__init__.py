"""Neural delay differential equations with adjoint gradients."""

__version__ = "0.1.0"
