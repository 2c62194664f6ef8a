"""Exception types shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2, PhysicsError -> 3,
GraphDisconnectedError -> 4, DivergenceError -> 5.
"""


class ConfigError(ValueError):
    """Bad or missing configuration input."""


class PhysicsError(ValueError):
    """A physically inconsistent setup (sampling, geometry) was requested."""


class PropagationError(PhysicsError):
    """A propagation step would be numerically invalid on this grid."""


class FeaturelessFieldError(ValueError):
    """Registration input carries no usable features (all zero / constant)."""


class GraphDisconnectedError(RuntimeError):
    """The accepted shift measurements do not connect all frames."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        parts = "; ".join(str(c) for c in self.components)
        super().__init__(f"position graph is disconnected: components {parts}")


class DivergenceError(RuntimeError):
    """An iterative solver left its stable regime."""


class EngineError(RuntimeError):
    """A reconstruction sweep produced an invalid (non-finite) field."""
