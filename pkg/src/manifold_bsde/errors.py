"""Exception types raised across the package."""


class ManifoldBSDEError(Exception):
    """Base class for all package errors."""


class OutsideTube(ManifoldBSDEError):
    """Point too far from the manifold for the nearest-point projection to be unique."""


class NotOnManifold(ManifoldBSDEError):
    """An operation requiring an on-manifold point received one off the manifold."""


class NotTangent(ManifoldBSDEError):
    """A vector expected to be tangent has a normal component above tolerance."""


class InitialDataOffManifold(ManifoldBSDEError):
    """Initial map evaluates off the manifold beyond the admissible roundoff budget."""


class CflViolated(ManifoldBSDEError):
    """Requested time step exceeds the stability bound of the chosen scheme."""


class NodeLeftTube(ManifoldBSDEError):
    """A grid node left the projection tube during a penalized step."""

    def __init__(self, node_index, time, distance):
        self.node_index = node_index
        self.time = time
        self.distance = distance
        super().__init__(
            f"node {node_index} at t={time:.6g} left the tube (dist={distance:.6g})"
        )


class ProjectionOutsideTube(ManifoldBSDEError):
    """A node drifted beyond the projection tube within one intrinsic step."""


class Diverged(ManifoldBSDEError):
    """Field norm exceeded the divergence guard."""


class GridMismatch(ManifoldBSDEError):
    """Trajectory and Brownian path do not cover the same time horizon."""


class InsufficientPaths(ManifoldBSDEError):
    """Martingale statistics need at least 100 independent paths."""


class DegenerateTime(ManifoldBSDEError):
    """Heat kernel evaluated at (or too close to) its singular time."""


class WindowOutOfRange(ManifoldBSDEError):
    """Parabolic window extends outside the trajectory's time range."""


class ConfigInvalid(ManifoldBSDEError):
    """Experiment configuration failed validation."""


class NotFound(ManifoldBSDEError):
    """Unknown benchmark or registry id."""
