"""Exception taxonomy for torflux.

Every guard in the library raises a subclass of :class:`TorfluxError`.  The
``module`` attribute names the subsystem that tripped, and ``context`` carries
machine-readable detail used by the CLI error JSON.  ``exit_code`` follows the
CLI convention: 2 configuration error, 3 numerical guard tripped, 4 internal
invariant violated.
"""

from __future__ import annotations


class TorfluxError(Exception):
    module = "torflux"
    exit_code = 3

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


# --- configuration / input validation (exit 2) ---

class ConfigError(TorfluxError):
    module = "cli"
    exit_code = 2


class SchemaError(ConfigError):
    pass


class UnknownModel(ConfigError):
    pass


class ParameterOutOfRange(ConfigError):
    pass


class InvalidParameter(TorfluxError):
    module = "field_core"
    exit_code = 2


# --- field_core guards ---

class EmptySampleSet(TorfluxError):
    module = "field_core"


class MissingMetric(TorfluxError):
    module = "field_core"


class NonInvertibleJacobian(TorfluxError):
    module = "field_core"


# --- fieldline guards ---

class TraceError(TorfluxError):
    module = "fieldline"


class TorBFieldVanishes(TraceError):
    pass


class DomainExit(TraceError):
    pass


class NewtonDivergence(TraceError):
    pass


class SingularJacobian(TraceError):
    pass


class DegenerateAxis(TraceError):
    pass


class InconsistentClassification(TraceError):
    exit_code = 4


# --- flux_actions guards ---

class NonClosedLoop(TorfluxError):
    module = "flux_actions"


class MissingPotentialAndFallbackDisabled(TorfluxError):
    module = "flux_actions"


class LevelOutOfRange(TorfluxError):
    module = "flux_actions"


# --- surface_coords guards ---

class ResonantSurface(TorfluxError):
    module = "surface_coords"


class SurfaceFitResidualTooLarge(TorfluxError):
    module = "surface_coords"


class MissingCurrentPotential(TorfluxError):
    module = "surface_coords"


class NotMHS(TorfluxError):
    module = "surface_coords"


class NotUnimodular(TorfluxError):
    module = "surface_coords"
    exit_code = 2


# --- near_axis guards ---

class EigenframeDiscontinuity(TorfluxError):
    module = "near_axis"
    exit_code = 4


class HyperbolicUnsupported(TorfluxError):
    module = "near_axis"


class NonMonotoneFlux(TorfluxError):
    module = "near_axis"


class NonvanishingPeriods(TorfluxError):
    module = "near_axis"
    exit_code = 4


class RankLoss(TorfluxError):
    module = "near_axis"


class FlowEscape(TorfluxError):
    module = "near_axis"
    exit_code = 4


class RLambdaNonpositive(TorfluxError):
    module = "near_axis"


class SingularSystem(TorfluxError):
    module = "near_axis"


# --- embedding guards ---

class EtaNotCovolume(TorfluxError):
    module = "embedding"


class EtaSurfaceCondition(TorfluxError):
    module = "embedding"


class SingularOmega(TorfluxError):
    module = "embedding"
