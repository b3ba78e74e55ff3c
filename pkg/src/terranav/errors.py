"""Exception hierarchy shared by all terranav modules."""


class TerranavError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class DomainError(TerranavError, ValueError):
    """A query or input falls outside the valid domain of an operation."""


class ConfigurationError(TerranavError, ValueError):
    pass


class LoadError(TerranavError):
    """A data file could not be parsed."""


class NoIntersectionError(TerranavError):
    pass


class InvalidOriginError(TerranavError):
    pass


class ProjectionError(DomainError):
    """A camera-frame ray falls outside the image."""


class UntrackableFeatureError(TerranavError):
    pass


class LostFeatureError(TerranavError):
    pass


class DegenerateFeatureError(TerranavError):
    pass


class DegenerateGeometryError(TerranavError):
    pass


class InsufficientConstraintsError(TerranavError):
    pass


class RobustCollapseError(TerranavError):
    pass


class NumericalFailureError(TerranavError):
    pass


class JacobianEvaluationError(NumericalFailureError):
    pass


class DegenerateScenarioError(TerranavError):
    pass
