"""Exception hierarchy.

Every error raised deliberately by the package derives from :class:`QlaError`
so that the CLI can map domain failures to exit code 1.
"""


class QlaError(Exception):
    """Base class for domain errors."""


class ModelEvaluationError(QlaError):
    """A drift or diffusion callback returned a non-finite value."""


class EllipticityError(QlaError):
    """B = b b^T is singular or not positive definite."""


class UnknownModelError(QlaError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SimulationExplosionError(QlaError):
    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"non-finite state at fine step {self.step}")


class LossClassError(QlaError):
    """A loss function left the admissible class (e.g. negative value)."""


class A5NotSatisfiedError(QlaError):
    pass


class DomainError(QlaError):
    """A parameter lies outside its box."""


class OptimizationError(QlaError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NotErgodicError(QlaError):
    pass


class IdentifiabilityError(QlaError):
    pass


class EvaluationError(QlaError):
    pass


class PreconditionError(QlaError, ValueError):
    pass
