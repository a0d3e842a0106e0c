"""Exception hierarchy shared by the numerical services and the CLI."""


class OrbitLangevinError(Exception):
    """Base class for every error raised by this project."""


class SizeError(OrbitLangevinError, ValueError):
    """Array shapes do not match the declared dimensions."""


class DomainError(OrbitLangevinError, ValueError):
    """An operation was called outside its precondition."""


class DegenerateProjection(DomainError):
    """The nearest point is not unique (rank-deficient Procrustes, torus axis)."""


class TubeExceeded(DomainError):
    def __init__(self, distance: float, radius: float):
        self.distance = distance
        self.radius = radius
        super().__init__(f"point at distance {distance:.6g} is outside tube of radius {radius:.6g}")


class EmptyMask(DomainError):
    """Completion mask came out empty."""


class InsufficientSamples(DomainError):
    """Series too short for the requested statistic."""


class Unsupported(OrbitLangevinError):
    """Requested diagnostic is not defined for these dimensions."""


class DivergedChain(OrbitLangevinError):
    def __init__(self, step: int, norm: float):
        self.step = step
        self.norm = norm
        super().__init__(f"chain diverged at step {step} (|X|_F = {norm:.6g})")


class InitFailed(OrbitLangevinError):
    def __init__(self, grad_norm: float, eta: float, iterations: int):
        self.grad_norm = grad_norm
        self.eta = eta
        self.iterations = iterations
        super().__init__(
            f"gradient descent did not converge after {iterations} iterations "
            f"(|grad| = {grad_norm:.6g}, eta = {eta:.6g})"
        )


class UsageError(OrbitLangevinError):
    """Invalid flag combination or unreadable input; the CLI exits with 2."""
