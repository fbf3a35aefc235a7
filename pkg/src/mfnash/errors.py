"""Exception hierarchy shared by all modules."""


class MFNashError(Exception):
    """Base class for every error raised by this package."""


class CoefficientError(MFNashError):
    """A drift, diffusion or cost coefficient returned a non-finite value."""


class DivergenceError(MFNashError):
    """A simulated ensemble left the overflow guard."""

    def __init__(self, step, time, bound):
        self.step = step
        self.time = time
        self.bound = bound
        super().__init__(f"ensemble exceeded |X| > {bound:g} at step {step} (s = {time:g})")


class PairingError(MFNashError):
    """Common-random-number pairing requested with mismatched grid, M or seed."""


class GridError(MFNashError):
    """A time is not on the grid, or ensemble and cost disagree on the horizon."""


class WindowError(MFNashError):
    """A spike window is shorter than one step or runs past the horizon."""


class OdeError(MFNashError):
    """The ODE vector field produced a non-finite value."""


class RiccatiBlowupError(MFNashError):
    """The linearised Riccati denominator w_s came too close to zero."""

    def __init__(self, s, w):
        self.s = s
        self.w = w
        super().__init__(f"Riccati denominator |w| = {abs(w):.3e} below floor at s = {s:g}")


class SingularConsistencyError(MFNashError):
    """The affine consistency map has slope too close to one."""

    def __init__(self, mass, floor):
        self.mass = mass
        self.floor = floor
        super().__init__(f"consistency condition near-singular: |1 - mass| = {abs(1 - mass):.3e} "
                         f"(mass = {mass!r}, floor = {floor:g})")


class ConfigError(MFNashError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
