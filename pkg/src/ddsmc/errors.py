class NumericalError(RuntimeError):
    """Non-finite values, normalization drift or an ill-posed rate evaluation."""


class AbsoluteContinuityError(NumericalError):
    """A realized transition has zero probability under the proposal kernel."""

    def __init__(self, message, step=None, transition=None):
        super().__init__(message)
        self.step = step
        self.transition = transition
