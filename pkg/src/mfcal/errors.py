"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class IntegrationFailure(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class SingularDesign(ArithmeticError):
    pass


class EstimationFailure(RuntimeError):
    pass


class NumericalFailure(ArithmeticError):
    pass


class InsufficientData(ValueError):
    pass


class ChainAborted(RuntimeError):
    def __init__(self, chain: int, iteration: int, theta, message: str):
        super().__init__(f"chain {chain} aborted at iteration {iteration}: {message}")
        self.chain = chain
        self.iteration = iteration
        self.theta = theta
