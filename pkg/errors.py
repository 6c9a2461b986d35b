"""
Exception vocabulary shared by every module.

Library code raises these; only main.py turns them into exit codes
(0 ok, 2 input error, 3 regime/degenerate, 4 divergence, 5 tolerance failure).
"""


class NeuralCollapseError(Exception):
    exit_code = 1


# ===============================================================
#  INPUT ERRORS (exit 2)
# ===============================================================

class ArgumentError(NeuralCollapseError, ValueError):
    exit_code = 2


class ContractViolation(NeuralCollapseError, ValueError):
    """Shapes or sizes that do not chain the way the model requires."""
    exit_code = 2


class ConfigError(NeuralCollapseError, ValueError):
    exit_code = 2

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class CheckpointError(NeuralCollapseError):
    exit_code = 2


# ===============================================================
#  REGIME / NUMERICAL ERRORS (exit 3)
# ===============================================================

class DecompositionError(NeuralCollapseError):
    exit_code = 3


class RegimeError(NeuralCollapseError):
    """The requested prediction has no closed form for this problem."""
    exit_code = 3


class RegimeMismatchError(RegimeError, ArgumentError):
    exit_code = 3


class UnsupportedLossError(RegimeError):
    exit_code = 3


class DegenerateInputError(NeuralCollapseError, ValueError):
    exit_code = 3


# ===============================================================
#  TRAINING ERRORS (exit 4 / 5)
# ===============================================================

class NumericalOverflowError(NeuralCollapseError, ArithmeticError):
    exit_code = 4


class DivergenceError(NeuralCollapseError):
    exit_code = 4

    def __init__(self, iteration, loss_value, trajectory=None):
        self.iteration = iteration
        self.loss_value = loss_value
        self.trajectory = trajectory
        super().__init__(f"training diverged at iteration {iteration} (loss={loss_value!r})")


class NonMonotoneLossError(DivergenceError):
    def __init__(self, iteration, loss_value, previous, trajectory=None):
        self.previous = previous
        super().__init__(iteration, loss_value, trajectory)
        self.args = (f"loss increased at iteration {iteration}: {previous!r} -> {loss_value!r}",)


class ToleranceFailure(NeuralCollapseError):
    exit_code = 5
