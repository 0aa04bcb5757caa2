"""
Typed errors for the BMO martingale laboratory
"""

from typing import List, Optional, Tuple

Node = Tuple[int, int]


class LabError(ValueError):
    """Base class for every error raised on invalid input"""


class TreeStructureError(LabError):
    pass


class ShapeMismatchError(LabError):
    pass


class NotMartingaleError(LabError):
    def __init__(self, message: str, node: Optional[Node] = None):
        super().__init__(message)
        self.node = node


class InvalidExponentError(LabError):
    pass


class SliceImpossibleError(LabError):
    def __init__(self, node: Node, step_bracket: float, eps: float, largest_step: Optional[float] = None):
        self.node = node
        self.minimal_eps = max(step_bracket, largest_step or 0.0) ** 0.5
        super().__init__(
            f"Single step at node {node} carries bracket {step_bracket:.6g} > eps^2 = {eps ** 2:.6g}; "
            f"minimal feasible eps is {self.minimal_eps:.6g}"
        )


class SingularFactorError(LabError):
    def __init__(self, node: Node, detail: str = ""):
        self.node = node
        super().__init__(f"Singular one-step factor at node {node}{': ' + detail if detail else ''}")


class NonPositiveDensityError(LabError):
    def __init__(self, node: Node, value: float):
        self.node = node
        super().__init__(f"Non-positive density factor {value:.6g} at node {node}")


class ConfigurationError(LabError):
    pass


class EmptyEnsembleError(LabError):
    pass


class EnumerationLimitError(LabError):
    pass


class UnknownScenarioError(LabError):
    def __init__(self, name: str, known: List[str]):
        self.name = name
        self.known = sorted(known)
        super().__init__(f"Unknown scenario '{name}'. Known scenarios: {', '.join(self.known)}")
