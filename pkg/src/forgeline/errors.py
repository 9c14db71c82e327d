"""Exception hierarchy shared by every forgeline module.

Each error carries an ``exit_code`` so the CLI can map failures without
inspecting types: 2 for usage/validation, 3 for IO/transport, 4 for an
internal invariant breach.
"""

from __future__ import annotations


class ForgelineError(Exception):
    exit_code = 4


class ValidationError(ForgelineError, ValueError):
    exit_code = 2


class TransportError(ForgelineError):
    exit_code = 3


# tensorstore
class MalformedHeader(ValidationError):
    pass


class OverlappingTensors(ValidationError):
    pass


class TrailingBytes(ValidationError):
    pass


class DuplicateName(ValidationError):
    pass


class NameSetMismatch(ValidationError):
    def __init__(self, missing: set[str]):
        self.names = sorted(missing)
        super().__init__(f"tensor name sets differ: {self.names}")


class ShapeMismatch(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"shape mismatch for tensor {name!r}")


class DTypeMismatch(ValidationError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"dtype mismatch for tensor {name!r}")


class NonFiniteResult(ValidationError):
    def __init__(self, name: str, index: int):
        self.name = name
        self.index = index
        super().__init__(f"non-finite merged value in {name!r} at index {index}")


# inference gateway
class Transport(TransportError):
    pass


class MalformedResponse(TransportError):
    pass


class NonFiniteScore(TransportError):
    pass


class UnparseableVerdict(ForgelineError):
    exit_code = 3


# constraints / arbitrage / policy / eval
class UnknownLexicon(ValidationError):
    pass


class UnresolvedPlaceholder(ValidationError):
    pass


class MissingScores(ValidationError):
    pass


class UnknownToken(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class EmptyReport(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


# refinement loop
class TrainerFailure(ForgelineError):
    pass


class HarnessFailure(ForgelineError):
    pass


class EmptyRefinement(ValidationError):
    pass


class LedgerError(ForgelineError):
    exit_code = 3
