class DomainError(Exception): ...
class ShapeError(DomainError): ...
class DomainValueError(DomainError): ...
class ArgumentError(DomainValueError): ...
class TapeError(DomainError): ...
class MaskError(DomainError): ...
class CausalityError(DomainError): ...
class FlowError(DomainError): ...
class DataFormatError(DomainError): ...
class StateSpaceTooLargeError(DomainError): ...
class CheckpointError(DomainError): ...


class NumericError(DomainError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
