class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class DomainError(ContractError):
    """Input lies outside the domain where the field is defined."""


class ValidationError(ValueError):
    """User-supplied data (meshes, image sets, configs) failed validation."""


class BackendError(RuntimeError):
    """A guidance backend failed. Retriable; never raised for caller mistakes."""


class CheckpointError(RuntimeError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class FinetuneInterrupted(RuntimeError):
    """Raised when a fine-tuning sequence fails part-way.

    ``checkpoint`` carries everything completed so far and can be passed back
    as ``resume=`` to continue without repeating finished stages.
    """

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint

    @property
    def completed_stage(self):
        return self.checkpoint.stage
