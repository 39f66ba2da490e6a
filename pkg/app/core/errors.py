from __future__ import annotations


class JointModelError(Exception):
    """Base error; ``exit_code`` is what the CLI returns when it escapes a command."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: int | None = None) -> None:
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(JointModelError):
    exit_code = 2


class CohortValidationError(JointModelError):
    exit_code = 2

    def __init__(self, messages: list[str]) -> None:
        self.messages = list(messages)
        super().__init__("; ".join(self.messages) if self.messages else "Cohort validation failed.")


class CohortFileError(JointModelError):
    exit_code = 2


class KernelError(JointModelError):
    pass


class DegenerateTruncationError(KernelError):
    pass


class QuadratureError(KernelError):
    def __init__(self, detail: str, node: float) -> None:
        super().__init__(detail)
        self.node = node


class InsufficientValuesError(KernelError):
    pass


class EmptyUrnError(JointModelError):
    pass


class SingularPrecisionError(JointModelError):
    def __init__(self, block: str) -> None:
        super().__init__(f"Posterior precision is singular in block '{block}'.")
        self.block = block


class SupportViolationError(JointModelError):
    pass


class SamplerAbort(JointModelError):
    def __init__(self, cause: Exception, chain: int, iteration: int, subject_id: str | None) -> None:
        where = f"chain {chain}, iteration {iteration}"
        if subject_id is not None:
            where += f", subject '{subject_id}'"
        super().__init__(f"Sampler aborted at {where}: {cause}")
        self.cause = cause
        self.chain = chain
        self.iteration = iteration
        self.subject_id = subject_id


class InsufficientDrawsError(JointModelError):
    pass


class FitFileError(JointModelError):
    pass
