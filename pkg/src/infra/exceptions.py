from typing import Iterable


class SchemeStudioError(Exception):
    """Base Exception for IPM Scheme Studio"""
    def __init__(self, message: str, exit_code: int = 70, error_code: str = "INTERNAL_ERROR"):
        self.message = message
        self.exit_code = exit_code
        self.error_code = error_code
        super().__init__(self.message)


class UsageError(SchemeStudioError):
    def __init__(self, details: str):
        super().__init__(f"Usage error: {details}", 64, "USAGE")


class DatasetParseError(SchemeStudioError):
    def __init__(self, path: str, line: int, details: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {details}", 65, "DATASET_PARSE")


class ValidationError(SchemeStudioError):
    def __init__(self, details: str):
        super().__init__(f"Validation failed: {details}", 65, "VALIDATION")


class EmptyInputError(SchemeStudioError):
    def __init__(self, what: str):
        super().__init__(f"Empty input: {what}", 66, "EMPTY_INPUT")


class ContextMismatchError(SchemeStudioError):
    def __init__(self, missing: Iterable[str]):
        self.missing = tuple(missing)
        super().__init__(f"Histogram lacks contexts required by the scheme: {', '.join(self.missing)}",
                         65, "CONTEXT_MISMATCH")


class SchemeInvariantError(SchemeStudioError):
    def __init__(self, details: str):
        super().__init__(f"Scheme invariant violated: {details}", 70, "SCHEME_INVARIANT")


class NoLabellingError(SchemeStudioError):
    def __init__(self, details: str):
        super().__init__(f"No valid labelling: {details}", 70, "NO_LABELLING")


class SchemeFormatError(SchemeStudioError):
    def __init__(self, details: str):
        super().__init__(f"Invalid scheme document: {details}", 65, "SCHEME_FORMAT")


class BlobFormatError(SchemeStudioError):
    def __init__(self, details: str):
        super().__init__(f"Invalid encoded blob: {details}", 65, "BLOB_FORMAT")


class HashMismatchError(SchemeStudioError):
    def __init__(self, expected: str, actual: str):
        super().__init__(f"Scheme hash mismatch: blob={expected} scheme={actual}", 65, "HASH_MISMATCH")


class TruncatedPayloadError(SchemeStudioError):
    def __init__(self, sample_index: int):
        self.sample_index = sample_index
        super().__init__(f"Payload truncated while decoding sample {sample_index}", 65, "TRUNCATED_PAYLOAD")
