"""Exception hierarchy shared across the pipeline.

Every error carries an ``exit_code`` so the CLI can map failures onto its
contract: 2 for bad inputs, 3 for missing pipeline state, 4 for numeric
failures.
"""

from __future__ import annotations


class VidpopError(Exception):
    exit_code = 1


class InputError(VidpopError):
    """Malformed or contract-violating input data/arguments."""

    exit_code = 2


class StateError(VidpopError):
    """A pipeline stage was invoked before its prerequisites exist."""

    exit_code = 3


class NumericError(VidpopError):
    """A computation produced or received non-finite/diverging values."""

    exit_code = 4


# --- ingest ---------------------------------------------------------------

class MissingColumn(InputError):
    def __init__(self, name: str):
        super().__init__(f"missing column: {name}")
        self.name = name


class DuplicateVideoId(InputError):
    def __init__(self, video_id: str):
        super().__init__(f"duplicate video_id: {video_id}")
        self.video_id = video_id


class MalformedRow(InputError):
    def __init__(self, line: int, detail: str = ""):
        super().__init__(f"malformed row at line {line}" + (f": {detail}" if detail else ""))
        self.line = line


class BadHeader(InputError):
    pass


class DimMismatch(InputError):
    def __init__(self, line: int, detail: str = ""):
        super().__init__(f"dimension mismatch at line {line}" + (f": {detail}" if detail else ""))
        self.line = line


class NonFiniteValue(InputError):
    def __init__(self, line: int, detail: str = ""):
        super().__init__(f"non-finite value at line {line}" + (f": {detail}" if detail else ""))
        self.line = line


class ManifestError(InputError):
    pass


class ManifestMissingSource(InputError):
    def __init__(self, source_id: int, path: str):
        super().__init__(f"embedding file for source {source_id} not found: {path}")
        self.source_id = source_id


class CoverageBelowThreshold(InputError):
    def __init__(self, source_id: int, frac: float, max_frac: float):
        super().__init__(
            f"source {source_id}: {frac:.3f} of ids lack vectors (max allowed {max_frac:.3f})"
        )
        self.source_id = source_id
        self.frac = frac


# --- features -------------------------------------------------------------

class AllMissing(InputError):
    def __init__(self, field: str):
        super().__init__(f"field {field!r} has no non-missing training values")
        self.field = field


class DegenerateRange(InputError):
    pass


class DomainError(InputError):
    pass


# --- gbdt -----------------------------------------------------------------

class EmptyData(InputError):
    pass


class NonFiniteTarget(NumericError):
    pass


class TooFewRows(InputError):
    pass


class EmptySpace(InputError):
    pass


class UnknownFeature(InputError):
    def __init__(self, name: str):
        super().__init__(f"model feature not present in input matrix: {name}")
        self.name = name


# --- fusion ---------------------------------------------------------------

class BadHeadShape(InputError):
    pass


class DuplicateSource(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class MissingSourceInBatch(InputError):
    def __init__(self, source_id: int):
        super().__init__(f"batch lacks matrix for source {source_id}")
        self.source_id = source_id


class DivergedLoss(NumericError):
    pass


# --- evaluate -------------------------------------------------------------

class LengthMismatch(InputError):
    pass


class RowIdMismatch(InputError):
    pass


class MissingTarget(InputError):
    pass


# --- ablate ---------------------------------------------------------------

class BadLabel(InputError):
    pass


class MissingSource(InputError):
    def __init__(self, source_id: int):
        super().__init__(f"bundle does not provide embedding source {source_id}")
        self.source_id = source_id


# --- cli ------------------------------------------------------------------

class MissingArtifact(StateError):
    def __init__(self, path: str, hint: str):
        super().__init__(f"missing artifact {path}; {hint}")
        self.path = path
        self.hint = hint
