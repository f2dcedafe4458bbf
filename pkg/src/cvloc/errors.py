"""Exception hierarchy shared by every module.

Data errors derive from :class:`CVLError` so the CLI can map them to exit
code 3 in one place; I/O problems surface as :class:`OSError` (exit code 4).
"""


class CVLError(ValueError):
    """Base class for invalid-data conditions."""


class NotInFront(CVLError):
    """A world point lies at or behind the camera plane (depth <= 1e-6)."""


class DimensionMismatch(CVLError):
    pass


class EmptySequence(CVLError):
    pass


class RadiusTooLarge(CVLError):
    pass


class DegenerateQuery(CVLError):
    """The query map has no unmasked, nonzero content to correlate against."""


class AllCellsInvalid(CVLError):
    pass


class BatchTooSmall(CVLError):
    pass


class UnknownId(CVLError):
    pass
