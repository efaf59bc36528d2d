"""Exception hierarchy for batchsurf."""


class BatchSurfError(Exception):
    """Base class for every error raised by this package."""


# -- volume loading ---------------------------------------------------------


class VolumeError(BatchSurfError):
    pass


class DicomError(VolumeError):
    """A DICOM file could not be decoded. ``source`` names the file."""

    def __init__(self, message, source="<bytes>", tag=None):
        self.source = source
        self.tag = tag
        where = f"{source}"
        if tag is not None:
            where += f" tag {tag}"
        super().__init__(f"{where}: {message}")


class MissingMagic(DicomError):
    pass


class UnsupportedTransferSyntax(DicomError):
    pass


class MissingRequiredTag(DicomError):
    pass


class TruncatedPixelData(DicomError):
    pass


class InconsistentGeometry(VolumeError):
    pass


class NonUniformSpacing(VolumeError):
    def __init__(self, message, slice_indices=()):
        self.slice_indices = tuple(slice_indices)
        super().__init__(message)


class TooFewSlices(VolumeError):
    pass


class HeaderParse(VolumeError):
    pass


class PayloadSizeMismatch(VolumeError):
    pass


# -- CSV inputs -------------------------------------------------------------


class RowError(BatchSurfError):
    """Problem tied to a row of a hand-edited CSV file (1-based, header is row 1)."""

    def __init__(self, message, row=None):
        self.row = row
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


class BadHeader(RowError):
    pass


class BadDirection(RowError):
    pass


class EmptyPacket(RowError):
    pass


class DuplicatePacketId(RowError):
    pass


class DuplicateSpecimen(RowError):
    pass


class BadBounds(RowError):
    pass


class OverlappingZ(RowError):
    def __init__(self, message, rows=()):
        self.rows = tuple(rows)
        super().__init__(message, row=rows[-1] if rows else None)


# -- surfacing --------------------------------------------------------------


class BoxOutOfRange(BatchSurfError):
    pass


class EmptyMesh(BatchSurfError):
    pass


class EmptyMeshRender(BatchSurfError):
    pass


# -- phantoms ---------------------------------------------------------------


class ShapeOutOfBounds(BatchSurfError):
    pass


class OverlapViolation(BatchSurfError):
    pass


# -- pipeline ---------------------------------------------------------------


class ConfigError(BatchSurfError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class UnknownKey(ConfigError):
    pass


class BadValue(ConfigError):
    pass


class DuplicateOutputName(BatchSurfError):
    pass
