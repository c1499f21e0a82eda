"""Exception types shared across the registration pipeline."""


class ScanRegError(Exception):
    """Base class for all library errors."""


class DegenerateCorrespondences(ScanRegError):
    """Correspondences cannot determine a rigid transform (too few or collinear)."""


class NoConsensus(ScanRegError):
    """Robust estimation found no sufficiently supported model."""


class DimensionMismatch(ScanRegError):
    """Descriptor or array dimensions are incompatible."""


class EmptyCloud(ScanRegError):
    """An operation received a point cloud with no points."""


class BadMatrixShape(ScanRegError):
    """A user-supplied matrix does not have the required shape or symmetry."""


class NoCandidates(ScanRegError):
    """No neighbor produced a usable candidate pose for the next scan."""


class NoCommonScans(ScanRegError):
    """Estimated and ground-truth pose sets share no scan ids."""


class EmptyNeighborhood(ScanRegError):
    """No cloud point lies within the requested patch radius."""


class InvalidConfig(ScanRegError):
    """A configuration value or file is invalid."""


class DataError(ScanRegError):
    """An input file is missing, malformed, or inconsistent."""
