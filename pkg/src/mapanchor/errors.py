"""Exception types raised across the toolkit.

Every error that callers are expected to branch on derives from
:class:`MapAnchorError`, so the CLI can map any pipeline failure to a
nonzero exit code with a single except clause.
"""


class MapAnchorError(Exception):
    """Base class for all toolkit errors."""


# geometry
class AngleNearPi(MapAnchorError):
    """SE(3) log requested for a rotation at or too close to the pi cut locus."""


class DegenerateConfiguration(MapAnchorError):
    """Point correspondences are collinear/coincident; alignment is not unique."""


class EmptyIndex(MapAnchorError):
    """Nearest-neighbor index built over an empty point set."""


# session I/O
class MissingScan(MapAnchorError):
    """A pose timestamp has no matching scan file on disk."""


class TimestampMismatch(MapAnchorError):
    """A scan file's timestamp is absent from the poses file."""


class EmptyDirectory(MapAnchorError):
    """Keyframe directory contains no scans."""


class ParseError(MapAnchorError):
    """Malformed record in a text or binary file; carries the offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class NoAssociations(MapAnchorError):
    """No timestamp pairs could be associated between two trajectories."""


# occupancy grid
class EmptyCloud(MapAnchorError):
    """Operation requires a non-empty point cloud."""


class NoFreeSpace(MapAnchorError):
    """Occupancy grid has no free cells to work with."""


# scan simulation
class EmptyMesh(MapAnchorError):
    """Mesh file contains no triangles."""


# descriptors
class EmptyReferenceSet(MapAnchorError):
    """Ring-key retrieval against an empty reference set."""


class DimensionMismatch(MapAnchorError):
    """Descriptors of different shapes compared."""


# registration
class TooFewPoints(MapAnchorError):
    """Not enough points to estimate local covariances or a transform."""


class NoPointsInExclusionZone(MapAnchorError):
    """All source points lie farther than the exclusion radius from the target."""


# pose graph
class MissingVariable(MapAnchorError):
    """A factor references a node id absent from the variable set."""


class SingularNormalEquations(MapAnchorError):
    """Gauge not fixed or graph otherwise under-constrained."""


class NotConverged(MapAnchorError):
    """Optimization diverged (non-finite cost)."""


# pipeline
class NoEncounters(MapAnchorError):
    """Zero validated inter-session loops; alignment is impossible."""


class EmptyReferenceCloud(MapAnchorError):
    """Final refinement requires a non-empty reference cloud."""


# change detection
class EmptyGrid(MapAnchorError):
    """Occupancy voxel grid has no integrated scans."""


class EmptyCluster(MapAnchorError):
    """Voxel meshing requires a non-empty cluster."""


class ConfigError(MapAnchorError):
    """Bad key or value in a configuration file or CLI override."""
