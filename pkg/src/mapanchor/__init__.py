"""Map-anchored LiDAR mapping toolkit.

Converts a reference 3D map into synthetic session data, aligns a drifted
real-world LiDAR session against it with descriptor-based place recognition
and anchored pose-graph optimization, and reports environmental changes.
"""

__version__ = "0.1.0"
