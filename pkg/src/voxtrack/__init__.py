"""voxtrack: 6DoF object pose tracking against voxel radiance field templates.

The package renders reference views on-the-fly from a fitted voxel field at
the previously estimated pose and refines the current pose by feature-metric
nonlinear least squares, with a keypoint-matching + PnP-RANSAC path for cold
starts.
"""

from voxtrack.geometry import Camera, Pose

__all__ = ["Camera", "Pose"]
__version__ = "0.1.0"
