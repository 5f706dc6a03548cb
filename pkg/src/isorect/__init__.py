"""Rectify a photographed, folded document from a point cloud and one reference image.

A 3D quad mesh is fitted to the cloud while a planar quad mesh with the same
connectivity is kept isometric to it; the reference image is then resampled
through the pair of meshes.
"""

from .camera import CameraIntrinsics
from .energies import WeightSchedule
from .geometry import MeshPair, QuadMesh
from .pipeline import PipelineConfig, PipelineInputs, RunResult, run
from .pointcloud import PointCloud

__all__ = ["CameraIntrinsics", "MeshPair", "PipelineConfig", "PipelineInputs", "PointCloud", "QuadMesh",
           "RunResult", "WeightSchedule", "run"]
__version__ = "0.1.0"
