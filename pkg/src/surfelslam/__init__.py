"""Monocular Gaussian-surfel SLAM backend at desk scale.

Submodules: geometry (Sim(3)/SE(3)), rasterizer (2D surfel splatting),
oracle (simulated frontend), tracker (submaps), loop_closure, pose_graph,
mapper (global surfel map), evaluation (metrics), pipeline + cli.
"""

from surfelslam.geometry import SE3Pose, Sim3Transform, UnitQuaternion

__all__ = ["SE3Pose", "Sim3Transform", "UnitQuaternion"]
__version__ = "0.1.0"
