"""Multi-view fusion 3D object detection from LiDAR point clouds.

Dynamic and hard voxelization over birds-eye and perspective views, a small
reverse-mode autodiff engine, the fusion network, anchor head, losses,
training loop and BEV/3D average-precision evaluation.
"""

__version__ = "0.1.0"
