"""Reconstruction of T-hedra (quad meshes with planar trapezoidal faces) from
unorganized point clouds.

Modules:
    geom_core        point clouds, k-NN, normals, line-element coordinates
    beta_curves      beta-evolutes/involutes, polyline fairing and ordering
    tsurface_gen     synthetic T-surfaces and noisy samples
    thedron          the T-hedron data model, residuals and OBJ I/O
    axis_estimation  axis of the directing cylinder from normals
    initial_guess    first T-hedron from slices of the cloud
    global_opt       constrained refinement and axis re-registration
    pipeline         end-to-end driver
"""
__version__ = "0.1.0"

from .geom_core import GeometryError, PointCloud  # noqa: E402
from .thedron import THedron, build_thedron  # noqa: E402

__all__ = ["__version__", "GeometryError", "PointCloud", "THedron", "build_thedron"]
