"""Panoramic depth to semantic 3D Gaussians, cube-map rendering, and detection.

Submodules
----------
tensorio        binary tensor / archive formats and box annotations
pano_geometry   equirectangular camera model and cube-face bases
nn_kernels      small MLP stack, weight archives, sparse 3D convolution
gaussian_core   depth lifting into semantic Gaussians
gaussian_opt    iterative refinement sub-modules
cubemap_render  differentiable semantic cube-map splatting
detect          3D box decoding, assignment, losses, rotated NMS
eval3d          rotated IoU, matching, average precision, mAP reports
sampling        farthest-point / voxel subsampling and chamfer distance
accel           numba / numpy backend selection
cli             command-line pipeline driver
"""

__version__ = "0.1.0"
