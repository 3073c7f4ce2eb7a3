"""Cone-aperture point-network segmentation of volumetric images.

Deformable-mesh organ segmentation driven by a per-vertex shared-MLP agent:
ray/cone gray-value features are sampled around each mesh vertex, a pointwise
network predicts local deformations plus a global similarity transform, and a
closest-point oracle with Laplacian smoothing supplies the training labels.

Submodules: volume, mesh, ssm, aperture, oracle, agent, pipeline, cli.
"""

__version__ = "0.1.0"
