"""Operator-learning toolkit for inverse source localization and image reconstruction.

A DeepONet (branch/trunk operator network) trained with data, physics-residual,
source-prediction, and perceptual losses, instrumented with empirical neural
tangent kernel diagnostics. Includes a 2D incompressible-flow data generator
and an image corruption/reconstruction pipeline.
"""

__version__ = "0.1.0"
