"""Gait recognition from LiDAR point clouds.

Pipeline: synthetic capsule-body scans (synth), point-cloud cleanup
(geometry), depth/silhouette projections (projection), a hand-rolled
convolutional encoder with part pooling (encoder), metric-learning
training (training), and cross-view retrieval evaluation (evaluation).
The `pcgait` console script chains the stages.
"""

from . import (  # noqa: F401
    encoder,
    evaluation,
    geometry,
    projection,
    rng,
    synth,
    training,
)

__version__ = "0.1.0"
