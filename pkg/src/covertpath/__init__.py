"""covertpath: cross-layer covert channel path selection at desk scale.

Simulates a cloud-edge-IoT network with layered covert channels and passive
wardens, solves the optimal end-to-end covert path exactly by brute force,
and trains discrete SAC / diffusion-SAC agents to learn the same selection.
"""

from covertpath.model import (
    Aggregator,
    Channel,
    Layer,
    NodeSpec,
    QualityReport,
    Scenario,
    Warden,
    channel_quality,
    combined_detection,
    covert_feasible,
    effective_detection,
    validate_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "Aggregator",
    "Channel",
    "Layer",
    "NodeSpec",
    "QualityReport",
    "Scenario",
    "Warden",
    "channel_quality",
    "combined_detection",
    "covert_feasible",
    "effective_detection",
    "validate_scenario",
    "__version__",
]
