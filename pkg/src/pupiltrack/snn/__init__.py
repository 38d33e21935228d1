"""Spiking CNN: layer specs, IF dynamics, simulation and complexity counts."""

from .layers import (
    IF,
    BatchNorm,
    Conv,
    FeatureShape,
    Flatten,
    NetworkConfig,
    ShapeError,
    SumPool,
    count_macs,
    count_params,
    format_trace,
    layer_macs,
    reduced_config,
    retina_default,
    spatial_trace,
)
from .network import (
    BatchNormWeights,
    ConvWeights,
    ForwardTrace,
    SpikingNet,
    firing_rate_profile,
    forward_sequence,
    fuse_batchnorm,
    load_network,
    load_weights,
    save_weights,
)
from .neuron import heaviside, if_step
