"""Event-camera pupil tracking with a spiking CNN: slicing, simulation, training and chip mapping."""

__version__ = "0.1.0"
