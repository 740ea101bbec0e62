"""Design and simulation of disturbance-decoupled functional observers for
nonlinear systems, with exo-system based fault estimation and isolation."""

__version__ = "0.1.0"
