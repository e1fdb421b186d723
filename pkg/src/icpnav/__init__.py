"""Closed-loop 6-DOF relative navigation.

Fuses iterative-closest-point registration of laser-scan point clouds
with a noise-adaptive multiplicative Kalman filter driven by IMU
measurements, plus a scenario simulator that makes the whole loop
verifiable without hardware.
"""

__version__ = "0.1.0"
