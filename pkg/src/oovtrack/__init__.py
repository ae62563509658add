"""Out-of-view hand tracking from a wrist IMU: synthetic data, EKF, pinch
detection, a causal Transformer estimator, evaluation and a streaming service."""

__version__ = "0.1.0"
