"""Low-power EEG seizure detection: EDF ingestion, TC-ResNet4 with fixed-point
inference, time-series smoothing, evaluation metrics and a MAC/energy model."""

__version__ = "0.1.0"
