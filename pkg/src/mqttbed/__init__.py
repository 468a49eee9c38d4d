"""MQTT benchmarking testbed: embedded broker, device-catalog load generator,
zero-loss verifier, and a scenario runner with machine-readable reports."""

__version__ = "0.1.0"
