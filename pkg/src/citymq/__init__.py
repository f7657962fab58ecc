"""citymq: a desk-scale MQTT 3.1.1 stack for city-bus telemetry experiments.

Subpackages: wire (packet codec), broker (gateway), geo (distance and
proximity), fleetsim (simulated bus fleet), rider (notification client),
bench (experiment runner and statistics).
"""

__version__ = "0.1.0"
