"""Over-the-air federated learning in a MIMO Cloud-RAN with an L-DSC fronthaul."""

__version__ = "0.1.0"
