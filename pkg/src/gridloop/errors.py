class ConfigError(Exception):
    """Invalid configuration or incompatible config/data/checkpoint combination."""


class CheckpointError(Exception):
    """Corrupt or incomplete checkpoint file."""
