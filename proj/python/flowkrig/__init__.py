"""Traffic volume kriging at unsensored locations (STCAGCN)."""

from ._flowkrig import (
    CheckpointError,
    ConfigError,
    Dataset,
    IoError,
    Model,
    RunConfig,
    TensorError,
    __version__,
    diagnose,
    dtw,
    knn_estimate,
    load_dataset,
    load_model,
    metrics,
    synthesize,
    tai,
    train,
)


def config(**settings):
    """RunConfig with dotted keys given as double-underscore names,
    e.g. config(model__hidden_dim=16, seed=3)."""
    c = RunConfig()
    for key, value in settings.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        c.set(key.replace("__", "."), str(value))
    c.validate()
    return c
