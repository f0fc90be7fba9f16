__all__ = (
    "data",
    "training",
    "deployment",
    "experiment",
)
__name__ = "pipeline"
__version__ = "peel"
