class DataError(ValueError):
    """Malformed or inconsistent input data (files, manifests, segment shapes)."""


class NumericFailure(RuntimeError):
    """A loss or gradient became non-finite during training."""
