"""Exception type for export failures."""


class ExportError(Exception):
    """Anything that prevents a faithful export: unknown architecture,
    unrepresentable layer, missing or corrupt source data."""
