"""Exception hierarchy shared by all layerfed modules."""


class LayerFedError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LayerFedError, ValueError):
    pass


class ConfigurationError(LayerFedError, ValueError):
    pass


class PartitionError(ConfigurationError):
    pass


class AssemblyError(LayerFedError, ValueError):
    pass


class AggregationError(LayerFedError, ValueError):
    pass


class EvaluationError(LayerFedError, ValueError):
    pass


class IngestionError(LayerFedError, ValueError):
    pass


class ParseError(IngestionError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ConfigError(ConfigurationError):
    """Invalid experiment config; carries the offending key and line."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = ""
        if key is not None:
            prefix = f"[{key}"
            if line is not None:
                prefix += f" @ line {line}"
            prefix += "] "
        super().__init__(prefix + message)


class DivergedClientError(LayerFedError, RuntimeError):
    def __init__(self, client_id, message="non-finite loss during local training"):
        self.client_id = client_id
        super().__init__(f"client {client_id}: {message}")
