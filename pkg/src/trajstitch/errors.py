class ConfigError(ValueError):
    """Invalid configuration or precondition on user-supplied settings."""


class DatasetError(ValueError):
    """Dataset file or in-memory dataset violates the trajectory schema."""


class ParseError(DatasetError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DatasetError):
    pass


class TrainingError(RuntimeError):
    """Training produced non-finite values."""


class GenerationError(RuntimeError):
    pass
