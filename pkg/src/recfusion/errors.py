"""Exception hierarchy; the CLI maps each family to an exit code."""


class RecFusionError(Exception):
    exit_code = 1


class ConfigError(RecFusionError, ValueError):
    exit_code = 2


class DataError(RecFusionError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class StageDependencyError(RecFusionError):
    exit_code = 4

    def __init__(self, stage: str, missing: str):
        super().__init__(f"missing artifact {missing!r}; rerun stage '{stage}' first")
        self.stage = stage
        self.missing = missing
