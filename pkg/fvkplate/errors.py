class FvkError(Exception):
    """Base class of all errors raised by fvkplate."""


class MeshError(FvkError):
    pass


class AssemblyError(FvkError):
    pass


class ConfigError(FvkError):
    def __init__(self, message: str, path: str | None = None,
                 key: str | None = None, line: int | None = None) -> None:
        self.path = path
        self.key = key
        self.line = line
        where = ""
        if path:
            where = f"{path}"
            if line:
                where += f":{line}"
            where += ": "
        if key:
            where += f"[{key}] "
        super().__init__(f"{where}{message}")


class FlowAbort(FvkError):
    """The flow cannot continue; `state` holds the last accepted iterate."""

    def __init__(self, message: str, state=None) -> None:
        super().__init__(message)
        self.state = state
