"""Exception hierarchy shared by every stage; each class carries its CLI exit code."""


class TripletGenError(Exception):
    exit_code = 1


class ConfigError(TripletGenError, ValueError):
    exit_code = 2


class DataError(TripletGenError):
    exit_code = 3


class DegenerateInputError(DataError, ValueError):
    pass


class CorpusIOError(DataError, OSError):
    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class NumericalError(TripletGenError, RuntimeError):
    exit_code = 4


class ShapeError(DataError, ValueError):
    pass
