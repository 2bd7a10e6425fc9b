class CbcError(Exception):
    """Base error carrying a machine-readable reason code."""

    def __init__(self, code, message=""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class IngestError(CbcError):
    pass


class TrajectoryError(CbcError):
    pass


class EstimationError(CbcError):
    """Raised by the Cox and logistic fitters."""

    def __init__(self, code, message="", result=None):
        super().__init__(code, message)
        # last iterate, when one exists
        self.result = result


class SeparationError(EstimationError):
    def __init__(self, message="", result=None):
        super().__init__("SEPARATION", message, result)


class SynthError(CbcError):
    pass
