"""Exception types shared across the package."""


class HeroschedError(Exception):
    """Base class for all engine errors."""


class UnsupportedConfig(HeroschedError):
    """A (model, PU) pair is not covered by the loaded profile tables."""

    def __init__(self, model_id: str, pu_id: str, detail: str = ""):
        self.model_id = model_id
        self.pu_id = pu_id
        msg = f"no profile for model {model_id!r} on PU {pu_id!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class InsufficientSamples(HeroschedError):
    """Too few measurements to fit a regression for a (model, PU) pair."""


class InvalidParams(HeroschedError):
    """A caller-supplied parameter violates a documented precondition."""


class NotStreaming(HeroschedError):
    """A streaming-only operation was applied to a batchable/atomic node."""


class UnknownNode(HeroschedError):
    """Node id not present in the observed workflow graph."""


class UnknownTemplateNode(HeroschedError):
    """Template node name not present in the workflow template."""


class Deadlock(HeroschedError):
    """The simulator cannot make progress while unfinished nodes remain."""


class NoAdmissibleConfig(HeroschedError):
    """A stage has no runnable configuration on the given platform."""

    def __init__(self, stage: str, pu_id: str = "", detail: str = ""):
        self.stage = stage
        self.pu_id = pu_id
        msg = f"stage {stage!r} has no admissible config"
        if pu_id:
            msg += f" on PU {pu_id!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TooLarge(HeroschedError):
    """An exhaustive-search instance exceeds the enumeration guard."""


class ParseError(HeroschedError):
    """A profile, platform, workflow, or instance file failed to parse."""
