"""Exception types shared across the arena."""


class ArenaError(Exception):
    """Base class for all arena errors."""


class InvalidInputError(ArenaError):
    """An argument violates a documented precondition."""


class TrainingDivergedError(ArenaError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class BoundaryLostError(ArenaError):
    """No adversarial endpoint is available for boundary search."""


class DegenerateDirectionError(ArenaError):
    """A proposal direction collapsed to zero norm after projection."""


class InvalidSpecError(ArenaError):
    """A reward or scenario selector is inconsistent or incomplete."""


class ArtifactMissingError(ArenaError):
    """A required trained artifact is absent.

    ``prerequisite`` names the scenario or command that produces it.
    """

    def __init__(self, message, prerequisite=None):
        super().__init__(message)
        self.prerequisite = prerequisite


class IdxFormatError(ArenaError):
    """An IDX file is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class EpisodeSkippedError(ArenaError):
    """Episode endpoints could not be sampled; the episode is skipped."""
