"""Exception types shared across the package."""


class CirlabError(Exception):
    """Base class for all package-specific failures."""


class DegenerateNorm(CirlabError):
    """A vector with (near-)zero Euclidean norm where a direction is required."""


class DimMismatch(CirlabError):
    """Operand shapes are incompatible."""


class NonFiniteEvaluation(CirlabError):
    """A probed function returned NaN or infinity."""


class WorldTooSmall(CirlabError):
    """Requested more distinct items than the attribute space contains."""


class InsufficientDistractors(CirlabError):
    """The gallery budget cannot supply the requested shortcut distractors."""


class MalformedRecord(CirlabError):
    """A tuple-file line is not valid JSON.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed record at line {line_no}" + (f": {detail}" if detail else ""))


class MissingPseudo(CirlabError):
    """A prompt contains the pseudo-token slot but no pseudo vector was supplied."""


class SequenceTooLong(CirlabError):
    """Token sequence exceeds the encoder's maximum length."""


class UnsupportedVersion(CirlabError):
    """Checkpoint file carries an unknown format version."""


class CorruptTensor(CirlabError):
    """Checkpoint payload is truncated or inconsistent with its header."""


class NonFiniteLoss(CirlabError):
    """A training loss evaluated to NaN or infinity."""


class DegenerateDelta(CirlabError):
    """Transition proxy has (near-)zero norm; the tuple cannot supervise a direction."""


class DegenerateBatch(CirlabError):
    """Every tuple in a probe batch was degenerate for the requested objective."""


class ConfigInvalid(CirlabError):
    """Experiment configuration failed validation."""


class MissingArtifact(CirlabError):
    """A pipeline output expected by the report stage is absent."""


class CandidateSetInvalid(CirlabError):
    """A subset-recall candidate set does not contain the query's relevant ids."""
