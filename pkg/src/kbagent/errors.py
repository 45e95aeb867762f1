"""Exception types shared across the package."""

from __future__ import annotations


class KbAgentError(Exception):
    """Base class for all package errors."""


# --- knowledge store ---

class UnregisteredRelation(KbAgentError):
    """A triple referenced a relation name that was never registered."""


class RelationChannelConflict(KbAgentError):
    """The same relation name was registered with two different channels."""


class StaleWrite(KbAgentError):
    """An upsert carried a step_index older than the stored triple's."""


class InvalidUnit(KbAgentError):
    """A sub-goal unit violated its invariants (empty name or trajectory)."""


class StoreParseError(KbAgentError):
    """A persisted store file failed to parse."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class SchemaVersionMismatch(KbAgentError):
    """A persisted file carries an unsupported schema version."""


# --- retrieval ---

class EmptyCorpus(KbAgentError):
    """Retrieval was asked to run against an empty corpus."""


class RerankerError(KbAgentError):
    """The pluggable rerank scorer failed on a candidate."""


# --- embedder ---

class NonFiniteLoss(KbAgentError):
    """The contrastive loss evaluated to NaN or infinity."""


class TrainingDiverged(KbAgentError):
    """Final-epoch mean loss exceeded the first-epoch mean loss."""


class UnknownDocId(KbAgentError):
    """An eval set referenced a document id missing from the corpus."""


class EmptyEvalSetWarning(UserWarning):
    """Recall was evaluated over an empty eval set (defined as 0)."""


# --- dataset construction ---

class ReplayDivergence(KbAgentError):
    """The simulator rejected an expert action during trajectory replay."""


# --- distiller ---

class BackendError(KbAgentError):
    """The decision-model distiller backend failed outright."""


class MalformedModelResponse(KbAgentError):
    """A structured model response failed to parse; raw text preserved."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


# --- agent / microworld ---

class DecisionModelError(KbAgentError):
    """A decision model failed mid-episode."""


class UnknownTask(KbAgentError):
    """The simulator has no task with the requested id."""


class UnparseableAction(KbAgentError):
    """An action string does not parse under the action grammar."""
