"""Exception hierarchy shared by all moeforge modules.

Every error raised by the library derives from :class:`MoeforgeError`, so
callers (and the CLI) can distinguish validation failures from genuine bugs
or I/O problems with a single except clause.
"""


class MoeforgeError(Exception):
    """Base class for all moeforge validation and format errors."""


# -- tensor store ------------------------------------------------------------

class InvalidValue(MoeforgeError):
    """A scalar cannot be encoded in the requested format (e.g. NaN -> FP8)."""


class FormatError(MoeforgeError):
    """A container file has a bad magic, version, or unparsable header."""


class CorruptFile(MoeforgeError):
    """A container file is truncated or its payload sizes are inconsistent."""


# -- layout planner ----------------------------------------------------------

class InfeasibleLayout(MoeforgeError):
    """The model cannot be placed on the requested parallel configuration."""


class UnknownLayer(MoeforgeError):
    """A parameter references a layer index outside the model."""


class UnknownExpert(MoeforgeError):
    """A parameter references a routed-expert index outside the model."""


class OrphanParam(MoeforgeError):
    """A parameter has no placement rule under the current layout."""


# -- checkpoint converter ----------------------------------------------------

class DuplicateParam(MoeforgeError):
    """The same parameter name appears more than once."""


class MissingLayer(MoeforgeError):
    """Layer indices in a checkpoint are not dense starting at zero."""


class ConfigMismatch(MoeforgeError):
    """A checkpoint does not fit the layout plan it is being sharded under."""


class ReplicaMismatch(MoeforgeError):
    """Replicas of a replicated parameter are not byte-identical."""


class IncompleteShardSet(MoeforgeError):
    """A shard set is missing ranks or shard files required by its plan."""


# -- collective simulator ----------------------------------------------------

class CollectiveMismatch(MoeforgeError):
    """Ranks matched on the same collective disagree on the operation tag."""


# -- multitask scheduler -----------------------------------------------------

class EmptySequence(MoeforgeError):
    """A per-token NLL list is empty."""


class UnknownCheckpoint(MoeforgeError):
    """A sample record has no NLL trace for the requested checkpoint tag."""


class InvalidMetric(MoeforgeError):
    """A task metric is outside [0, 1]."""


class UnknownTask(MoeforgeError):
    """A batch entry references a task with no weight."""


class InvalidWeights(MoeforgeError):
    """Task weights do not form a probability distribution."""


# -- eval metrics ------------------------------------------------------------

class InvalidInput(MoeforgeError):
    """Metric inputs are malformed (length mismatch, empty, out of range)."""


class DegenerateInput(MoeforgeError):
    """Metric inputs are pathological (single class, no relevant items)."""
