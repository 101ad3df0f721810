"""Exception types shared across the package."""


class MedPeftError(Exception):
    """Base class for all package-specific errors."""


# ---- volume ingestion / preprocessing ----

class MissingModality(MedPeftError):
    """Fewer image files than expected channels."""


class ShapeMismatch(MedPeftError):
    """Arrays that must be spatially aligned are not."""


class UnknownLabelValue(MedPeftError):
    """A label volume contains a value outside its semantics map."""


class NonInvertibleAffine(MedPeftError):
    """Voxel-to-world matrix is singular."""


class InvalidTarget(MedPeftError):
    """Resize target has a non-positive dimension."""


# ---- synthetic cohorts ----

class LesionDoesNotFit(MedPeftError):
    """Sampled lesion geometry cannot be placed inside the volume."""


# ---- model construction / adapters ----

class InvalidConfig(MedPeftError):
    """Model or adapter configuration violates its invariants."""


class ChannelMismatch(MedPeftError):
    """Feature map channel count does not match the module."""


class IncompatibleSite(MedPeftError):
    """Adapter placement requested on a block that cannot host it."""


class NoAdaptersAttached(MedPeftError):
    """A PEFT policy was applied to a model without adapters."""


class ArchitectureMismatch(MedPeftError):
    """Checkpoint or input structure does not match the model."""


# ---- training ----

class NonFiniteLoss(MedPeftError):
    """Loss became NaN/Inf during optimization."""


class EmptyCohort(MedPeftError):
    """No cases available for the requested operation."""


# ---- statistics ----

class LengthMismatch(MedPeftError):
    """Paired score arrays differ in length."""


class TooFewCases(MedPeftError):
    """Not enough paired cases for a significance test."""


# ---- reporting ----

class NoRunsFound(MedPeftError):
    """Report directory contains no usable run outputs."""


class SchemaVersionMismatch(MedPeftError):
    """Artifacts with incompatible schema versions were mixed."""
