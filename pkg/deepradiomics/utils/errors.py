"""Exception hierarchy shared by every deepradiomics module.

Each error also derives from the closest builtin so plain ``except ValueError``
handlers keep catching it.
"""


class DrfError(Exception):
	"""Base class for all deepradiomics errors."""


# --- volume / IO ---------------------------------------------------------------
class FormatError(DrfError, ValueError):
	"""Unsupported file format or voxel dtype."""


class CorruptFile(DrfError, ValueError):
	"""Header and payload disagree (dims vs byte count, bad magic, bad checksum)."""


class DegenerateVolume(DrfError, ValueError):
	"""Volume has fewer than two distinct intensities and cannot be normalized."""


class EmptyRoi(DrfError, ValueError):
	"""Mask has no foreground voxel."""


# --- cnn -----------------------------------------------------------------------
class WeightFormatError(DrfError, ValueError):
	"""Weight file does not match its declared layer shapes."""


class LayerError(DrfError, IndexError):
	"""Requested activation layer does not exist in the network."""


# --- texture -------------------------------------------------------------------
class DegenerateMatrix(DrfError, ValueError):
	"""Texture matrix cannot be built (no neighbor pair / no valid neighborhood)."""


# --- pipeline ------------------------------------------------------------------
class MissingModality(DrfError, KeyError):
	"""A configured modality is absent from the patient inputs."""


class ManifestError(DrfError, ValueError):
	"""Cohort manifest is unreadable, empty or malformed."""


# --- stats ---------------------------------------------------------------------
class UndefinedCorrelation(DrfError, ValueError):
	"""Correlation undefined because an input vector is constant."""


class UndefinedTest(DrfError, ValueError):
	"""Rank test undefined because every value is identical."""


# --- ml ------------------------------------------------------------------------
class SingleClassError(DrfError, ValueError):
	"""Training labels contain a single class."""


class DimensionError(DrfError, ValueError):
	"""Feature vector length does not match the trained model."""


class UndefinedAuc(DrfError, ValueError):
	"""AUC undefined because only one class is present."""


# --- cli -----------------------------------------------------------------------
class IngestError(DrfError, ValueError):
	"""Feature table missing, malformed or lacking required columns."""


class ConfigError(DrfError, ValueError):
	"""Invalid run configuration (unknown combination token, bad layer selection...)."""
