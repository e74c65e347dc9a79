"""Exception types shared across the package."""


class HistosynthError(Exception):
    """Base class for all package errors."""


# --- data / phantom generation ---

class PlacementFailure(HistosynthError):
    """Fibers could not be placed without overlap within the retry budget."""


class DegenerateSize(HistosynthError):
    """Resampling would produce an image smaller than the minimum size."""


class PatchTooLarge(HistosynthError):
    """Requested patch size exceeds the image dimensions."""


# --- diffusion ---

class InvalidSchedule(HistosynthError):
    """Noise schedule parameters violate their constraints."""


class StepOutOfRange(HistosynthError):
    """Diffusion step index outside 1..T."""


# --- tensors / networks ---

class ShapeMismatch(HistosynthError):
    """Operands do not have compatible shapes."""


class BatchTooSmall(HistosynthError):
    """Batch smaller than a layer's minimum (minibatch-std needs >= 2)."""


# --- losses / training ---

class NonFiniteInput(HistosynthError):
    """A loss received NaN or infinite values."""


class NonFiniteLoss(HistosynthError):
    """Training produced a NaN or infinite loss."""


class EmptyValidationSet(HistosynthError):
    """Cycle validation called with no images."""


class EmptyRecords(HistosynthError):
    """Checkpoint selection called with no validation records."""


class IOFailure(HistosynthError):
    """Checkpoint or report file could not be read or written."""


class VersionMismatch(HistosynthError):
    """Checkpoint file carries an unsupported format version."""


# --- segmentation ---

class TooFewItems(HistosynthError):
    """Dataset too small for the requested number of folds."""


class EmptyEnsemble(HistosynthError):
    """Ensemble prediction called with no folds."""


# --- metrics ---

class ImageTooSmall(HistosynthError):
    """Image smaller than the metric's window."""


class EmptyList(HistosynthError):
    """Aggregation called on an empty list."""


# --- pipeline ---

class MissingBundle(HistosynthError):
    """A pseudo-labeling path requires a trained translation bundle."""


class MissingTruth(HistosynthError):
    """Evaluation requires the sequestered ground-truth masks."""
