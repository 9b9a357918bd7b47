"""Exception hierarchy shared across the package."""


class VoxmeshError(Exception):
    """Base class for all voxmesh errors."""


class MeshConfigError(VoxmeshError):
    """Invalid mesh definition (duplicate axis name, zero size, ...)."""


class ProtocolError(VoxmeshError):
    """Channel misuse: tag mismatch, non-neighbor send, message on a closed mesh."""


class CollectiveMismatchError(VoxmeshError):
    """Workers entered a collective with incompatible payloads (shape/dtype)."""


class DeadlockError(VoxmeshError):
    """A collective or channel wait timed out; names the unarrived coordinates."""


class WorkerShutdown(VoxmeshError):
    """Raised inside a worker when the mesh is tearing down after a failure elsewhere."""


class WorkerFailed(VoxmeshError):
    """Driver-side wrapper for the first worker error of a collective program."""

    def __init__(self, coord, message):
        super().__init__(f"worker {coord}: {message}")
        self.coord = coord


class ShardingError(VoxmeshError):
    """Layout/tensor-spec violation (divisibility, unknown dim, channel-dim assignment)."""


class HaloError(VoxmeshError):
    """Halo margins incompatible with the local block (margin > local extent, even kernel)."""


class GraphBuildError(VoxmeshError):
    """U-Net graph cannot be realized on the given mesh/layout."""


class AugmentError(VoxmeshError):
    """Augmentation precondition violated (no tumor voxels, empty liver, ...)."""


class SpvFormatError(VoxmeshError):
    """Base class for volume-file format errors."""


class BadMagicError(SpvFormatError):
    """File does not start with the SPV1 magic."""


class TruncatedPayloadError(SpvFormatError):
    """Payload shorter than the header promises."""


class DtypeCodeError(SpvFormatError):
    """Unknown dtype code in the header."""


class LabelRangeError(SpvFormatError):
    """Segmentation volume contains labels outside {0, 1, 2}."""
