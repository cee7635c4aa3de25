"""Exception types shared across the workbench."""


class HevCrlError(Exception):
    """Base class for all workbench errors."""


# --- drive cycle ingestion ---

class MalformedRow(HevCrlError, ValueError):
    """A CSV row did not parse as finite numbers."""


class NonUniformSampling(HevCrlError, ValueError):
    """Cycle timestamps are not uniformly spaced."""


class NegativeSpeed(HevCrlError, ValueError):
    """Cycle contains a negative speed sample."""


class IndexOutOfRange(HevCrlError, IndexError):
    """Step index outside the cycle."""


# --- powertrain ---

class PowerOutOfRange(HevCrlError, ValueError):
    """Requested engine power outside [0, max_power]."""


class PowerLimitExceeded(HevCrlError, ValueError):
    """Battery power outside its charge/discharge limits."""


# --- environment ---

class StepOutOfRange(HevCrlError, IndexError):
    """Corridor queried outside [0, Ts]."""


class EpisodeFinished(HevCrlError, RuntimeError):
    """step() called after the episode terminated."""


class ZeroDistance(HevCrlError, ValueError):
    """Fuel economy undefined for zero distance."""


class EmptyEpisode(HevCrlError, ValueError):
    """Episode returns requested for an empty transition list."""


# --- learner substrate ---

class ShapeMismatch(HevCrlError, ValueError):
    """Tensor shapes do not conform."""


class EmptyBatch(HevCrlError, ValueError):
    """An update was requested on an empty batch."""


class InsufficientSamples(HevCrlError, ValueError):
    """Replay buffer holds fewer transitions than the requested batch."""


# --- trainers ---

class InvalidGamma(HevCrlError, ValueError):
    """Discount factor outside (0, 1]."""


class NonFiniteObjective(HevCrlError, ArithmeticError):
    """Dual objective evaluated to NaN/inf."""


class KlDivergenceBlowup(HevCrlError, RuntimeError):
    """Measured policy KL exceeded the hard blow-up threshold."""


class DegenerateWeights(HevCrlError, RuntimeError):
    """Variational weights are unusable (NaN or zero mass)."""


# --- oracle ---

class InstanceTooLarge(HevCrlError, ValueError):
    """Discretized instance exceeds the configured search budget."""


class Infeasible(HevCrlError, RuntimeError):
    """No action sequence keeps SOC inside the corridor."""


# --- cli ---

class ConfigError(HevCrlError, ValueError):
    """Invalid or inconsistent run configuration."""
