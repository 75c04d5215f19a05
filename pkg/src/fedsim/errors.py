"""Exception hierarchy shared across the simulator."""


class FedsimError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor / autodiff ---

class ShapeMismatch(FedsimError):
    pass


class LogDomain(FedsimError):
    pass


class NotScalar(FedsimError):
    pass


class NoTape(FedsimError):
    pass


# --- model ---

class InvalidConfig(FedsimError):
    pass


class LengthMismatch(FedsimError):
    pass


# --- augmentation ---

class BadPolicy(FedsimError):
    pass


class OutOfBounds(FedsimError):
    pass


# --- prototypes ---

class EmptyInput(FedsimError):
    pass


class RaggedInput(FedsimError):
    pass


class DimensionMismatch(FedsimError):
    pass


# --- losses ---

class BadLabel(FedsimError):
    pass


class ZeroVector(FedsimError):
    pass


class EmptyGlobals(FedsimError):
    pass


class BadTemperature(FedsimError):
    pass


# --- wire format ---

class WireError(FedsimError):
    pass


class Truncated(WireError):
    pass


class BadMagicVersion(WireError):
    pass


class TrailingBytes(WireError):
    pass


# --- data ---

class BadMagic(FedsimError):
    pass


class CountMismatch(FedsimError):
    pass


class UnknownDomain(FedsimError):
    pass


class EmptyResult(FedsimError):
    pass


# --- federation / harness ---

class EmptyDataset(FedsimError):
    pass


class EmptyUpdates(FedsimError):
    pass


class ClientFailure(FedsimError):
    pass


class TransportError(FedsimError):
    pass


class EmptyTestSet(FedsimError):
    pass


class BadConfig(FedsimError):
    pass
