"""Exception hierarchy shared by every layer of the package.

Errors raised inside the simulated KME travel over the wire by class name
(``{"error": "<ClassName>", "message": ...}``) and are re-raised client-side
as the same class, see :func:`error_from_name`.
"""


class QkdKemError(Exception):
    """Base class for all errors raised by qkdkem."""


# -- KEM layer ---------------------------------------------------------------

class UnknownSuite(QkdKemError):
    pass


class MalformedKey(QkdKemError):
    pass


class MalformedCiphertext(QkdKemError):
    pass


# -- KME / key delivery ------------------------------------------------------

class InvalidConfig(QkdKemError):
    pass


class InvalidRequest(QkdKemError):
    """Request body is not a valid ETSI-shaped message."""


class KeyPoolExhausted(QkdKemError):
    pass


class UnknownKeyId(QkdKemError):
    """Key or key stream id was never issued, or has already been retired."""


class SessionAlreadyOpen(QkdKemError):
    pass


class SessionNotOpen(QkdKemError):
    pass


class PeerSessionNotReady(QkdKemError):
    """The peer end of an ETSI 004 stream has not called OPEN_CONNECT yet.

    Retryable: the caller may back off and try again.
    """


class TransportError(QkdKemError):
    pass


class TransportTimeout(TransportError):
    pass


class BindFailure(QkdKemError):
    pass


# -- hybrid KEM / handshake ----------------------------------------------------

class InvalidSuite(QkdKemError):
    pass


class MalformedPayload(QkdKemError):
    pass


class EmptyPreference(QkdKemError):
    pass


class UnknownGroup(QkdKemError):
    pass


class UnsupportedGroup(QkdKemError):
    pass


class SelectedGroupNotOffered(QkdKemError):
    pass


class MalformedFrame(QkdKemError):
    pass


class KeyConfirmationFailed(QkdKemError):
    """Finished MAC did not verify: the two parties hold different secrets."""


# -- benchmarking ------------------------------------------------------------

class EmptyRun(QkdKemError):
    pass


_WIRE_ERRORS = {
    cls.__name__: cls
    for cls in (
        InvalidConfig, InvalidRequest, KeyPoolExhausted, UnknownKeyId,
        SessionAlreadyOpen, SessionNotOpen, PeerSessionNotReady,
        UnsupportedGroup, MalformedPayload, MalformedCiphertext,
        MalformedFrame, KeyConfirmationFailed, UnknownSuite, MalformedKey,
    )
}


def error_from_name(name, message=""):
    """Rebuild an exception received over the wire; unknown names become TransportError."""
    cls = _WIRE_ERRORS.get(name)
    if cls is None:
        return TransportError(f"{name}: {message}")
    return cls(message)
