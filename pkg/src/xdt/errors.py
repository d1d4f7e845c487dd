"""Exception hierarchy shared by all cluster components.

Every error carries a stable ``code`` string that survives the control-plane
wire format, so callers can distinguish failure classes without depending on
Python exception identity across the network.
"""


class XdtError(Exception):
    code = "XDT_ERROR"


class AuthError(XdtError):
    """Reference token is forged, corrupted, truncated, or sealed under a
    different provider secret."""

    code = "AUTH_ERROR"


class TransferError(XdtError):
    """A data-plane transfer could not complete."""

    code = "XDT_TRANSFER_FAILED"
    reason = "failed"


class ObjectNotFound(TransferError):
    """Object was never buffered or its retrieval credits are exhausted."""

    reason = "not-found"


class ProducerUnreachable(TransferError):
    """No live endpoint at the producer address (instance shut down)."""

    reason = "unreachable"


class AbortedTransfer(TransferError):
    """Connection dropped mid-stream; does not consume a retrieval credit."""

    reason = "aborted"


class UnknownFunction(XdtError):
    code = "UNKNOWN_FUNCTION"


class FunctionError(XdtError):
    """The user handler raised."""

    code = "FUNCTION_ERROR"


class KeyNotFound(XdtError):
    """Storage-baseline lookup miss."""

    code = "KEY_NOT_FOUND"


class ConfigError(XdtError):
    code = "CONFIG_ERROR"


class BindError(XdtError):
    code = "BIND_ERROR"


class VerificationFailure(XdtError):
    """A benchmark payload failed its integrity check; the run is void."""

    code = "VERIFICATION_FAILURE"


# Wire status values carried in the response envelope status header.
STATUS_OK = "ok"
STATUS_UNKNOWN_FUNCTION = "unknown-function"
STATUS_FUNCTION_ERROR = "function-error"
STATUS_TRANSFER_FAILED = "xdt-transfer-failed"

_STATUS_TO_ERROR = {
    STATUS_UNKNOWN_FUNCTION: UnknownFunction,
    STATUS_FUNCTION_ERROR: FunctionError,
    STATUS_TRANSFER_FAILED: TransferError,
}


def raise_for_status(status: str, detail: str) -> None:
    """Map a response status value back to the matching exception."""
    if status == STATUS_OK:
        return
    exc = _STATUS_TO_ERROR.get(status, XdtError)
    raise exc(detail or status)
