"""
Global error handling: one exception hierarchy for the MO system.

Every error has a stable string code. The code travels in ERROR wire
messages so the requesting side can re-raise the same subclass, and the
status API renders it as consistent JSON.
"""
import logging
from fastapi import FastAPI, Request, HTTPException
from fastapi.responses import JSONResponse

logger = logging.getLogger("mo")


class MOError(Exception):
    """Base application error."""
    code = "MO_ERROR"
    status_code = 400

    def __init__(self, message: str = "", detail: dict | None = None):
        self.message = message or self.code.replace("-", " ")
        self.detail = detail or {}
        super().__init__(self.message)


# ── core / cluster ───────────────────────────────────────────────────────────
class MalformedTokenError(MOError):
    code = "malformed-token"


class PayloadTooLargeError(MOError):
    code = "payload-too-large"
    status_code = 413


class InvalidExpireError(MOError):
    code = "invalid-expire"


# ── security / mobject ───────────────────────────────────────────────────────
class AuthenticationError(MOError):
    code = "authentication-failure"
    status_code = 403


class ModeMismatchError(MOError):
    code = "mode-mismatch"


class OversizeError(MOError):
    code = "oversize-after-seal"
    status_code = 413


class PayloadAbsentError(MOError):
    code = "payload-absent"
    status_code = 404


# ── server ───────────────────────────────────────────────────────────────────
class NotFoundError(MOError):
    code = "not-found"
    status_code = 404


class UnreachableHomeError(MOError):
    code = "unreachable-home"
    status_code = 503


class BusyExhaustedError(MOError):
    code = "busy-exhausted"
    status_code = 503


class UntrustedChannelError(MOError):
    code = "untrusted-channel"
    status_code = 403


class WrongHomeError(MOError):
    code = "wrong-home"


class VerifyFailedError(MOError):
    code = "verify-failed"


class UnknownPolicyError(MOError):
    code = "unknown-policy"


class UnknownObjectError(MOError):
    code = "unknown-object"
    status_code = 404


class AdoptRefusedError(MOError):
    code = "adopt-refused"
    status_code = 409


# ── net ──────────────────────────────────────────────────────────────────────
class ProtocolError(MOError):
    code = "protocol-error"


class BadMagicError(ProtocolError):
    code = "bad-magic"


class BadVersionError(ProtocolError):
    code = "bad-version"


class LengthMismatchError(ProtocolError):
    code = "length-mismatch"


class UnknownTypeError(ProtocolError):
    code = "unknown-type"


class MalformedBodyError(ProtocolError):
    code = "malformed-body"


class ConnectFailureError(MOError):
    code = "connect-failure"
    status_code = 503


class TransportTimeoutError(MOError):
    code = "timeout"
    status_code = 504


# ── lib-server / dao / cli ───────────────────────────────────────────────────
class DisconnectedError(MOError):
    code = "disconnected"
    status_code = 503


class ExpireOrderError(MOError):
    code = "expire-order-violation"
    status_code = 409


class ScriptMalformedError(MOError):
    code = "script-malformed"


class ScenarioAssertionError(MOError):
    code = "assertion-failure"


class BadConfigError(MOError):
    code = "bad-config"


class BindError(MOError):
    code = "bind-failure"


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


ERROR_CODES: dict[str, type[MOError]] = {
    cls.code: cls for cls in [MOError, *_all_subclasses(MOError)]
}


def error_from_code(code: str, message: str) -> MOError:
    """Rebuild the exception named by a wire error code."""
    return ERROR_CODES.get(code, MOError)(message)


def register_error_handlers(app: FastAPI):
    """Register global exception handlers on the FastAPI app."""

    @app.exception_handler(MOError)
    async def mo_error_handler(request: Request, exc: MOError):
        logger.warning(f"[{exc.code}] {exc.message}")
        return JSONResponse(
            status_code=exc.status_code,
            content={
                "error": exc.code,
                "message": exc.message,
                "detail": exc.detail,
            },
        )

    @app.exception_handler(HTTPException)
    async def http_error_handler(request: Request, exc: HTTPException):
        return JSONResponse(
            status_code=exc.status_code,
            content={
                "error": "HTTP_ERROR",
                "message": exc.detail,
                "detail": {},
            },
        )

    @app.exception_handler(Exception)
    async def unhandled_error_handler(request: Request, exc: Exception):
        logger.exception(f"Unhandled error: {exc}")
        return JSONResponse(
            status_code=500,
            content={
                "error": "INTERNAL_ERROR",
                "message": "An unexpected error occurred",
                "detail": {"type": type(exc).__name__},
            },
        )
