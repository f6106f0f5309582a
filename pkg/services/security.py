"""
End-to-end sealing of payloads.

Layout: mode(1) | body, where body is
    none                   plaintext
    authenticate           tag(32) | plaintext
    encrypt                nonce(8) | ciphertext
    encrypt_authenticate   tag(32) | nonce(8) | ciphertext

Sealing is deterministic: the CTR nonce is derived from key and content, so
sealing identical content twice yields identical bytes (and tokens). The tag
covers the mode byte and everything after it.
"""
from Crypto.Cipher import AES
from Crypto.Hash import HMAC, SHA256
from Crypto.Protocol.KDF import HKDF

from errors import AuthenticationError, ModeMismatchError, OversizeError
from schemas.security import SealedBuffer, SecurityMode, SecurityPolicy
from services.tokens import DEFAULT_MAX_PAYLOAD

TAG_SIZE = 32
NONCE_SIZE = 8


def _subkeys(key: bytes) -> tuple[bytes, bytes]:
    enc_key, mac_key = HKDF(key, 32, b"", SHA256, num_keys=2, context=b"mo-seal")
    return enc_key, mac_key


def _tag(mac_key: bytes, mode: SecurityMode, data: bytes) -> bytes:
    return HMAC.new(mac_key, bytes([mode]) + data, digestmod=SHA256).digest()


def seal(policy: SecurityPolicy, plaintext: bytes, max_payload_size: int = DEFAULT_MAX_PAYLOAD) -> SealedBuffer:
    mode = policy.mode
    if mode == SecurityMode.NONE:
        body = bytes(plaintext)
    else:
        enc_key, mac_key = _subkeys(policy.key)
        data = bytes(plaintext)
        if mode.encrypted:
            nonce = HMAC.new(mac_key, b"nonce" + data, digestmod=SHA256).digest()[:NONCE_SIZE]
            data = nonce + AES.new(enc_key, AES.MODE_CTR, nonce=nonce).encrypt(data)
        body = _tag(mac_key, mode, data) + data if mode.authenticated else data

    sealed = SealedBuffer(mode=mode, body=body)
    if 1 + len(body) > max_payload_size:
        raise OversizeError(f"sealed payload of {1 + len(body)} bytes exceeds {max_payload_size}")
    return sealed


def open_sealed(policy: SecurityPolicy, sealed: SealedBuffer) -> bytes:
    """Inverse of seal. Tampering is detected in authenticated modes."""
    if sealed.mode != policy.mode:
        raise ModeMismatchError(f"sealed with {sealed.mode.name}, policy is {policy.mode.name}")
    mode = policy.mode
    if mode == SecurityMode.NONE:
        return sealed.body

    enc_key, mac_key = _subkeys(policy.key)
    data = sealed.body
    if mode.authenticated:
        if len(data) < TAG_SIZE:
            raise AuthenticationError("sealed body shorter than its tag")
        tag, data = data[:TAG_SIZE], data[TAG_SIZE:]
        try:
            HMAC.new(mac_key, bytes([mode]) + data, digestmod=SHA256).verify(tag)
        except ValueError as e:
            raise AuthenticationError("payload authentication failed") from e
    if mode.encrypted:
        if len(data) < NONCE_SIZE:
            raise AuthenticationError("sealed body shorter than its nonce")
        nonce, ciphertext = data[:NONCE_SIZE], data[NONCE_SIZE:]
        data = AES.new(enc_key, AES.MODE_CTR, nonce=nonce).decrypt(ciphertext)
    return data
