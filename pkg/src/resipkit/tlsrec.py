"""TLS record scanning and ClientHello/SNI extraction, no decryption."""

from __future__ import annotations

import re

CHANGE_CIPHER_SPEC = 0x14
ALERT = 0x15
HANDSHAKE = 0x16
APPLICATION_DATA = 0x17
CONTENT_TYPES = frozenset({CHANGE_CIPHER_SPEC, ALERT, HANDSHAKE, APPLICATION_DATA})

CLIENT_HELLO = 0x01
RECORD_HEADER = 5
# TLSCiphertext.length upper bound: 2^14 + 2048
MAX_RECORD = (1 << 14) + 2048

_EXT_SERVER_NAME = 0x0000
_HOSTNAME_RE = re.compile(r"^(?=.{1,253}$)([a-z0-9_](?:[a-z0-9_-]{0,61}[a-z0-9_])?)(\.[a-z0-9_](?:[a-z0-9_-]{0,61}[a-z0-9_])?)*$")


def valid_version(major: int, minor: int) -> bool:
    return major == 3 and 1 <= minor <= 4


def is_client_hello(payload: bytes) -> bool:
    """Record header claims a handshake whose first message is a ClientHello."""
    return (
        len(payload) >= RECORD_HEADER + 1
        and payload[0] == HANDSHAKE
        and payload[1] == 3
        and payload[2] <= 4
        and payload[5] == CLIENT_HELLO
    )


def records_well_formed(data: bytes, limit: int, more_follows: bool) -> bool:
    """True iff ``data[:limit]`` is a chain of plausible TLS records.

    Each record needs a known content type, a 0x0301-0x0304 legacy version and
    a non-zero length within the protocol bound. The chain must tile the
    window exactly; a record (or header) cut by the window edge is accepted
    only when the stream continues past ``limit``.
    """
    window = data[:limit]
    truncated = more_follows or len(data) > limit
    if not window:
        return False
    pos = 0
    while pos < len(window):
        if len(window) - pos < RECORD_HEADER:
            return truncated and _partial_header_ok(window[pos:])
        ctype, major, minor = window[pos], window[pos + 1], window[pos + 2]
        length = (window[pos + 3] << 8) | window[pos + 4]
        if ctype not in CONTENT_TYPES or not valid_version(major, minor):
            return False
        if length == 0 or length > MAX_RECORD:
            return False
        pos += RECORD_HEADER + length
        if pos > len(window):
            return truncated
    return True


def _partial_header_ok(frag: bytes) -> bool:
    if frag[0] not in CONTENT_TYPES:
        return False
    if len(frag) >= 2 and frag[1] != 3:
        return False
    if len(frag) >= 3 and not valid_version(3, frag[2]):
        return False
    return True


def _handshake_bytes(stream: bytes, need: int = 4) -> bytes:
    """Concatenate handshake-record fragments from the start of the stream."""
    out = bytearray()
    pos = 0
    target = None
    while pos + RECORD_HEADER <= len(stream):
        if stream[pos] != HANDSHAKE or stream[pos + 1] != 3:
            break
        length = (stream[pos + 3] << 8) | stream[pos + 4]
        out += stream[pos + RECORD_HEADER:pos + RECORD_HEADER + length]
        pos += RECORD_HEADER + length
        if target is None and len(out) >= need:
            target = 4 + int.from_bytes(out[1:4], "big")
        if target is not None and len(out) >= target:
            break
    return bytes(out)


def client_hello_sni(stream: bytes) -> str | None:
    """Server name from a ClientHello at the start of ``stream``.

    Returns the host_name entry lowercased with any trailing dot removed, or
    None when there is no ClientHello, no SNI, or the name is malformed.
    """
    if not is_client_hello(stream):
        return None
    hs = _handshake_bytes(stream)
    if len(hs) < 4 or hs[0] != CLIENT_HELLO:
        return None
    body = hs[4:4 + int.from_bytes(hs[1:4], "big")]
    try:
        raw = _server_name(body)
    except IndexError:
        return None
    if raw is None:
        return None
    try:
        name = raw.decode("ascii").lower().rstrip(".")
    except UnicodeDecodeError:
        return None
    return name if _HOSTNAME_RE.match(name) else None


def _server_name(body: bytes) -> bytes | None:
    pos = 2 + 32  # legacy_version, random
    pos += 1 + body[pos]  # session id
    pos += 2 + int.from_bytes(body[pos:pos + 2], "big")  # cipher suites
    pos += 1 + body[pos]  # compression methods
    if pos + 2 > len(body):
        return None
    ext_end = pos + 2 + int.from_bytes(body[pos:pos + 2], "big")
    pos += 2
    while pos + 4 <= min(ext_end, len(body)):
        etype = int.from_bytes(body[pos:pos + 2], "big")
        elen = int.from_bytes(body[pos + 2:pos + 4], "big")
        ext = body[pos + 4:pos + 4 + elen]
        if len(ext) < elen:
            raise IndexError("extension overruns ClientHello")
        if etype == _EXT_SERVER_NAME:
            return _first_host_name(ext)
        pos += 4 + elen
    return None


def _first_host_name(ext: bytes) -> bytes | None:
    list_len = int.from_bytes(ext[0:2], "big")
    pos, end = 2, min(2 + list_len, len(ext))
    while pos + 3 <= end:
        ntype = ext[pos]
        nlen = int.from_bytes(ext[pos + 1:pos + 3], "big")
        name = ext[pos + 3:pos + 3 + nlen]
        if len(name) < nlen:
            raise IndexError("server name overruns extension")
        if ntype == 0:
            return name
        pos += 3 + nlen
    return None


def valid_hostname(name: str) -> bool:
    return bool(_HOSTNAME_RE.match(name))
