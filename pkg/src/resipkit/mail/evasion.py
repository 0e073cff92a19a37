"""Undo encoding tricks spammers use to dodge text filters.

Quoted-printable bodies are decoded, the bytes are read as UTF-8, styled
mathematical letters and digits (U+1D400-U+1D7FF) are folded to ASCII, and the
result is lowercased with whitespace collapsed. The whole pipeline is repeated
until the text stops changing, which makes the decoder idempotent even for
doubly encoded input such as ``=3D41``.
"""

from __future__ import annotations

import binascii
import email
import re
import unicodedata
from dataclasses import dataclass
from email import policy

MATH_ALNUM = range(0x1D400, 0x1D800)
_MAX_PASSES = 64
_HEADER_LINE = re.compile(rb"^[!-9;-~]+:[ \t]")


def _build_fold_table() -> dict[int, str]:
    table = {}
    for cp in MATH_ALNUM:
        folded = unicodedata.normalize("NFKC", chr(cp))
        if len(folded) == 1 and folded.isascii() and folded.isalnum():
            table[cp] = folded
    return table


FOLD_TABLE = _build_fold_table()


@dataclass
class DecodeStats:
    invalid_utf8_bytes: int = 0
    folded_symbols: int = 0
    passes: int = 0


def _looks_like_mime(raw: bytes) -> bool:
    head, sep, _ = raw.replace(b"\r\n", b"\n").partition(b"\n\n")
    if not sep:
        return False
    lines = head.split(b"\n")
    return bool(lines) and _HEADER_LINE.match(lines[0]) is not None and all(
        _HEADER_LINE.match(line) or line[:1] in (b" ", b"\t") for line in lines
    )


def _text(data: bytes, charset: str, stats: DecodeStats | None) -> str:
    if charset.lower().replace("_", "-") not in ("utf-8", "utf8", "us-ascii", "ascii"):
        try:
            return data.decode(charset, errors="replace")
        except LookupError:
            pass
    if stats is not None:
        escaped = data.decode("utf-8", errors="surrogateescape")
        stats.invalid_utf8_bytes += sum(1 for ch in escaped if "\udc80" <= ch <= "\udcff")
    return data.decode("utf-8", errors="replace")


def _body_texts(raw: bytes, stats: DecodeStats | None) -> list[str]:
    if not _looks_like_mime(raw):
        return [_text(binascii.a2b_qp(raw), "utf-8", stats)]
    msg = email.message_from_bytes(raw, policy=policy.compat32)
    texts = []
    for part in msg.walk():
        if part.is_multipart() or part.get_content_maintype() != "text":
            continue
        payload = part.get_payload(decode=False)
        if not isinstance(payload, str):
            continue
        raw_part = payload.encode("latin-1", errors="replace")
        cte = (part.get("Content-Transfer-Encoding") or "").strip().lower()
        if cte == "base64":
            try:
                data = binascii.a2b_base64(raw_part)
            except binascii.Error:
                data = raw_part
        elif cte in ("7bit", "8bit", "binary"):
            data = raw_part
        else:
            data = binascii.a2b_qp(raw_part)
        texts.append(_text(data, part.get_content_charset() or "utf-8", stats))
    return texts


def fold_math_alnum(text: str, stats: DecodeStats | None = None) -> str:
    folded = text.translate(FOLD_TABLE)
    if stats is not None:
        stats.folded_symbols += sum(1 for ch in text if ord(ch) in FOLD_TABLE)
    return folded


def _one_pass(raw: bytes, stats: DecodeStats | None) -> str:
    text = " ".join(_body_texts(raw, stats))
    text = fold_math_alnum(text, stats)
    return " ".join(text.lower().split())


def decode_evasions(raw: bytes | str, stats: DecodeStats | None = None) -> str:
    data = raw.encode("utf-8", errors="surrogatepass") if isinstance(raw, str) else bytes(raw)
    text = _one_pass(data, stats)
    for n in range(1, _MAX_PASSES):
        again = _one_pass(text.encode("utf-8", errors="surrogatepass"), stats)
        if again == text:
            if stats is not None:
                stats.passes = n
            return text
        text = again
    return text
