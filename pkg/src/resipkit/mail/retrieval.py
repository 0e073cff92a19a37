"""Login outcome and retrieval counts for plaintext IMAP and POP3 sessions.

Only aggregate facts leave this module: the account is reduced to a salted
digest of server and user name, and passwords and message bodies are never
kept.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from ..capture import DOWN, UP, Flow

IMAP = "IMAP"
POP3 = "POP3"

_IMAP_FETCH_BODY = re.compile(rb"^\* \d+ FETCH \(.*(BODY\[|BODY\.PEEK\[|RFC822[ )\]]|RFC822$)", re.I)
_POP3_MULTILINE = {"RETR", "TOP", "CAPA"}
_POP3_MULTILINE_NOARG = {"LIST", "UIDL"}


@dataclass(frozen=True)
class MailRetrievalSession:
    flow_id: str
    protocol: str
    account_id: str
    login_success: bool
    retrieved: int

    def __post_init__(self):
        if self.retrieved > 0 and not self.login_success:
            raise ValueError("messages retrieved without a successful login")

    def as_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "protocol": self.protocol,
            "account_id": self.account_id,
            "login_success": self.login_success,
            "retrieved": self.retrieved,
        }


def account_id(server: str, user: str) -> str:
    return hashlib.sha256(f"resipkit-account\0{server}\0{user.lower()}".encode()).hexdigest()[:16]


def _lines(data: bytes) -> list[bytes]:
    return [ln.rstrip(b"\r") for ln in data.split(b"\n") if ln.strip()]


def _imap_args(rest: bytes) -> list[bytes]:
    """Split an IMAP argument list honouring quoted strings."""
    return [a[0] or a[1] for a in re.findall(rb'"((?:[^"\\]|\\.)*)"|(\S+)', rest)]


def _parse_imap(flow: Flow) -> MailRetrievalSession | None:
    login_tag, user = None, None
    for line in _lines(flow.stream(UP)):
        parts = line.split(b" ", 2)
        if len(parts) >= 2 and parts[1].upper() == b"LOGIN":
            args = _imap_args(parts[2] if len(parts) > 2 else b"")
            login_tag, user = parts[0], (args[0].decode("utf-8", "replace") if args else "")
            break
        if len(parts) >= 2 and parts[1].upper() == b"AUTHENTICATE":
            login_tag, user = parts[0], ""
            break
    if login_tag is None:
        return None
    outcome = None
    retrieved = 0
    for line in _lines(flow.stream(DOWN)):
        if outcome is None and line.startswith(login_tag + b" "):
            status = line[len(login_tag) + 1:].split(b" ", 1)[0].upper()
            if status == b"OK":
                outcome = True
            elif status in (b"NO", b"BAD"):
                outcome = False
        elif outcome and _IMAP_FETCH_BODY.match(line):
            retrieved += 1
    if outcome is None:
        return None
    return MailRetrievalSession(flow.flow_id, IMAP, account_id(flow.key.dst_ip, user), outcome, retrieved if outcome else 0)


def _pop3_replies(data: bytes, commands: list[str]):
    """Status line per command, skipping multi-line bodies after +OK."""
    pos = 0

    def next_line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            return None
        line = data[pos:end].rstrip(b"\r")
        pos = end + 1
        return line

    banner = next_line()
    if banner is None:
        return None, []
    out = []
    for cmd in commands:
        line = next_line()
        if line is None:
            break
        ok = line.startswith(b"+OK")
        out.append(ok)
        verb, _, arg = cmd.partition(" ")
        multiline = verb in _POP3_MULTILINE or (verb in _POP3_MULTILINE_NOARG and not arg.strip())
        if ok and multiline:
            stop = data.find(b"\r\n.\r\n", pos - 2)
            if stop < 0:
                break
            pos = stop + 5
    return banner, out


def _parse_pop3(flow: Flow) -> MailRetrievalSession | None:
    commands = [ln.decode("utf-8", "replace") for ln in _lines(flow.stream(UP))]
    norm = [c.split(" ", 1)[0].upper() + (" " + c.split(" ", 1)[1] if " " in c else "") for c in commands]
    banner, oks = _pop3_replies(flow.stream(DOWN), norm)
    if banner is None or not banner.startswith(b"+OK"):
        return None
    user, login = None, None
    retrieved = 0
    for k, cmd in enumerate(norm):
        if k >= len(oks):
            break
        verb, _, arg = cmd.partition(" ")
        if verb == "USER":
            user = arg.strip()
        elif verb == "APOP":
            user = arg.split(" ")[0]
            login = oks[k] if login is None else login
        elif verb == "PASS" and login is None:
            login = oks[k]
        elif verb == "RETR" and login and oks[k]:
            retrieved += 1
    if login is None or user is None:
        return None
    return MailRetrievalSession(flow.flow_id, POP3, account_id(flow.key.dst_ip, user), login, retrieved)


def parse_mail_retrieval(flow: Flow, protocol: str) -> MailRetrievalSession | None:
    """Session facts, or None when the dialogue does not settle the login."""
    if protocol == IMAP:
        return _parse_imap(flow)
    if protocol == POP3:
        return _parse_pop3(flow)
    raise ValueError(f"not a mail retrieval protocol: {protocol}")


def retrieval_report(sessions: list[MailRetrievalSession], dropped: int = 0) -> dict:
    n = len(sessions)
    ok = sum(s.login_success for s in sessions)
    accounts: dict[str, bool] = {}
    for s in sessions:
        accounts[s.account_id] = accounts.get(s.account_id, False) or s.login_success
    n_acc = len(accounts)
    ok_acc = sum(accounts.values())
    return {
        "sessions": n,
        "successful_sessions": ok,
        "session_success_pct": round(100.0 * ok / n, 2) if n else 0.0,
        "accounts": n_acc,
        "successful_accounts": ok_acc,
        "account_success_pct": round(100.0 * ok_acc / n_acc, 2) if n_acc else 0.0,
        "retrieved_messages": sum(s.retrieved for s in sessions),
        "by_protocol": {p: sum(s.protocol == p for s in sessions) for p in (IMAP, POP3)},
        "dropped_ambiguous": dropped,
    }
