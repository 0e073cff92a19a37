"""Plaintext SMTP dialogue reconstruction and delivery-outcome classification."""

from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..capture import DOWN, UP, Flow

REJECTED_BEFORE_HELO = "rejected-before-helo"
CLOSED_BEFORE_RCPT = "closed-before-rcpt"
REJECTED_AFTER_DATA = "rejected-after-data"
DELIVERED = "delivered"
STAGES = (REJECTED_BEFORE_HELO, CLOSED_BEFORE_RCPT, REJECTED_AFTER_DATA, DELIVERED)

IP_BLOCKLIST = "ip-blocklist"
CONTENT_FILTER = "content-filter"
AUTH_FAILURE = "auth-failure"
NO_CAUSE = "none"
CAUSES = (IP_BLOCKLIST, CONTENT_FILTER, AUTH_FAILURE, NO_CAUSE)

_REPLY_LINE = re.compile(rb"^(\d{3})([ -]?)(.*)$")
_ADDRESS = re.compile(r"<([^<>]*)>")
_BANNER_HOST = re.compile(r"^([A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?(?:\.[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?)+)\b")


@dataclass(frozen=True)
class Reply:
    code: int
    text: str

    @property
    def positive(self) -> bool:
        return 200 <= self.code < 400

    @property
    def negative(self) -> bool:
        return self.code >= 400


@dataclass(frozen=True)
class DeliveryOutcome:
    stage: str
    failure_cause: str = NO_CAUSE

    def __post_init__(self):
        if self.stage == DELIVERED and self.failure_cause != NO_CAUSE:
            raise ValueError("a delivered session cannot carry a failure cause")


@dataclass(frozen=True)
class FailureRule:
    cause: str
    phrases: tuple[str, ...]

    def matches(self, text: str) -> bool:
        low = text.lower()
        return any(re.search(r"\b" + re.escape(p.lower()) + r"\b", low) for p in self.phrases)


def parse_failure_rules(doc: dict) -> list[FailureRule]:
    rules = []
    for entry in doc.get("rules", []):
        if entry["cause"] not in CAUSES or entry["cause"] == NO_CAUSE:
            raise ValueError(f"unknown failure cause {entry['cause']!r}")
        rules.append(FailureRule(entry["cause"], tuple(entry["phrases"])))
    return rules


def load_failure_rules(path: str | Path | None = None) -> list[FailureRule]:
    """Keyword rules, checked in file order; the bundled set when ``path`` is None."""
    if path is None:
        text = resources.files("resipkit").joinpath("data/failure_rules.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_failure_rules(json.loads(text))


def classify_failure(replies: list[Reply], rules: list[FailureRule]) -> str:
    texts = [r.text for r in replies if r.negative]
    for rule in rules:
        if any(rule.matches(t) for t in texts):
            return rule.cause
    return NO_CAUSE


@dataclass
class SmtpSession:
    flow_id: str
    client_ip: str
    server_ip: str
    server_port: int
    server_name: str | None = None
    client_fqdn: str | None = None
    sender: str | None = None
    recipients: list[str] = field(default_factory=list)
    messages: list[bytes] = field(default_factory=list)
    replies: list[Reply] = field(default_factory=list)
    commands: list[str] = field(default_factory=list)
    accepted_recipients: int = 0
    accepted_messages: int = 0
    outcome: DeliveryOutcome = DeliveryOutcome(REJECTED_BEFORE_HELO)
    truncated: bool = False
    opaque: bool = False

    @property
    def message(self) -> bytes | None:
        return self.messages[0] if self.messages else None

    @property
    def message_count(self) -> int:
        return len(self.messages)

    @property
    def server(self) -> str:
        return self.server_name or self.server_ip

    def summary(self) -> dict:
        """Aggregate-safe view: message digests instead of bodies, no AUTH data."""
        return {
            "flow_id": self.flow_id,
            "client_ip": self.client_ip,
            "server": self.server,
            "server_port": self.server_port,
            "client_fqdn": self.client_fqdn,
            "sender": self.sender,
            "recipients": list(self.recipients),
            "message_count": self.message_count,
            "message_sha256": [hashlib.sha256(m).hexdigest() for m in self.messages],
            "reply_codes": [r.code for r in self.replies],
            "stage": self.outcome.stage,
            "failure_cause": self.outcome.failure_cause,
            "truncated": self.truncated,
            "opaque": self.opaque,
        }


def parse_replies(data: bytes) -> tuple[list[Reply], bool]:
    """Group server lines into replies; second value is True if cut mid-reply."""
    replies = []
    pending: list[str] = []
    code = None
    lines = data.split(b"\n")
    complete = data.endswith(b"\n")
    if complete:
        lines = lines[:-1]
    for k, raw in enumerate(lines):
        if k == len(lines) - 1 and not complete:
            return replies, True
        m = _REPLY_LINE.match(raw.rstrip(b"\r"))
        if not m:
            continue
        if code is not None and int(m.group(1)) != code:
            replies.append(Reply(code, "\n".join(pending)))
            pending, code = [], None
        code = int(m.group(1))
        pending.append(m.group(3).decode("utf-8", errors="replace").strip())
        if m.group(2) != b"-":
            replies.append(Reply(code, "\n".join(pending)))
            pending, code = [], None
    return replies, code is not None


def _address(arg: str) -> str | None:
    m = _ADDRESS.search(arg)
    addr = m.group(1) if m else arg.split(":", 1)[-1].strip().split(" ")[0]
    addr = addr.strip().lower()
    return addr or None


def _unstuff(body: bytes) -> bytes:
    return b"\r\n".join(line[1:] if line.startswith(b"..") else line for line in body.split(b"\r\n"))


def parse_smtp_session(flow: Flow, rules: list[FailureRule] | None = None) -> SmtpSession:
    rules = load_failure_rules() if rules is None else rules
    up, down = flow.stream(UP), flow.stream(DOWN)
    s = SmtpSession(flow.flow_id, flow.key.src_ip, flow.key.dst_ip, flow.key.dst_port)
    replies, cut = parse_replies(down)
    s.truncated = cut
    s.replies = list(replies)
    queue = deque(replies)
    banner = queue.popleft() if queue else None
    if banner is None:
        s.truncated = True
    else:
        m = _BANNER_HOST.match(banner.text)
        if m:
            s.server_name = m.group(1).lower()
    greeted = banner is not None and 200 <= banner.code < 300

    pos = 0
    while greeted and pos < len(up):
        end = up.find(b"\n", pos)
        if end < 0:
            s.truncated = True
            break
        line = up[pos:end].rstrip(b"\r").decode("utf-8", errors="replace")
        pos = end + 1
        verb, _, arg = line.partition(" ")
        verb = verb.upper()
        s.commands.append(verb)
        reply = queue.popleft() if queue else None
        if reply is None:
            s.truncated = s.truncated or verb != "QUIT"
            break
        if verb in ("EHLO", "HELO"):
            s.client_fqdn = s.client_fqdn or (arg.strip().lower() or None)
        elif verb == "MAIL":
            s.sender = s.sender or _address(arg)
        elif verb == "RCPT":
            addr = _address(arg)
            if addr:
                s.recipients.append(addr)
            if reply.positive:
                s.accepted_recipients += 1
        elif verb == "AUTH":
            # Challenge/response lines carry credentials; skip them unread.
            while reply is not None and reply.code == 334:
                end = up.find(b"\n", pos)
                if end < 0:
                    s.truncated = True
                    break
                pos = end + 1
                reply = queue.popleft() if queue else None
            if reply is None:
                s.truncated = True
                break
        elif verb == "STARTTLS" and reply.code == 220:
            s.opaque = True
            break
        elif verb == "DATA" and reply.code == 354:
            stop = up.find(b"\r\n.\r\n", pos - 2)
            if stop < pos - 2:
                s.truncated = True
                break
            s.messages.append(_unstuff(up[pos:max(stop, pos)]))
            pos = stop + 5
            final = queue.popleft() if queue else None
            if final is None:
                s.truncated = True
                break
            if 200 <= final.code < 300:
                s.accepted_messages += 1

    if not greeted:
        stage = REJECTED_BEFORE_HELO
    elif s.accepted_recipients == 0:
        stage = CLOSED_BEFORE_RCPT
    elif s.accepted_messages == 0:
        stage = REJECTED_AFTER_DATA
    else:
        stage = DELIVERED
    cause = NO_CAUSE if stage == DELIVERED else classify_failure(s.replies, rules)
    s.outcome = DeliveryOutcome(stage, cause)
    return s
