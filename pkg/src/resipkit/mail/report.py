"""Aggregate statistics over parsed SMTP sessions."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import IO

from .evasion import decode_evasions
from .smtp import CAUSES, DELIVERED, STAGES, SmtpSession
from .templates import CATEGORIES, SpamTemplate

CATEGORY_LABELS = {"advertisement": "Advertisement", "malware-distribution": "Malware Distribution"}


def _pct(part: int, whole: int) -> float:
    return 100.0 * part / whole if whole else 0.0


@dataclass
class SpamReport:
    sessions: int = 0
    opaque_sessions: int = 0
    clients: int = 0
    senders: int = 0
    recipients: int = 0
    servers: int = 0
    messages: int = 0
    delivered_messages: int = 0
    stage_counts: dict[str, int] = field(default_factory=lambda: {s: 0 for s in STAGES})
    cause_counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CAUSES})
    template_emails: dict[str, int] = field(default_factory=dict)
    template_recipients: dict[str, int] = field(default_factory=dict)
    template_category: dict[str, str] = field(default_factory=dict)

    @property
    def stage_pct(self) -> dict[str, float]:
        n = sum(self.stage_counts.values())
        return {s: _pct(c, n) for s, c in self.stage_counts.items()}

    @property
    def cause_pct(self) -> dict[str, float]:
        """Among failed (non-delivered) sessions."""
        n = sum(self.cause_counts.values())
        return {c: _pct(k, n) for c, k in self.cause_counts.items()}

    def category_rows(self) -> list[dict]:
        total_mail = sum(self.template_emails.values())
        total_rcpt = sum(self.template_recipients.values())
        rows = []
        for cat in CATEGORIES:
            ids = [t for t, c in self.template_category.items() if c == cat and self.template_emails.get(t)]
            mail = sum(self.template_emails[t] for t in ids)
            rcpt = sum(self.template_recipients[t] for t in ids)
            rows.append({
                "category": cat,
                "templates": len(ids),
                "emails": mail,
                "recipients": rcpt,
                "pct_emails": _pct(mail, total_mail),
                "pct_recipients": _pct(rcpt, total_rcpt),
            })
        return rows

    def as_dict(self) -> dict:
        return {
            "sessions": self.sessions,
            "opaque_sessions": self.opaque_sessions,
            "unique": {
                "clients": self.clients,
                "senders": self.senders,
                "recipients": self.recipients,
                "servers": self.servers,
                "messages": self.messages,
            },
            "delivered_messages": self.delivered_messages,
            "stage_counts": dict(self.stage_counts),
            "stage_pct": {k: round(v, 2) for k, v in self.stage_pct.items()},
            "cause_counts": dict(self.cause_counts),
            "cause_pct": {k: round(v, 2) for k, v in self.cause_pct.items()},
            "templates": {
                t: {"category": self.template_category[t], "emails": self.template_emails[t], "recipients": self.template_recipients[t]}
                for t in sorted(self.template_emails)
            },
            "categories": [
                {**r, "pct_emails": round(r["pct_emails"], 2), "pct_recipients": round(r["pct_recipients"], 2)}
                for r in self.category_rows()
            ],
        }


def spam_report(sessions: list[SmtpSession], templates: list[SpamTemplate] | None = None) -> SpamReport:
    """Counts and distributions over ``sessions``.

    Sessions that switched to TLS are counted in the unique tallies but left
    out of the stage and cause distributions, since their outcome is hidden.
    Each message is credited to the first template (in file order) it matches.
    """
    rep = SpamReport()
    clients, senders, rcpts, servers, digests = set(), set(), set(), set(), set()
    templates = templates or []
    for t in templates:
        rep.template_category[t.id] = t.category
    for s in sessions:
        rep.sessions += 1
        if s.client_fqdn:
            clients.add(s.client_fqdn)
        if s.sender:
            senders.add(s.sender)
        rcpts.update(s.recipients)
        servers.add(s.server)
        for body in s.messages:
            digests.add(hashlib.sha256(body).hexdigest())
        rep.delivered_messages += s.accepted_messages
        if s.opaque:
            rep.opaque_sessions += 1
            continue
        rep.stage_counts[s.outcome.stage] += 1
        if s.outcome.stage != DELIVERED:
            rep.cause_counts[s.outcome.failure_cause] += 1
        for body in s.messages:
            text = decode_evasions(body)
            hit = next((t for t in templates if t.matches(text)), None)
            if hit is not None:
                rep.template_emails[hit.id] = rep.template_emails.get(hit.id, 0) + 1
                rep.template_recipients[hit.id] = rep.template_recipients.get(hit.id, 0) + len(s.recipients)
    rep.clients, rep.senders, rep.recipients = len(clients), len(senders), len(rcpts)
    rep.servers, rep.messages = len(servers), len(digests)
    return rep


def write_spam_csv(rep: SpamReport, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["Spam Category", "Templates", "% Emails", "% Recipients"])
    for r in rep.category_rows():
        w.writerow([CATEGORY_LABELS[r["category"]], r["templates"], f"{r['pct_emails']:.2f}%", f"{r['pct_recipients']:.2f}%"])


def write_template_csv(rep: SpamReport, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["template", "category", "emails", "recipients"])
    for t in sorted(rep.template_emails):
        w.writerow([t, rep.template_category[t], rep.template_emails[t], rep.template_recipients[t]])
