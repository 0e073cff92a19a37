from .evasion import DecodeStats, decode_evasions
from .report import SpamReport, spam_report
from .retrieval import MailRetrievalSession, parse_mail_retrieval, retrieval_report
from .smtp import DeliveryOutcome, SmtpSession, parse_smtp_session
from .templates import SpamTemplate, load_templates, match_templates

__all__ = [
    "DecodeStats",
    "DeliveryOutcome",
    "MailRetrievalSession",
    "SmtpSession",
    "SpamReport",
    "SpamTemplate",
    "decode_evasions",
    "load_templates",
    "match_templates",
    "parse_mail_retrieval",
    "parse_smtp_session",
    "retrieval_report",
    "spam_report",
]
