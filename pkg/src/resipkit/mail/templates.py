"""Spam template DSL and matcher.

One template per line::

    <id> <category> <pattern>

``*`` in a pattern matches any run of text and ``{a|b|c}`` matches any one of
the listed alternatives. Everything else is literal; it is lowercased and its
whitespace collapsed so patterns line up with normalised message text. A
pattern may match anywhere in the text. ``#`` starts a comment line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

ADVERTISEMENT = "advertisement"
MALWARE = "malware-distribution"
CATEGORIES = (ADVERTISEMENT, MALWARE)

_TOKEN = re.compile(r"\{([^{}]*)\}|\*|[^{}*]+")


def _literal(text: str, loose_left: bool = True, loose_right: bool = True) -> str:
    """Regex for literal text; edge whitespace is optional only next to ``*``."""
    parts = text.lower().split()
    if not parts:
        return r"\s*" if loose_left or loose_right else r"\s+"
    body = r"\s+".join(re.escape(p) for p in parts)
    lead = (r"\s*" if loose_left else r"\s+") if text[:1].isspace() else ""
    trail = (r"\s*" if loose_right else r"\s+") if text[-1:].isspace() else ""
    return lead + body + trail


def compile_pattern(pattern: str) -> re.Pattern:
    tokens, pos = [], 0
    for m in _TOKEN.finditer(pattern):
        if m.start() != pos:
            break
        pos = m.end()
        tokens.append(m)
    if pos != len(pattern):
        raise ValueError(f"unbalanced braces in pattern {pattern!r}")
    out = []
    for k, m in enumerate(tokens):
        if m.group(1) is not None:
            alts = [_literal(a.strip()) for a in m.group(1).split("|")]
            out.append("(?:" + "|".join(alts) + ")")
        elif m.group(0) == "*":
            out.append(".*?")
        else:
            left = k == 0 or tokens[k - 1].group(0) == "*"
            right = k == len(tokens) - 1 or tokens[k + 1].group(0) == "*"
            out.append(_literal(m.group(0), left, right))
    return re.compile("".join(out), re.DOTALL)


@dataclass(frozen=True)
class SpamTemplate:
    id: str
    category: str
    pattern: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"template {self.id}: unknown category {self.category!r}")
        object.__setattr__(self, "_regex", compile_pattern(self.pattern))

    def matches(self, text: str) -> bool:
        return self._regex.search(text) is not None


def parse_templates(text: str) -> list[SpamTemplate]:
    out, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(None, 2)
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected '<id> <category> <pattern>'")
        tid, category, pattern = fields
        if tid in seen:
            raise ValueError(f"line {lineno}: duplicate template id {tid}")
        seen.add(tid)
        try:
            out.append(SpamTemplate(tid, category, pattern))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def load_templates(path: str | Path | None = None) -> list[SpamTemplate]:
    if path is None:
        return parse_templates(resources.files("resipkit").joinpath("data/templates.txt").read_text(encoding="utf-8"))
    return parse_templates(Path(path).read_text(encoding="utf-8"))


def match_templates(text: str, templates: list[SpamTemplate]) -> list[str]:
    """Ids of every template found in already-normalised ``text``."""
    return [t.id for t in templates if t.matches(text)]
