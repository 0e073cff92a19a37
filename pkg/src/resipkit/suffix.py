"""Public-suffix lookups backed by a bundled snapshot plus an optional override file."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path

import publicsuffixlist
from publicsuffixlist import PublicSuffixList

_PRIVATE_MARKER = "// ===BEGIN PRIVATE DOMAINS==="


def _snapshot_lines() -> list[str]:
    dat = Path(publicsuffixlist.__file__).with_name("public_suffix_list.dat")
    text = dat.read_text(encoding="utf-8")
    # Apex domains follow ICANN rules only; private registrations (e.g. hosting
    # platforms) are not treated as suffixes.
    return text.split(_PRIVATE_MARKER, 1)[0].splitlines()


def _bundled_override() -> list[str]:
    return resources.files("resipkit").joinpath("data/psl_override.dat").read_text(encoding="utf-8").splitlines()


class SuffixList:
    def __init__(self, override: str | Path | None = None):
        lines = _snapshot_lines() + _bundled_override()
        if override is not None:
            lines += Path(override).read_text(encoding="utf-8").splitlines()
        self._psl = PublicSuffixList(source=lines, accept_unknown=True)

    def public_suffix(self, fqdn: str) -> str | None:
        return self._psl.publicsuffix(fqdn.lower().rstrip("."))

    def apex(self, fqdn: str) -> str | None:
        """Registrable domain (public suffix plus one label), or None."""
        return self._psl.privatesuffix(fqdn.lower().rstrip("."))


@lru_cache(maxsize=None)
def default_suffix_list() -> SuffixList:
    return SuffixList()


def apex_domain(fqdn: str) -> str | None:
    return default_suffix_list().apex(fqdn)


def public_suffix(fqdn: str) -> str | None:
    return default_suffix_list().public_suffix(fqdn)
