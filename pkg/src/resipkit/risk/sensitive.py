"""Government / military / education destinations by domain suffix."""

from __future__ import annotations

from dataclasses import dataclass

from ..suffix import SuffixList, default_suffix_list

GOVERNMENT = "government"
MILITARY = "military"
EDUCATION = "education"
NONE = "none"

_LABELS = {"gov": GOVERNMENT, "mil": MILITARY, "edu": EDUCATION}


@dataclass(frozen=True)
class SensitiveClass:
    fqdn: str
    kind: str

    @property
    def sensitive(self) -> bool:
        return self.kind != NONE


def classify_sensitive(fqdn: str, suffixes: SuffixList | None = None) -> SensitiveClass:
    """Scan the public-suffix labels (right to left) for gov/mil/edu.

    Some registries (``gov.hu``) keep their sector labels out of the suffix
    list, so for a bare two-letter country suffix the label just left of it is
    checked too. Labels further left (``gov.example.com``) do not count.
    """
    name = fqdn.lower().rstrip(".")
    suffixes = suffixes or default_suffix_list()
    suffix = suffixes.public_suffix(name) or name.rsplit(".", 1)[-1]
    labels = suffix.split(".")
    if len(labels) == 1 and len(suffix) == 2:
        host_labels = name.split(".")
        if len(host_labels) >= 2:
            labels = host_labels[-2:]
    for label in reversed(labels):
        if label in _LABELS:
            return SensitiveClass(name, _LABELS[label])
    return SensitiveClass(name, NONE)
