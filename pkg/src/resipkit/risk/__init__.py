from .anomaly import AnomalyConfig, AnomalyReport, LocationIndex, evaluate_anomaly_rules
from .sensitive import SensitiveClass, classify_sensitive
from .threatintel import (
    MockProvider,
    ThreatVerdict,
    VerdictCache,
    query_threat_providers,
    threat_table,
)

__all__ = [
    "AnomalyConfig",
    "AnomalyReport",
    "LocationIndex",
    "MockProvider",
    "SensitiveClass",
    "ThreatVerdict",
    "VerdictCache",
    "classify_sensitive",
    "evaluate_anomaly_rules",
    "query_threat_providers",
    "threat_table",
]
