"""Federated learning orchestration: a leader with five session states,
stateless client agents, pluggable selection and aggregation strategies,
and a fault lab for failure experiments."""

from .config import SchemaError, SessionConfig, parse_session_config
from .session import SessionManager, SessionResult
from .state import SessionStates, checkpoint, restore
from .weights import ModelWeights, deserialize_weights, serialize_weights

__version__ = "0.1.0"

__all__ = [
    "SchemaError", "SessionConfig", "parse_session_config", "SessionManager", "SessionResult",
    "SessionStates", "checkpoint", "restore", "ModelWeights", "deserialize_weights", "serialize_weights",
]
