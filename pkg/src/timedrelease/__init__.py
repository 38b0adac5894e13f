"""Off-chain model of a deposit-enforced timed-release service.

Modules: ``core`` (money, time, ledger), ``crypto`` (onion packages,
certificates, whisper channels), ``economics`` (pricing and deposits),
``selection`` (route choice over working windows), ``contract`` (the
enforcement state machine), ``harness`` (scenario runner), ``game``
(equilibrium analysis) and ``cli``.
"""

from .core import AccountId, Balance, Ledger, TimeWindow, eth, fmt_eth
from .economics import ParamViolation, PricingParams, default_params
from .selection import NoFeasibleRoute, RoutePlan, select_peers

__version__ = "0.1.0"

__all__ = ["AccountId", "Balance", "Ledger", "NoFeasibleRoute", "ParamViolation", "PricingParams",
           "RoutePlan", "TimeWindow", "eth", "fmt_eth", "default_params", "select_peers"]
