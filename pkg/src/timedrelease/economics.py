"""Remuneration pricing, deposits and awards.

The value multiplier ``ceil(v / delta_v) ** beta`` is evaluated as an exact
integer power when ``beta`` is integral and otherwise as ``exp(beta * ln n)``
in 30-significant-digit decimal arithmetic. Multiplying it into money is done
at 80 digits and rounded once, half-to-even, to base units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from typing import Mapping, NamedTuple, Sequence

from .core import Money, eth, fmt_eth

MULTIPLIER_DIGITS = 30
PER_PEER_FORMULAS = ("hour_sum", "shifted_closed_form")


class ParamViolation(ValueError):
    pass


@dataclass(frozen=True)
class PricingParams:
    alpha: Money            # per-hour increment of the hourly charge
    beta: Decimal           # value exponent, > 1
    delta_r1: Money         # charge for the first storage hour
    delta_v: Money          # value quantum
    r_c: Money              # per-peer function-call compensation
    deposit_factor: Decimal = Decimal("1.2")
    award_factor: Decimal = Decimal("0.1")
    per_peer_formula: str = "hour_sum"

    def __post_init__(self):
        object.__setattr__(self, "beta", Decimal(self.beta))
        object.__setattr__(self, "deposit_factor", Decimal(self.deposit_factor))
        object.__setattr__(self, "award_factor", Decimal(self.award_factor))
        for name in ("alpha", "delta_r1", "delta_v", "r_c"):
            if getattr(self, name) <= 0:
                raise ParamViolation(f"{name} must be positive")
        if self.beta <= 1:
            raise ParamViolation("beta must exceed 1")
        if self.award_factor <= 0:
            raise ParamViolation("award_factor must be positive")
        if self.deposit_factor <= 1:
            raise ParamViolation("deposit_factor must exceed 1 (d^s > v)")
        if self.deposit_factor <= 1 + self.award_factor:
            raise ParamViolation("deposit_factor must exceed 1 + award_factor (d^s > v + a)")
        if self.per_peer_formula not in PER_PEER_FORMULAS:
            raise ParamViolation(f"per_peer_formula must be one of {PER_PEER_FORMULAS}")

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "PricingParams":
        known = {"alpha", "beta", "delta_r1", "delta_v", "r_c",
                 "deposit_factor", "award_factor", "per_peer_formula"}
        unknown = set(cfg) - known
        if unknown:
            raise ParamViolation(f"unknown pricing keys: {sorted(unknown)}")
        base = asdict(default_params())
        for key in ("alpha", "delta_r1", "delta_v", "r_c"):
            if key in cfg:
                base[key] = eth(cfg[key])
        for key in ("beta", "deposit_factor", "award_factor"):
            if key in cfg:
                base[key] = Decimal(str(cfg[key]))
        if "per_peer_formula" in cfg:
            base["per_peer_formula"] = cfg["per_peer_formula"]
        return cls(**base)

    def to_config(self) -> dict[str, str]:
        return {
            "alpha": fmt_eth(self.alpha),
            "beta": str(self.beta),
            "delta_r1": fmt_eth(self.delta_r1),
            "delta_v": fmt_eth(self.delta_v),
            "r_c": fmt_eth(self.r_c),
            "deposit_factor": str(self.deposit_factor),
            "award_factor": str(self.award_factor),
            "per_peer_formula": self.per_peer_formula,
        }


def default_params() -> PricingParams:
    """The evaluation setting: alpha 0.000012, beta 1.1, first hour 0.000001,
    value quantum 1 ETH, call compensation 0.002, d^s = 1.2v, a = 0.1v."""
    return PricingParams(alpha=eth("0.000012"), beta=Decimal("1.1"), delta_r1=eth("0.000001"),
                         delta_v=eth("1"), r_c=eth("0.002"))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def value_multiplier(v: Money, params: PricingParams) -> Decimal:
    if v <= 0:
        raise ValueError("v must be positive")
    n = _ceil_div(v, params.delta_v)
    beta = params.beta
    if beta == beta.to_integral_value():
        return Decimal(n ** int(beta))
    with localcontext() as ctx:
        ctx.prec = MULTIPLIER_DIGITS
        ctx.rounding = ROUND_HALF_EVEN
        return (beta * Decimal(n).ln()).exp()


def _scale(multiplier: Decimal, amount) -> Money:
    with localcontext() as ctx:
        ctx.prec = 80
        return int((multiplier * Decimal(amount)).quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def hour_charge(i: int, params: PricingParams) -> Money:
    if i < 1:
        raise ValueError("hour index starts at 1")
    return params.delta_r1 + (i - 1) * params.alpha


def hour_sum(i: int, j: int, params: PricingParams) -> Money:
    """Sum of hour_charge(h) for h in [i, j], in closed form."""
    if not 1 <= i <= j:
        raise ValueError(f"bad hour range [{i}, {j}]")
    n = j - i + 1
    return n * params.delta_r1 + params.alpha * ((i + j - 2) * n // 2)


def total_remuneration(v: Money, storage_hours: int, k: int, params: PricingParams) -> Money:
    if k < 1 or storage_hours < 1:
        raise ValueError("need at least one peer and one storage hour")
    n = storage_hours
    base = k * params.r_c + n * params.delta_r1 + n * (n - 1) // 2 * params.alpha
    return _scale(value_multiplier(v, params), base)


def per_peer_payment(v: Money, i: int, j: int, params: PricingParams) -> Money:
    """Payment for a peer serving storage hours i..j (1-based, inclusive)."""
    if not 1 <= i <= j:
        raise ValueError(f"bad hour range [{i}, {j}]")
    m = value_multiplier(v, params)
    if params.per_peer_formula == "hour_sum":
        return _scale(m, params.r_c + hour_sum(i, j, params))
    # alternative closed form, kept selectable; does not partition the total
    base = (Decimal(params.r_c) + (j - i) * params.delta_r1
            + Decimal(i + j - 2) / 2 * params.alpha)
    return _scale(m, base)


def required_deposit(v: Money, params: PricingParams) -> Money:
    d = _scale(params.deposit_factor, v)
    a = _scale(params.award_factor, v)
    if not (d > v and d > v + a):
        raise ParamViolation(f"deposit {fmt_eth(d)} must exceed v + a = {fmt_eth(v + a)}")
    return d


def report_award(v: Money, params: PricingParams) -> Money:
    required_deposit(v, params)
    return _scale(params.award_factor, v)


class RemunerationPlan(NamedTuple):
    charged: Money            # what the sender pays into escrow
    payments: tuple[Money, ...]
    residue: Money            # returned to the sender at settlement


def plan_remuneration(v: Money, hour_ranges: Sequence[tuple[int, int]],
                      params: PricingParams) -> RemunerationPlan:
    """Per-peer payments for consecutive storage-hour ranges plus the total.

    The sender is charged ``max(total, sum(payments))`` so independent
    rounding of the payments can never underfund the escrow.
    """
    if not hour_ranges:
        return RemunerationPlan(0, (), 0)
    payments = tuple(per_peer_payment(v, i, j, params) for i, j in hour_ranges)
    hours = hour_ranges[-1][1] - hour_ranges[0][0] + 1
    total = total_remuneration(v, hours, len(hour_ranges), params)
    charged = max(total, sum(payments))
    return RemunerationPlan(charged, payments, charged - sum(payments))
