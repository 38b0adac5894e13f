"""Value types and the conserving ledger.

Money is an ``int`` count of micro-ETH (1 ETH = 10**6 units). Every ledger
operation returns a new :class:`Ledger`; snapshots are never mutated, so they
can be shared freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple

Money = int
TimePoint = int

UNITS_PER_ETH = 10**6
_ETH_DECIMALS = 6


class LedgerError(Exception):
    pass


class InsufficientFunds(LedgerError):
    pass


class InsufficientFrozen(LedgerError):
    pass


class UnknownAccount(LedgerError):
    pass


def eth(value: str | int | Decimal) -> Money:
    """Parse an ETH amount ("3.6", "3.6 ETH", Decimal) into base units.

    More than six decimals is an error rather than a silent truncation.
    """
    if isinstance(value, int):
        return value * UNITS_PER_ETH
    text = str(value).strip()
    if text.upper().endswith("ETH"):
        text = text[:-3].strip()
    try:
        amount = Decimal(text)
    except InvalidOperation as exc:
        raise ValueError(f"not an ETH amount: {value!r}") from exc
    if not amount.is_finite():
        raise ValueError(f"not an ETH amount: {value!r}")
    scaled = amount.scaleb(_ETH_DECIMALS)
    if scaled != scaled.to_integral_value():
        raise ValueError(f"{value!r} has more than {_ETH_DECIMALS} decimals")
    return int(scaled)


def fmt_eth(units: Money) -> str:
    sign = "-" if units < 0 else ""
    whole, frac = divmod(abs(units), UNITS_PER_ETH)
    return f"{sign}{whole}.{frac:06d}"


@dataclass(frozen=True, order=True)
class TimeWindow:
    """Half-open hour interval ``[begin, end)``."""

    begin: TimePoint
    end: TimePoint

    def __post_init__(self):
        if not (isinstance(self.begin, int) and isinstance(self.end, int)):
            raise TypeError("window bounds are integer hours")
        if self.begin >= self.end:
            raise ValueError(f"empty window [{self.begin}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.begin

    def __contains__(self, t: TimePoint) -> bool:
        return self.begin <= t < self.end


class Role(str, enum.Enum):
    SENDER = "sender"
    RECIPIENT = "recipient"
    PEER = "peer"
    EXTERNAL = "external"


_SUB_SEP = "#"


@dataclass(frozen=True, order=True)
class AccountId:
    name: str
    role: Role = Role.EXTERNAL

    def __post_init__(self):
        if not self.name:
            raise ValueError("account name must be non-empty")

    @property
    def owner(self) -> str:
        """Name of the participant controlling this account."""
        return self.name.split(_SUB_SEP, 1)[0]

    def __hash__(self) -> int:
        return hash(self.name)

    def deposit_account(self) -> "AccountId":
        return AccountId(f"{self.owner}{_SUB_SEP}deposit", self.role)

    def __str__(self) -> str:
        return self.name


class Balance(NamedTuple):
    spendable: Money = 0
    frozen: Money = 0

    @property
    def total(self) -> Money:
        return self.spendable + self.frozen


class Inflow(NamedTuple):
    who: AccountId
    amount: Money
    reason: str


def _check_amount(amount: Money) -> None:
    if not isinstance(amount, int) or isinstance(amount, bool):
        raise TypeError(f"money must be an int of base units, got {amount!r}")
    if amount < 0:
        raise ValueError(f"negative amount {amount}")


@dataclass(frozen=True)
class Ledger:
    balances: Mapping[AccountId, Balance] = field(default_factory=dict)
    escrow: Money = 0
    locked_pool: Money = 0
    inflows: tuple[Inflow, ...] = ()
    genesis_total: Money = 0

    def __post_init__(self):
        if not isinstance(self.balances, MappingProxyType):
            object.__setattr__(self, "balances", MappingProxyType(dict(self.balances)))

    @classmethod
    def genesis(cls, funds: Mapping[AccountId, Money] | Iterable[tuple[AccountId, Money]]) -> "Ledger":
        items = dict(funds.items() if isinstance(funds, Mapping) else funds)
        for amount in items.values():
            _check_amount(amount)
        return cls(
            balances={who: Balance(amount, 0) for who, amount in items.items()},
            genesis_total=sum(items.values()),
        )

    # -- queries ---------------------------------------------------------

    def __contains__(self, who: AccountId) -> bool:
        return who in self.balances

    def balance(self, who: AccountId) -> Balance:
        try:
            return self.balances[who]
        except KeyError:
            raise UnknownAccount(str(who)) from None

    def spendable(self, who: AccountId) -> Money:
        return self.balance(who).spendable

    def frozen(self, who: AccountId) -> Money:
        return self.balance(who).frozen

    def holdings(self, owner: str) -> Money:
        """Spendable plus frozen across every account ``owner`` controls."""
        return sum(b.total for a, b in self.balances.items() if a.owner == owner)

    def spendable_of(self, owner: str) -> Money:
        return sum(b.spendable for a, b in self.balances.items() if a.owner == owner)

    def total(self) -> Money:
        return sum(b.total for b in self.balances.values()) + self.escrow + self.locked_pool

    def expected_total(self) -> Money:
        return self.genesis_total + sum(i.amount for i in self.inflows)

    def is_conserved(self) -> bool:
        return self.total() == self.expected_total()

    # -- operations ------------------------------------------------------

    def _with(self, changes: Mapping[AccountId, Balance], escrow: Money | None = None,
              inflows: tuple[Inflow, ...] | None = None) -> "Ledger":
        merged = self.balances.copy()
        merged.update(changes)
        return self._make(merged, self.escrow if escrow is None else escrow, self.locked_pool,
                          self.inflows if inflows is None else inflows)

    def _make(self, balances: dict, escrow: Money, locked_pool: Money,
              inflows: tuple[Inflow, ...]) -> "Ledger":
        # skips __init__: balances is already a private dict copy
        new = object.__new__(Ledger)
        setattr_ = object.__setattr__
        setattr_(new, "balances", MappingProxyType(balances))
        setattr_(new, "escrow", escrow)
        setattr_(new, "locked_pool", locked_pool)
        setattr_(new, "inflows", inflows)
        setattr_(new, "genesis_total", self.genesis_total)
        return new

    def open(self, who: AccountId) -> "Ledger":
        """Add an empty account; a no-op if it already exists."""
        if who in self.balances:
            return self
        return self._with({who: Balance()})

    def transfer(self, src: AccountId, dst: AccountId, amount: Money) -> "Ledger":
        _check_amount(amount)
        a = self.balance(src)
        b = self.balance(dst)
        if a.spendable < amount:
            raise InsufficientFunds(f"{src} has {fmt_eth(a.spendable)}, needs {fmt_eth(amount)}")
        if amount == 0 or src == dst:
            return self
        return self._with({src: a._replace(spendable=a.spendable - amount),
                           dst: b._replace(spendable=b.spendable + amount)})

    def freeze(self, who: AccountId, amount: Money) -> "Ledger":
        _check_amount(amount)
        b = self.balance(who)
        if b.spendable < amount:
            raise InsufficientFunds(f"cannot freeze {fmt_eth(amount)} of {who}")
        return self._with({who: Balance(b.spendable - amount, b.frozen + amount)})

    def unfreeze(self, who: AccountId, amount: Money) -> "Ledger":
        _check_amount(amount)
        b = self.balance(who)
        if b.frozen < amount:
            raise InsufficientFrozen(f"{who} has {fmt_eth(b.frozen)} frozen")
        return self._with({who: Balance(b.spendable + amount, b.frozen - amount)})

    def record_inflow(self, who: AccountId, amount: Money, reason: str) -> "Ledger":
        _check_amount(amount)
        if amount == 0:
            raise ValueError("inflow must be positive")
        b = self.balance(who)
        return self._with({who: b._replace(spendable=b.spendable + amount)},
                          inflows=self.inflows + (Inflow(who, amount, reason),))

    def escrow_in(self, who: AccountId, amount: Money) -> "Ledger":
        _check_amount(amount)
        b = self.balance(who)
        if b.spendable < amount:
            raise InsufficientFunds(f"{who} cannot pay {fmt_eth(amount)} into escrow")
        return self._with({who: b._replace(spendable=b.spendable - amount)},
                          escrow=self.escrow + amount)

    def escrow_out(self, who: AccountId, amount: Money) -> "Ledger":
        _check_amount(amount)
        if self.escrow < amount:
            raise InsufficientFunds(f"escrow holds {fmt_eth(self.escrow)}")
        b = self.balance(who)
        return self._with({who: b._replace(spendable=b.spendable + amount)},
                          escrow=self.escrow - amount)

    def escrow_to_frozen(self, who: AccountId, amount: Money) -> "Ledger":
        """Hold part of the escrow as ``who``'s frozen deposit."""
        _check_amount(amount)
        if self.escrow < amount:
            raise InsufficientFunds(f"escrow holds {fmt_eth(self.escrow)}")
        b = self.balance(who)
        return self._with({who: b._replace(frozen=b.frozen + amount)},
                          escrow=self.escrow - amount)

    def confiscate(self, who: AccountId, amount: Money) -> "Ledger":
        """Move frozen funds of ``who`` into escrow."""
        _check_amount(amount)
        b = self.balance(who)
        if b.frozen < amount:
            raise InsufficientFrozen(f"{who} has {fmt_eth(b.frozen)} frozen")
        return self._with({who: b._replace(frozen=b.frozen - amount)},
                          escrow=self.escrow + amount)

    def lock(self, amount: Money) -> "Ledger":
        """Burn escrowed funds into the unwithdrawable pool."""
        _check_amount(amount)
        if self.escrow < amount:
            raise InsufficientFunds(f"escrow holds {fmt_eth(self.escrow)}")
        return self._make(self.balances.copy(), self.escrow - amount, self.locked_pool + amount, self.inflows)

    def delta(self, before: "Ledger") -> dict:
        """Per-account and pool changes relative to ``before``, for trace records."""
        out: dict = {}
        for who in sorted(set(self.balances) | set(before.balances)):
            a = before.balances.get(who, Balance())
            b = self.balances.get(who, Balance())
            ds, df = b.spendable - a.spendable, b.frozen - a.frozen
            if ds or df:
                out[who.name] = [ds, df]
        if self.escrow != before.escrow:
            out["@escrow"] = self.escrow - before.escrow
        if self.locked_pool != before.locked_pool:
            out["@locked"] = self.locked_pool - before.locked_pool
        if len(self.inflows) != len(before.inflows):
            out["@inflow"] = sum(i.amount for i in self.inflows[len(before.inflows):])
        return out
