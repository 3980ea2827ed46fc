"""Exact arithmetic helpers.

Durations, prices, and costs are carried as `fractions.Fraction` end to end
so simulated makespans and billing figures are exact; rounding happens only
when a report is rendered. JSON payloads encode rationals as strings
("7", "22/7", "0.125" on input) to survive round trips without float noise.
"""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

Rational = Fraction | int | float | str | Decimal


def to_frac(value: Rational) -> Fraction:
    """Coerce a number-ish value to an exact Fraction.

    Strings and Decimals convert exactly ("0.1" -> 1/10); floats convert to
    their exact binary value, which is fine for sampled quantities but should
    be avoided for prices (load those via Decimal).
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, Decimal):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(value)


def frac_str(value: Fraction) -> str:
    return str(Fraction(value))


def round_cents(amount: Fraction) -> Decimal:
    """Round an exact amount half-up to cents, for rendering only."""
    d = Decimal(amount.numerator) / Decimal(amount.denominator)
    return d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def format_money(amount: Fraction, currency: str = "$") -> str:
    return f"{currency}{round_cents(amount)}"


def format_percent(value: Fraction) -> str:
    """Render a percentage rounded half-up to the nearest integer."""
    d = Decimal(value.numerator) / Decimal(value.denominator)
    return f"{d.quantize(Decimal('1'), rounding=ROUND_HALF_UP)}%"
