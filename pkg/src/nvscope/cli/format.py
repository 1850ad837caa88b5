"""Human-readable quantity formatting and ASCII tables.

The SI formatting here is a frozen contract shared with the operator
console: given the same float64 value, ``si_format`` in Python and its
TypeScript mirror must return byte-identical strings.  To make that
possible every step is defined in terms of operations both languages
perform identically:

* the value is scaled by one IEEE-754 double division ``value / factor``
  with the factor written as the same power-of-ten literal;
* the scaled value is rendered with a fixed number of fractional digits
  using the exact semantics of JavaScript ``Number.prototype.toFixed``:
  the sign is peeled off first and the decimal expansion of the binary
  double is rounded with ties upward, i.e. ties away from zero overall
  (``(0.125).toFixed(2) == "0.13"``, ``(-0.125).toFixed(2) == "-0.13"``),
  which Python reproduces below via exact ``Decimal`` arithmetic
  (``format(x, ".2f")`` would round ties to even instead);
* the digit budget is ``sig`` significant digits: the fractional digit
  count is ``sig`` minus the number of integer digits of the scaled
  value, clamped to [0, 12].

Dimensionless quantities (``unit == ""``) are never prefix-scaled — a
bare prefix would read as a unit ("150.0 m" for a contrast of 0.15) —
the digit rule is applied to the raw value instead.

The contract is defined for scaled magnitudes below 1e21, where
``toFixed`` still produces positional notation; instrument quantities
sit comfortably inside that range.

The micro prefix is U+00B5 (MICRO SIGN).
"""
from __future__ import annotations

import math
from decimal import ROUND_FLOOR, Decimal

__all__ = ["to_fixed", "si_format", "si_pair", "kv_table", "grid_table"]

_PREFIXES: tuple[tuple[float, str], ...] = (
    (1e12, "T"),
    (1e9, "G"),
    (1e6, "M"),
    (1e3, "k"),
    (1.0, ""),
    (1e-3, "m"),
    (1e-6, "µ"),
    (1e-9, "n"),
    (1e-12, "p"),
    (1e-15, "f"),
)


def to_fixed(value: float, digits: int) -> str:
    """Format with exactly `digits` fractional digits, JS-toFixed style.

    Matching ECMA-262 Number.prototype.toFixed: the sign is peeled off
    first, the exact decimal expansion of the (non-negative) binary
    double is rounded to `digits` places with ties upward — so ties
    round away from zero — and the sign is re-applied, which makes
    ``(-0.4).toFixed(0) == "-0"``.
    """
    if not 0 <= digits <= 100:
        raise ValueError("digits must be in [0, 100]")
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    sign = "-" if value < 0 else ""
    scaled = Decimal(-value if value < 0 else value).scaleb(digits)  # exact
    n = int((scaled + Decimal("0.5")).to_integral_value(rounding=ROUND_FLOOR))
    text = str(n)
    if digits == 0:
        return sign + text
    text = text.rjust(digits + 1, "0")
    return f"{sign}{text[:-digits]}.{text[-digits:]}"


def si_format(value, unit: str = "", sig: int = 4) -> str:
    """Scale into an SI prefix and print `sig` significant digits.

    None/NaN render as "nan", zero as "0"; otherwise the largest prefix
    factor <= |value| is chosen (clamped to the prefix table ends).
    """
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return f"nan {unit}".rstrip()
    value = float(value)
    if value == 0.0:
        return f"0 {unit}".rstrip()
    if math.isinf(value):
        word = "inf" if value > 0 else "-inf"
        return f"{word} {unit}".rstrip()
    magnitude = abs(value)
    factor, prefix = 1.0, ""
    if unit:
        factor, prefix = _PREFIXES[-1]
        for fac, pre in _PREFIXES:
            if magnitude >= fac:
                factor, prefix = fac, pre
                break
    scaled = value / factor
    int_digits = len(str(math.floor(abs(scaled))))
    decimals = max(0, min(12, sig - int_digits))
    return f"{to_fixed(scaled, decimals)} {prefix}{unit}".rstrip()


def si_pair(value, std, unit: str = "", sig: int = 4) -> str:
    """"value ± std" with both sides formatted independently."""
    if std is None:
        return si_format(value, unit, sig)
    return f"{si_format(value, unit, sig)} ± {si_format(std, unit, sig)}"


def kv_table(rows: list[tuple[str, str]], indent: str = "  ") -> str:
    """Aligned `label : value` lines."""
    if not rows:
        return ""
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{indent}{label.ljust(width)} : {value}"
                     for label, value in rows)


def grid_table(headers: list[str], rows: list[list[str]],
               indent: str = "  ") -> str:
    """Aligned columns with a dashed separator under the header."""
    table = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in table)
              for i in range(len(headers))]
    lines = [indent + "  ".join(c.ljust(w) for c, w in zip(row, widths))
             for row in table]
    lines.insert(1, indent + "  ".join("-" * w for w in widths))
    return "\n".join(line.rstrip() for line in lines)
