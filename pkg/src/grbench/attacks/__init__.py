"""Black-box evasion attacks run against a surrogate model."""

from __future__ import annotations

from ..errors import ValidationError
from .base import (
    AttackContext,
    AttackResult,
    check_budget,
    load_attack,
    perturbed_graph,
    save_attack,
)
from .injection import INJECTION_ATTACKS, inject_fgsm, inject_pgd, inject_rnd, inject_speit, inject_tdgia
from .modification import MODIFICATION_ATTACKS, modify_fga, modify_heuristic, modify_pgd

ATTACKS = {"injection": INJECTION_ATTACKS, "modification": MODIFICATION_ATTACKS}


def run_attack(method: str, ctx: AttackContext, **params) -> AttackResult:
    """Dispatch ``method`` within the scenario of ``ctx.budget``."""
    table = ATTACKS[ctx.budget.scenario]
    key = method.lower()
    if key not in table:
        raise ValidationError(
            f"unknown {ctx.budget.scenario} attack {method!r}; choose from {sorted(table)}"
        )
    return table[key](ctx, **params)


__all__ = [
    "ATTACKS", "AttackContext", "AttackResult", "check_budget", "inject_fgsm", "inject_pgd",
    "inject_rnd", "inject_speit", "inject_tdgia", "load_attack", "modify_fga", "modify_heuristic",
    "modify_pgd", "perturbed_graph", "run_attack", "save_attack",
]
