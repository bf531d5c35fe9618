from typing import Optional, Union


def passfail(passed: bool) -> str:
    if passed:
        return "[green]pass[/green]"
    return "[red]FAIL[/red]"


def redgreen(value: Union[int, float]) -> str:
    if value >= 0:
        return "green"
    return "red"


def efmt(amount: Optional[float], precision: int = 6) -> str:
    if amount is None:
        return ""
    return f"{float(amount):.{precision}e}"


def ffmt(amount: Optional[float], precision: int = 6) -> str:
    if amount is not None:
        amount = float(amount)
        return f"{amount:.{precision}f}"
    return ""


def mfmt(margin: Optional[float], precision: int = 3) -> str:
    """Signed margin, green when nonnegative."""
    if margin is None:
        return ""
    margin = float(margin)
    rg = redgreen(margin)
    return f"[{rg}]{margin:+.{precision}e}[/{rg}]"


def ifmt(amount: Optional[int]) -> str:
    if amount is not None:
        return f"{int(amount):,d}"
    return ""
