"""Output formatters: human (rich), JSON, TSV/plain, markdown.

Command results are dicts of scalar fields plus an optional ``rows`` list of
dicts rendered as a table.
"""

from __future__ import annotations

import json
import math
from typing import Any

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .utils import to_jsonable


def _text(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    if isinstance(value, (dict, list)):
        return json.dumps(to_jsonable(value))
    return str(value)


def _split(data: dict) -> tuple[dict, list[dict]]:
    rows = data.get("rows") or []
    fields = {k: v for k, v in data.items() if k != "rows"}
    return fields, rows


# ---- JSON ----

def output_json(data: Any, verbose: bool = False) -> None:
    """Raw JSON to stdout."""
    print(json.dumps(to_jsonable(data), indent=2, sort_keys=True))


# ---- Plain/TSV ----

def output_plain(data: Any, verbose: bool = False) -> None:
    """TSV output for piping."""
    if not isinstance(data, dict):
        print(data)
        return
    fields, rows = _split(data)
    if rows:
        keys = list(rows[0].keys())
        print("\t".join(keys))
        for row in rows:
            print("\t".join(_text(row.get(k, "")) for k in keys))
        if not verbose:
            return
    for k, v in fields.items():
        print(f"{k}\t{_text(v)}")


# ---- Markdown ----

def output_markdown(data: Any, title: str = "", verbose: bool = False) -> None:
    if not isinstance(data, dict):
        print(str(data))
        return
    fields, rows = _split(data)
    if title:
        print(f"## {title}\n")
    for k, v in fields.items():
        print(f"- **{k}**: {_text(v)}")
    if rows:
        keys = list(rows[0].keys())
        print()
        print("| " + " | ".join(keys) + " |")
        print("|" + "---|" * len(keys))
        for row in rows:
            print("| " + " | ".join(_text(row.get(k, "")) for k in keys) + " |")


# ---- Rich (human-readable) ----

_console = Console(stderr=True)
_stdout = Console()

ROW_LIMIT = 40


def output_human(data: Any, title: str = "", verbose: bool = False) -> None:
    """Pretty-print with rich."""
    if not isinstance(data, dict):
        _stdout.print(data)
        return
    fields, rows = _split(data)
    lines = [f"[bold]{k}[/bold]: {_text(v)}" for k, v in fields.items()]
    _stdout.print(Panel("\n".join(lines), title=title or "metamesh", border_style="blue", expand=False))
    if rows:
        table = Table(show_header=True, header_style="bold")
        keys = list(rows[0].keys())
        for k in keys:
            table.add_column(k)
        shown = rows if verbose else rows[:ROW_LIMIT]
        for row in shown:
            table.add_row(*(_text(row.get(k, "")) for k in keys))
        _stdout.print(table)
        if len(shown) < len(rows):
            _console.print(f"[dim]{len(rows) - len(shown)} more rows; use -v to show all[/dim]")


# ---- Router ----

def format_output(data: Any, mode: str = "human", title: str = "", verbose: bool = False) -> None:
    """Route to the appropriate formatter."""
    if mode == "json":
        output_json(data, verbose)
    elif mode == "plain":
        output_plain(data, verbose)
    elif mode == "markdown":
        output_markdown(data, title, verbose)
    else:
        output_human(data, title, verbose)
