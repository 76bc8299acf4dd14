"""Rich console output for the diffound CLI."""

import logging
from typing import Any, Dict, List, Mapping, Optional

from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table

console = Console()
err_console = Console(stderr=True)


class ConsoleFormatter:
    """Status lines, panels and tables shared by all commands."""

    @staticmethod
    def print_success(message: str):
        console.print(f"[green]✓[/green] {message}")

    @staticmethod
    def print_error(message: str):
        err_console.print(f"[red]✗[/red] {message}")

    @staticmethod
    def print_warning(message: str):
        console.print(f"[yellow]⚠[/yellow] {message}")

    @staticmethod
    def print_info(message: str):
        console.print(f"[blue]ℹ[/blue] {message}")

    @staticmethod
    def print_header(title: str, subtitle: Optional[str] = None):
        body = f"[bold cyan]{title}[/bold cyan]"
        if subtitle:
            body += f"\n[dim]{subtitle}[/dim]"
        console.print(Panel(body, border_style="cyan", padding=(0, 2)))

    @staticmethod
    def create_table(
        title: str = "",
        columns: Optional[List[str]] = None,
        show_header: bool = True,
        box_style=box.ROUNDED,
    ) -> Table:
        table = Table(
            title=title,
            show_header=show_header,
            box=box_style,
            header_style="bold cyan",
            title_style="bold magenta",
        )
        for col in columns or []:
            table.add_column(col, style="white")
        return table

    @staticmethod
    def print_key_value_pairs(data: Mapping[str, Any], title: Optional[str] = None):
        if title:
            console.print(f"[bold cyan]{title}[/bold cyan]")
        width = max((len(str(k)) for k in data), default=0)
        for key, value in data.items():
            if isinstance(value, float):
                value = f"{value:.4f}"
            console.print(f"[cyan]{str(key):<{width}}[/cyan]: [white]{value}[/white]")

    @staticmethod
    def create_progress() -> Progress:
        return Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TextColumn("{task.fields[status]}"),
            TimeElapsedColumn(),
            console=console,
        )


def success(message: str):
    ConsoleFormatter.print_success(message)


def error(message: str):
    ConsoleFormatter.print_error(message)


def warning(message: str):
    ConsoleFormatter.print_warning(message)


def info(message: str):
    ConsoleFormatter.print_info(message)


def header(title: str, subtitle: Optional[str] = None):
    ConsoleFormatter.print_header(title, subtitle)


def table(
    title: str = "",
    columns: Optional[List[str]] = None,
    show_header: bool = True,
    box_style=box.ROUNDED,
) -> Table:
    return ConsoleFormatter.create_table(title, columns, show_header, box_style)


def print_table(table: Table):
    console.print(table)


def key_value(data: Dict[str, Any], title: Optional[str] = None):
    ConsoleFormatter.print_key_value_pairs(data, title)


def progress() -> Progress:
    """Progress bar with a free-form ``status`` field (pass ``status=""`` on add_task)."""
    return ConsoleFormatter.create_progress()


def configure_logging(verbose: bool = False) -> None:
    """Route package logs through rich; DEBUG with ``verbose``, otherwise INFO."""
    pkg_logger = logging.getLogger("diffound_mad")
    for handler in list(pkg_logger.handlers):
        if isinstance(handler, RichHandler):
            pkg_logger.removeHandler(handler)
    handler = RichHandler(console=err_console, show_path=verbose, rich_tracebacks=verbose)
    handler.setFormatter(logging.Formatter("%(message)s"))
    pkg_logger.addHandler(handler)
    pkg_logger.setLevel(logging.DEBUG if verbose else logging.INFO)
