"""
Markdown run report for experiments.
"""
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)


class RunLogger:
    """
    Collects sections, text, configuration and metric tables of a run and renders them as Markdown.
    """

    def __init__(self, run_name: Optional[str] = None):
        """
        Initialize the run logger.

        Args:
            run_name: Title of the report
        """
        self.run_name = run_name or "gt-conformal"
        self.log_entries: List[Dict[str, Any]] = []
        self.current_section = None

    def start_section(self, title: str) -> None:
        """
        Start a new section in the report.

        Args:
            title: Section title
        """
        self.current_section = title
        self.log_entries.append({
            "type": "section",
            "title": title,
            "timestamp": datetime.now()
        })

    def start_subsection(self, title: str) -> None:
        self.log_entries.append({
            "type": "subsection",
            "title": title,
            "timestamp": datetime.now()
        })

    def log_text(self, text: str) -> None:
        self.log_entries.append({
            "type": "text",
            "content": text,
            "timestamp": datetime.now()
        })

    def log_config(self, settings: Dict[str, Any]) -> None:
        """
        Log the effective configuration as a key/value table.

        Args:
            settings: Configuration values
        """
        self.log_entries.append({
            "type": "table",
            "header": ["setting", "value"],
            "rows": [[key, value] for key, value in settings.items()],
            "timestamp": datetime.now()
        })

    def log_metrics(self, title: str, rows: Sequence[Sequence[Any]]) -> None:
        """
        Log a metric table with (metric, value, se) rows; the 95% half-width is added.

        Args:
            title: Table caption, e.g. the method and grid value
            rows: Metric rows
        """
        self.log_entries.append({
            "type": "table",
            "title": title,
            "header": ["metric", "value", "se", "±1.96·se"],
            "rows": [[metric, _fmt(value), _fmt(se), _fmt(1.96 * se)] for metric, value, se in rows],
            "timestamp": datetime.now()
        })

    def log_allocations(self, title: str, allocations: Sequence[Any]) -> None:
        """Log one (alpha_class, alpha_unseen, alpha_seen) row per repetition."""
        rows = [[rep, _fmt(a.alpha_class), _fmt(a.alpha_unseen), _fmt(a.alpha_seen)]
                for rep, a in enumerate(allocations) if a is not None]
        if not rows:
            return
        self.log_entries.append({
            "type": "table",
            "title": title,
            "header": ["rep", "alpha_class", "alpha_unseen", "alpha_seen"],
            "rows": rows,
            "timestamp": datetime.now()
        })

    def get_markdown(self) -> str:
        """
        Get the report as a Markdown string.

        Returns:
            Markdown string
        """
        markdown = [f"# {self.run_name} Run Report\n",
                    f"Generated on {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n"]

        for entry in self.log_entries:
            entry_type = entry["type"]
            timestamp = entry["timestamp"].strftime("%H:%M:%S")

            if entry_type == "section":
                markdown.append(f"\n## {entry['title']}\n")
                markdown.append(f"*{timestamp}*\n")

            elif entry_type == "subsection":
                markdown.append(f"\n### {entry['title']}\n")

            elif entry_type == "text":
                markdown.append(f"{entry['content']}\n")

            elif entry_type == "table":
                if entry.get("title"):
                    markdown.append(f"**{entry['title']}**\n")
                lines = ["| " + " | ".join(entry["header"]) + " |",
                         "|" + "---|" * len(entry["header"])]
                lines += ["| " + " | ".join(str(cell) for cell in row) + " |" for row in entry["rows"]]
                markdown.append("\n".join(lines) + "\n")

        return "\n".join(markdown)

    def save(self, path: Union[str, Path]) -> Path:
        """
        Save the report to a Markdown file.

        Args:
            path: Output path

        Returns:
            Path to the report
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.get_markdown(), encoding="utf-8")
        logger.info(f"Saved run report to {path}")
        return path


def _fmt(value: float) -> str:
    return f"{value:.4f}"
