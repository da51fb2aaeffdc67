"""Figure rendering for the tally and the simulation suite.

matplotlib is imported inside the functions so the servers, client, and
anonymizer never pay for (or depend on) it at import time.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:  # pragma: no cover
    from .model import BallotSpec
    from .tally import TallyResult


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_tally_figure(result: "TallyResult", spec: "BallotSpec", path: Path | str) -> Path:
    """One bar chart per question, counted votes only."""
    plt = _pyplot()
    questions = spec.questions
    fig, axes = plt.subplots(1, len(questions), figsize=(4.5 * len(questions), 3.6), squeeze=False)
    for ax, question in zip(axes[0], questions):
        values = result.counts.get(question.question_id, [0] * len(question.choices))
        ax.bar(range(len(question.choices)), values, color="#4878a8")
        ax.set_xticks(range(len(question.choices)))
        ax.set_xticklabels(question.choices, rotation=20, ha="right", fontsize=8)
        ax.set_title(f"{question.question_id}: {question.prompt}", fontsize=9)
        ax.set_ylabel("votes")
        for x, v in enumerate(values):
            ax.text(x, v, str(v), ha="center", va="bottom", fontsize=8)
    fig.suptitle(
        f"ballot {result.ballot_id} — {result.total_votes} counted, {result.excluded} excluded",
        fontsize=10,
    )
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_suite_figure(reports: list[dict[str, Any]], path: Path | str) -> Path:
    """Expected-versus-observed grid for every simulated scenario."""
    plt = _pyplot()
    names = [r["scenario"] for r in reports]
    fig, ax = plt.subplots(figsize=(8.5, 0.42 * max(len(names), 4) + 1.6))
    for row, report in enumerate(reports):
        match = report["observed"] == report["expected"]
        color = "#3a8f4e" if match else "#b03a3a"
        ax.barh(row, 1.0, color=color, height=0.72)
        label = f"{report['observed']}" + ("" if match else f" (expected {report['expected']})")
        ax.text(0.02, row, label, va="center", fontsize=8, color="white")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xticks([])
    ax.invert_yaxis()
    ax.set_title("scenario outcomes", fontsize=10)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
