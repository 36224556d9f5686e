"""Delimited output and figures for the command-line reports.

CSV files are written byte-stably: LF line endings, minimal RFC-4180
quoting, floats at six significant digits.  Figures are rendered headless
next to the tables they visualize.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def fmt_value(x) -> str:
    """Canonical cell text: %.6g floats, bare ints, lowercase booleans."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_value(v) for v in row])


def save_figure(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata={"Software": "spsim"})
    plt.close(fig)


_SEGMENTS = (
    ("compute_time", "compute", "#4878cf"),
    ("exposed_comm_time", "comm", "#ee854a"),
    ("recompute_time", "recompute", "#6acc65"),
    ("exposed_offload_time", "offload", "#d65f5f"),
    ("vae_time", "vae", "#956cb4"),
)


def plot_strategies(ranked, path, title) -> None:
    """Stacked horizontal bars of the fastest plans, split by time cause."""
    top = ranked[:10]
    fig, ax = plt.subplots(figsize=(9, 0.6 * max(len(top), 2) + 1.6))
    labels = [s.describe() for s, _ in top]
    y = range(len(top))
    left = [0.0] * len(top)
    for attr, label, color in _SEGMENTS:
        widths = [getattr(e, attr) for _, e in top]
        ax.barh(y, widths, left=left, label=label, color=color, height=0.6)
        left = [l + w for l, w in zip(left, widths)]
    ax.set_yticks(list(y))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("seconds per iteration")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    save_figure(fig, path)


def plot_sweep(series, path, title, xlabel) -> None:
    """One line per family; infeasible points are dropped from the curve."""
    fig, ax = plt.subplots(figsize=(8, 5))
    for family, points in series.items():
        xs = [p[0] for p in points if p[2]]
        ys = [p[1] for p in points if p[2]]
        if xs:
            ax.plot(xs, ys, marker="o", markersize=3, label=family)
        dead = [p[0] for p in points if not p[2]]
        if dead:
            ax.axvline(min(dead), linestyle=":", alpha=0.35,
                       color=ax.lines[-1].get_color() if xs else "grey")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("seconds per iteration")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    save_figure(fig, path)


def plot_calibration(rows, path, title) -> None:
    """Predicted vs measured seconds with the identity diagonal."""
    fig, ax = plt.subplots(figsize=(6, 6))
    xs = [r.target_s for r in rows]
    ys = [r.predicted_s for r in rows]
    lim = 1.1 * max(xs + ys)
    ax.plot([0, lim], [0, lim], color="grey", linewidth=1, linestyle="--")
    ax.scatter(xs, ys, s=28)
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("measured seconds")
    ax.set_ylabel("modeled seconds")
    ax.set_title(title)
    fig.tight_layout()
    save_figure(fig, path)


def plot_comm_bytes(per_plan, path, title) -> None:
    """Total bytes moved per device for each simulated plan."""
    fig, ax = plt.subplots(figsize=(9, 4.5))
    labels = list(per_plan)
    values = [per_plan[k] for k in labels]
    ax.bar(range(len(labels)), values, color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("bytes sent per iteration")
    ax.set_title(title)
    fig.tight_layout()
    save_figure(fig, path)
