"""Render sample CSVs into the two figure styles used by the flow toolkit:

* density2d: one hexbin panel per input CSV of 2-D samples, side by side
  (ground truth vs reconstruction layouts);
* posterior-hist: a 2 x C histogram grid, one column per condition CSV,
  top row first coordinate, bottom row second coordinate.

Reads only the documented CSV contract (header row x0,x1,...); has no
dependency on the flow package itself.
"""

import argparse
import os
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("density2d", "posterior-hist")


class RenderError(Exception):
    pass


@dataclass
class PlotJob:
    kind: str
    inputs: list
    out: str
    labels: list = field(default_factory=list)
    bins: int = 80
    dpi: int = 120

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RenderError(f"unknown plot kind {self.kind!r}")
        if not self.inputs:
            raise RenderError("at least one input CSV is required")


def read_samples_csv(path):
    """Float rows from a headered CSV; malformed input raises RenderError."""
    if not os.path.exists(path):
        raise RenderError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise RenderError(f"{path}: need a header row and at least one sample")
    header = lines[0].split(",")
    try:
        float(header[0])
        raise RenderError(f"{path}: missing header row")
    except ValueError:
        pass
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise RenderError(f"{path}: ragged row {ln!r}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise RenderError(f"{path}: non-numeric value ({exc})") from exc
    return header, np.asarray(rows)


def _render_density2d(job):
    panels = []
    for path in job.inputs:
        _, rows = read_samples_csv(path)
        if rows.shape[1] != 2:
            raise RenderError(f"{path}: density2d needs exactly 2 columns, "
                              f"got {rows.shape[1]}")
        panels.append(rows)
    fig, axes = plt.subplots(1, len(panels),
                             figsize=(3.2 * len(panels), 3.2),
                             squeeze=False)
    for ax, rows, path in zip(axes[0], panels, job.inputs):
        ax.hexbin(rows[:, 0], rows[:, 1], gridsize=job.bins, cmap="viridis",
                  mincnt=1)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    for ax, label in zip(axes[0], job.labels):
        ax.set_title(label, fontsize=10)
    fig.tight_layout()
    return fig


def _render_posterior_hist(job):
    columns = []
    for path in job.inputs:
        _, rows = read_samples_csv(path)
        if rows.shape[1] < 2:
            raise RenderError(f"{path}: posterior-hist needs >= 2 coordinate "
                              f"columns, got {rows.shape[1]}")
        columns.append(rows)
    n_cond = len(columns)
    fig, axes = plt.subplots(2, n_cond, figsize=(2.2 * n_cond, 4.2),
                             squeeze=False)
    labels = job.labels or [os.path.basename(p) for p in job.inputs]
    for j, rows in enumerate(columns):
        for coord in (0, 1):
            ax = axes[coord][j]
            ax.hist(rows[:, coord], bins=job.bins, density=True,
                    color="tab:blue")
            ax.set_yticks([])
        axes[0][j].set_title(labels[j] if j < len(labels) else "", fontsize=10)
    axes[0][0].set_ylabel("first coordinate")
    axes[1][0].set_ylabel("second coordinate")
    fig.tight_layout()
    return fig


def render(job):
    """Write the figure for a job; deterministic given the inputs."""
    if job.kind == "density2d":
        fig = _render_density2d(job)
    else:
        fig = _render_posterior_hist(job)
    fig.savefig(job.out, dpi=job.dpi, metadata={"Software": None})
    plt.close(fig)
    return job.out


def run(argv):
    parser = argparse.ArgumentParser(
        prog="proxflow-render",
        description="render flow-toolkit sample CSVs to PNG figures")
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        help="input CSV (repeat for multiple panels)")
    parser.add_argument("--label", dest="labels", action="append", default=[],
                        help="panel label (repeat, aligned with --in)")
    parser.add_argument("--bins", type=int, default=80)
    parser.add_argument("--out", required=True, help="output PNG path")
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1
    try:
        job = PlotJob(kind=args.kind, inputs=args.inputs, out=args.out,
                      labels=args.labels, bins=args.bins)
        render(job)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
