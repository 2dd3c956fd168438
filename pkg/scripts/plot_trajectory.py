"""Plot trajectory CSVs written by ``main.py run``.

Usage: python scripts/plot_trajectory.py output/trajectory_voi-rollout_seed7.csv [more.csv ...] [--out fig.png]
"""
import argparse
import csv
import logging
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)


def read_trajectory(path: Path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    columns: Dict[str, List[float]] = {name: [] for name in rows[0]}
    for row in rows:
        for name, value in row.items():
            columns[name].append(float(value) if value != "" else np.nan)
    return {name: np.array(values) for name, values in columns.items()}


def plot_trajectories(paths: List[Path], out: Path) -> None:
    fig, (ax_err, ax_send) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    for i, path in enumerate(paths):
        data = read_trajectory(path)
        k = data["k"]
        label = path.stem.replace("trajectory_", "")
        ax_err.plot(k, np.cumsum(data["mse"]), label=label)
        sent = k[data["sigma"] == 1]
        lost = k[data["gamma"] == 0]
        ax_send.scatter(sent, np.full(len(sent), i), marker="|", s=80)
        ax_send.scatter(lost, np.full(len(lost), i), marker="x", s=30, color="red")
        logger.info(f"{label}: {len(sent)} sends, {len(lost)} lost, total MSE {np.sum(data['mse']):.6g}")
    ax_err.set_ylabel("cumulative squared error")
    ax_err.legend()
    ax_send.set_yticks(range(len(paths)))
    ax_send.set_yticklabels([p.stem.replace("trajectory_", "") for p in paths])
    ax_send.set_xlabel("slot k")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    logger.info(f"Wrote {out}")


def main() -> None:
    parser = argparse.ArgumentParser(description="Plot cumulative error and send/loss events")
    parser.add_argument("trajectories", nargs="+", type=Path)
    parser.add_argument("--out", type=Path, default=Path("trajectory.png"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    plot_trajectories(args.trajectories, args.out)


if __name__ == "__main__":
    main()
