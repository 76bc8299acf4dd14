"""DET plots on log-log axes."""

import logging
from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "diffound-det"
import matplotlib.pyplot as plt  # noqa: E402

from diffound_mad.core.metrics import DetPoint  # noqa: E402
from diffound_mad.errors import ArtifactIOError  # noqa: E402

logger = logging.getLogger(__name__)

# zero rates cannot be drawn on a log axis
FLOOR = 0.01


def plot_det(
    path: Union[str, Path], curves: Mapping[str, Sequence[DetPoint]], title: str = "DET"
) -> Path:
    """One line per curve, MACER on x and BSCER on y, both in percent."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        for label, points in curves.items():
            xs = [max(p.macer, FLOOR) for p in points]
            ys = [max(p.bscer, FLOOR) for p in points]
            ax.step(xs, ys, where="post", label=label)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlim(FLOOR, 100)
        ax.set_ylim(FLOOR, 100)
        ax.set_xlabel("MACER (%)")
        ax.set_ylabel("BSCER (%)")
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        if len(curves) > 1:
            ax.legend(loc="upper right")
        # no date and a fixed hash salt: identical inputs give identical files
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise ArtifactIOError(f"cannot write plot ({exc.strerror})", path) from exc
    finally:
        plt.close(fig)
    logger.debug("wrote DET plot with %d curves to %s", len(curves), path)
    return path
