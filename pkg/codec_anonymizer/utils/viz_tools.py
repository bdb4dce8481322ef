import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from utils.log_utils import get_logger
from utils.records import load_jsonl

logger = get_logger(__name__)


def plot_loss_curve(loss_log_path, save_path, terms=("total", "rec", "spk", "lin", "emo")):
    """
    Plots training loss terms over steps from a JSON-lines loss log.

    Parameters
    ----------
    loss_log_path : str or Path
        The `loss_log.jsonl` written during training.
    save_path : str or Path
        PNG file to write.
    terms : sequence of str
        Record fields to draw, one line each.
    """
    records = load_jsonl(loss_log_path)
    if not records:
        logger.warning("⚠️ No loss records to plot.")
        return None

    steps = np.array([r["step"] for r in records])
    plt.figure(figsize=(8, 5))
    for term in terms:
        if term in records[0]:
            plt.plot(steps, [r[term] for r in records], label=term)

    plt.xlabel("Step")
    plt.ylabel("Loss")
    plt.yscale("symlog")
    plt.title("Training losses")
    plt.legend()
    plt.grid(True)
    plt.savefig(save_path, bbox_inches="tight")
    plt.close()
    logger.info(f"✅ Loss curve saved to: {save_path}")
    return save_path


def plot_score_distributions(scored, save_path, threshold=None, title="Verification scores"):
    """
    Target / non-target score histograms, with the EER threshold if given.

    Args:
        scored (list[tuple[float, bool]]): (cosine score, is_target) pairs
        save_path (str or Path): PNG file to write
        threshold (float, optional): vertical line at the EER operating point
    """
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    labels = np.array([t for _, t in scored], dtype=bool)
    if scores.size == 0:
        logger.warning("⚠️ No scores to plot.")
        return None

    bins = np.linspace(min(scores.min(), -1.0), max(scores.max(), 1.0), 41)
    plt.figure(figsize=(8, 5))
    plt.hist(scores[labels], bins=bins, alpha=0.6, color="green", label="target")
    plt.hist(scores[~labels], bins=bins, alpha=0.6, color="red", label="non-target")
    if threshold is not None and np.isfinite(threshold):
        plt.axvline(threshold, color="black", linestyle="--", label=f"EER threshold {threshold:.3f}")

    plt.xlabel("Cosine score")
    plt.ylabel("Trials")
    plt.title(title)
    plt.legend()
    plt.grid(True)
    plt.savefig(save_path, bbox_inches="tight")
    plt.close()
    logger.info(f"✅ Score plot saved to: {save_path}")
    return save_path
