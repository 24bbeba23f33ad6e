"""Report figures rendered to files with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
# no timestamp or version chunk, so identical inputs give identical PNG bytes
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def event_study_figure(frame, path, reference=-1, title=None):
    """Point estimates with 95% intervals; the reference period drawn at zero."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        tau = frame["tau"].to_numpy(float)
        est = frame["estimate"].to_numpy(float)
        lo = frame["ci_low"].to_numpy(float)
        hi = frame["ci_high"].to_numpy(float)
        ax.axhline(0, color="0.6", lw=0.8)
        ax.axvline(-0.5, color="0.6", lw=0.8, ls="--")
        ax.errorbar(tau, est, yerr=[est - lo, hi - est], fmt="o", color="C0", capsize=3, lw=1)
        ax.plot([reference], [0], marker="o", mfc="white", color="C0")
        ax.set_xlabel("event time")
        ax.set_ylabel("coefficient")
        ax.set_xticks(sorted(set(tau.tolist()) | {reference}))
        if title:
            ax.set_title(title)
        return _save(fig, path)


def outcome_distribution_figure(real, synth, path, bins=30, title=None):
    """Overlaid outcome histograms for real and synthetic observations."""
    real = np.asarray(real, float)
    synth = np.asarray(synth, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        both = np.concatenate([real, synth]) if len(synth) else real
        edges = np.histogram_bin_edges(both, bins=bins)
        ax.hist(real, bins=edges, density=True, alpha=0.55, label="real", color="C0")
        if len(synth):
            ax.hist(synth, bins=edges, density=True, histtype="step", lw=1.4, label="synthetic", color="C3")
        ax.set_xlabel("outcome")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def balance_figure(rows, path, threshold=0.1):
    """Absolute standardized mean differences before and after matching."""
    names = list(rows.index)
    y = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.3 * len(names) + 1.2))
        ax.scatter(np.abs(rows["smd_before"]), y, marker="x", color="C1", label="before")
        ax.scatter(np.abs(rows["smd_after"]), y, marker="o", color="C0", label="after")
        ax.axvline(threshold, color="0.5", ls="--", lw=0.8)
        ax.set_yticks(y)
        ax.set_yticklabels(names)
        ax.set_xlabel("|standardized mean difference|")
        ax.legend(frameon=False)
        return _save(fig, path)
