"""Report figures.  Saved PNGs carry no timestamp, so reruns are byte-identical."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linestyle": "--",
    "svg.hashsalt": "sdlt",
}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_failure_rates(table, path) -> None:
    """Empirical failure rate per k against the (4 lambda)^k bound and the catch-up oracle."""
    ks = [r.k for r in table.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        rates = [r.failure_rate for r in table.rows]
        errs = [r.half_width99 for r in table.rows]
        ax.errorbar(ks, rates, yerr=errs, fmt="o", color="k", capsize=3,
                    label="empirical (99% CI)")
        ax.plot(ks, [r.bound for r in table.rows], "-", color="tab:red",
                label=rf"bound $(4\lambda)^k$, $\lambda$={table.lam:.3g}")
        if all(r.oracle is not None for r in table.rows):
            ax.plot(ks, [r.oracle for r in table.rows], "--", color="tab:blue",
                    label=r"catch-up $(q/p)^k$")
        ax.set_yscale("log")
        ax.set_xlabel("truncation depth k")
        ax.set_ylabel("failure rate")
        ax.set_title(f"PoW rewrite, p={table.p:.3g}, q={table.q:.3g}, n={table.trials}")
        ax.legend(loc="lower left")
        fig.tight_layout()
        _save(fig, path)


def plot_subset_classes(report, path) -> None:
    sizes = sorted(report.classes)
    outcomes = [("truth", "tab:green"), ("bottom", "tab:gray"), ("wrong", "tab:red")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        bottom = [0] * len(sizes)
        for name, color in outcomes:
            counts = [report.classes[s][name] for s in sizes]
            ax.bar(sizes, counts, bottom=bottom, color=color, label=name)
            bottom = [a + b for a, b in zip(bottom, counts)]
        ax.set_xlabel("subset size")
        ax.set_ylabel("subsets")
        ax.set_title(report.summary())
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
