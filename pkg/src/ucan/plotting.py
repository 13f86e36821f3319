"""SVG figures rendered next to the CSV reports.

Output is byte-stable for identical data: the SVG hash salt is fixed and the
date metadata dropped.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "ucan",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def rank_spectrum(reports, path, tol=None):
    """Mean normalised singular value spectrum across seeds, one line per kind."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        by_kind = {}
        for r in reports:
            s = np.asarray(r.singular_values, dtype=float)
            by_kind.setdefault(r.kind, []).append(s / s[0] if s[0] > 0 else s)
        for kind, spectra in sorted(by_kind.items()):
            mean = np.mean(np.stack(spectra), axis=0)
            ax.semilogy(np.arange(1, mean.size + 1), np.maximum(mean, 1e-18), label=kind)
        if tol is not None:
            ax.axhline(tol, color="0.5", lw=0.8, ls="--", label=f"tol={tol:g}")
        ax.set_xlabel("index i")
        ax.set_ylabel(r"$\sigma_i / \sigma_1$")
        ax.legend(frameon=False)
        return _save(fig, path)


def erf_profile(report, path):
    """Horizontal impulse response through the centre row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        prof = np.asarray(report.profile)
        x = np.arange(prof.size) - prof.size // 2
        ax.bar(x, prof, width=1.0, color="tab:blue")
        ax.set_xlabel("offset (pixels)")
        ax.set_ylabel("response")
        ax.set_title(f"predicted ERF {report.predicted_erf}, measured {report.measured_erf_w}")
        return _save(fig, path)


def mac_breakdown(rows, path):
    """Horizontal bars of MACs per component."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r["component"] for r in rows]
        ax.barh(names, [r["macs"] for r in rows], color="tab:green")
        ax.set_xlabel("MACs")
        ax.invert_yaxis()
        return _save(fig, path)


def bench_scaling(rows, path):
    """Peak temporary allocation and wall time against N, log-log."""
    with plt.rc_context({**STYLE, "figure.figsize": (7.0, 3.0)}):
        fig, (a1, a2) = plt.subplots(1, 2)
        for engine in sorted({r["engine"] for r in rows}):
            sel = sorted((r for r in rows if r["engine"] == engine), key=lambda r: r["N"])
            n = [r["N"] for r in sel]
            a1.loglog(n, [max(r["peak_temp_elements"], 1) for r in sel], marker="o", label=engine)
            a2.loglog(n, [r["wall_time_s"] for r in sel], marker="o", label=engine)
        a1.set_xlabel("N")
        a1.set_ylabel("peak temp elements")
        a2.set_xlabel("N")
        a2.set_ylabel("median wall time (s)")
        a1.legend(frameon=False)
        return _save(fig, path)
