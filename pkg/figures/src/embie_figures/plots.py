"""One render function per plot kind; all take a PlotSpec and write a file."""

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .io import SchemaError, fit_slope, load_table

# deterministic output: fixed canvas, embedded glyphs in SVG
matplotlib.rcParams.update({"figure.figsize": (6.0, 4.5),
                            "figure.dpi": 120,
                            "savefig.dpi": 120,
                            "svg.fonttype": "path",
                            "svg.hashsalt": "embie-figures",
                            "font.size": 10})

K1_RESONANCE = 2.743707269992265


@dataclass
class PlotSpec:
    kind: str
    inputs: list
    output: str
    options: dict = field(default_factory=dict)


def _finish(fig, spec):
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if out.suffix == ".svg" else None
    fig.savefig(out, metadata=meta)
    plt.close(fig)
    return out


def plot_convergence(spec):
    """log-log eps_a (and eps_tail) vs h with the fitted slope annotated."""
    fig, ax = plt.subplots()
    slopes = {}
    for path in spec.inputs:
        t = load_table(path, ["level", "h", "eps_a", "eps_tail"])
        label = Path(path).stem.replace("convergence_", "")
        slope = fit_slope(t["h"], t["eps_a"])
        slopes[label] = slope
        ax.loglog(t["h"], t["eps_a"], "o-",
                  label=f"{label} (slope {slope:.2f})")
        ax.loglog(t["h"], t["eps_tail"], "s--",
                  label=f"{label} tail estimate")
    ax.set_xlabel("patch size h")
    ax.set_ylabel("relative error")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig._fitted_slopes = slopes
    return _finish(fig, spec), slopes


def plot_resonance(spec):
    """Condition number vs wavenumber, with the first interior resonance
    marked."""
    fig, ax = plt.subplots()
    for path in spec.inputs:
        t = load_table(path, ["k"])
        conds = [c for c in t if c.startswith("cond_")]
        if not conds:
            raise SchemaError(f"{path}: no cond_* columns")
        for c in conds:
            ax.semilogy(t["k"], t[c], "o-", label=c.replace("cond_", ""))
    ax.axvline(K1_RESONANCE, color="k", ls=":", lw=1,
               label=f"$k_1$ = {K1_RESONANCE:.4f}")
    ax.set_xlabel("wavenumber k")
    ax.set_ylabel("condition number")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, spec), None


def plot_static_limit(spec):
    """log-log field error vs wavenumber for each formulation column."""
    fig, ax = plt.subplots()
    for path in spec.inputs:
        t = load_table(path, ["k", "level"])
        errs = [c for c in t if c.startswith("eps_a_")]
        if not errs:
            raise SchemaError(f"{path}: no eps_a_* columns")
        for c in errs:
            for lev in np.unique(t["level"]):
                m = t["level"] == lev
                label = c.replace("eps_a_", "")
                if len(np.unique(t["level"])) > 1:
                    label += f" (level {int(lev)})"
                ax.loglog(t["k"][m], t[c][m], "o-", label=label)
    ax.set_xlabel("wavenumber k")
    ax.set_ylabel("field error $\\epsilon_a$")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _finish(fig, spec), None


def plot_residuals(spec):
    """GMRES relative residual vs iteration, one curve per run."""
    fig, ax = plt.subplots()
    for path in spec.inputs:
        t = load_table(path, ["level", "system", "iteration", "residual"])
        for lev in np.unique(t["level"]):
            for s in np.unique(t["system"]):
                m = (t["level"] == lev) & (t["system"] == s)
                if not m.any():
                    continue
                label = f"level {int(lev)}"
                if len(np.unique(t["system"])) > 1:
                    label += f" sys {int(s)}"
                ax.semilogy(t["iteration"][m], t["residual"][m],
                            label=label)
    ax.set_xlabel("GMRES iteration")
    ax.set_ylabel("relative residual")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _finish(fig, spec), None


def plot_farfield(spec):
    """Far-field magnitude in dB vs theta, one curve per phi cut."""
    fig, ax = plt.subplots()
    cuts = spec.options.get("phi_cuts")
    for path in spec.inputs:
        t = load_table(path, ["theta_deg", "phi_deg", "mag_dB"])
        phis = np.unique(t["phi_deg"])
        chosen = phis if cuts is None else \
            [phis[np.argmin(np.abs(phis - c))] for c in cuts]
        for p in chosen:
            m = t["phi_deg"] == p
            order = np.argsort(t["theta_deg"][m])
            ax.plot(t["theta_deg"][m][order], t["mag_dB"][m][order],
                    label=f"$\\phi$ = {p:g}$^\\circ$")
    ax.set_xlabel("$\\theta$ (degrees)")
    ax.set_ylabel("|F| (dB)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, spec), None


RENDERERS = {
    "convergence": plot_convergence,
    "resonance": plot_resonance,
    "static-limit": plot_static_limit,
    "residuals": plot_residuals,
    "farfield": plot_farfield,
}


def plot(spec):
    if spec.kind not in RENDERERS:
        raise SchemaError(f"unknown plot kind {spec.kind!r}; "
                          f"choose from {sorted(RENDERERS)}")
    if not spec.inputs:
        raise SchemaError("no input CSVs given")
    return RENDERERS[spec.kind](spec)
