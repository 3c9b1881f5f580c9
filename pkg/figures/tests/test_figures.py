"""Figure rendering tests on synthetic CSVs matching the harness schemas."""

import numpy as np
import pytest

from embie_figures import cli
from embie_figures.io import SchemaError, fit_slope, load_table
from embie_figures.plots import PlotSpec, plot


def _write(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                             for v in r) + "\n")
    return str(path)


@pytest.fixture
def conv_csv(tmp_path):
    h = np.sqrt(4 * np.pi / np.array([48, 192, 768]))
    eps = 1e-3 * (h / h[0]) ** 3
    rows = [(lev, hh, e, 2 * e, 20, 10.0)
            for lev, hh, e in zip((48, 192, 768), h, eps)]
    return _write(tmp_path / "convergence_nrccie_order2.csv",
                  ["level", "h", "eps_a", "eps_tail", "n_iter", "wall_time"],
                  rows)


def test_load_table_schema(tmp_path, conv_csv):
    t = load_table(conv_csv, ["level", "h", "eps_a"])
    assert len(t["h"]) == 3
    with pytest.raises(SchemaError):
        load_table(conv_csv, ["nonexistent"])
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(SchemaError):
        load_table(empty, ["k"])
    header_only = tmp_path / "h.csv"
    header_only.write_text("k,cond\n")
    with pytest.raises(SchemaError):
        load_table(header_only, ["k"])
    with pytest.raises(SchemaError):
        load_table(tmp_path / "missing.csv", ["k"])


def test_convergence_plot_and_slope(tmp_path, conv_csv):
    out = tmp_path / "conv.png"
    path, slopes = plot(PlotSpec("convergence", [conv_csv], str(out)))
    assert out.exists() and out.stat().st_size > 0
    # annotated slope must equal the harness least-squares definition
    t = load_table(conv_csv, ["h", "eps_a"])
    expected = np.polyfit(np.log10(t["h"]), np.log10(t["eps_a"]), 1)[0]
    got = slopes["nrccie_order2"]
    assert abs(got - expected) < 1e-10
    assert abs(got - 3.0) < 1e-8   # synthesized third-order data


def test_fit_slope_matches_polyfit_exactly():
    rng = np.random.default_rng(7)
    h = np.geomspace(1, 0.01, 6)
    eps = 3e-4 * h ** 2.5 * np.exp(rng.normal(scale=0.1, size=6))
    ours = fit_slope(h, eps)
    ref = np.polyfit(np.log10(h), np.log10(eps), 1)[0]
    assert ours == ref


def test_resonance_plot(tmp_path):
    ks = np.linspace(2.6, 2.9, 7)
    rows = [(k, 10 + 100 / (abs(k - 2.74) + 1e-2), 12.0) for k in ks]
    csv = _write(tmp_path / "resonance.csv",
                 ["k", "cond_mfie", "cond_nrccie"], rows)
    path, _ = plot(PlotSpec("resonance", [csv], str(tmp_path / "res.svg")))
    assert path.exists()
    bad = _write(tmp_path / "bad.csv", ["k", "other"], [(2.6, 1.0)])
    with pytest.raises(SchemaError):
        plot(PlotSpec("resonance", [bad], str(tmp_path / "bad.png")))


def test_static_limit_plot(tmp_path):
    ks = np.geomspace(1e-10, 1e-1, 5)
    rows = [(k, 0, 1e-4, 2e-4) for k in ks]
    csv = _write(tmp_path / "static_limit.csv",
                 ["k", "level", "eps_a_nrccie", "eps_a_dpie"], rows)
    path, _ = plot(PlotSpec("static-limit", [csv],
                            str(tmp_path / "static.png")))
    assert path.exists()


def test_residuals_plot(tmp_path):
    rows = [(192, 0, i, 10.0 ** -i) for i in range(8)]
    rows += [(768, 0, i, 10.0 ** (-0.9 * i)) for i in range(9)]
    csv = _write(tmp_path / "residuals_nrccie_order2.csv",
                 ["level", "system", "iteration", "residual"], rows)
    path, _ = plot(PlotSpec("residuals", [csv], str(tmp_path / "resid.png")))
    assert path.exists()


def test_farfield_plot(tmp_path):
    rows = []
    for t in (45.0, 135.0):
        for p in (0.0, 90.0, 180.0, 270.0):
            rows.append((t, p, 0.1, 0.0, 0.0, 0.1, -17.0))
    csv = _write(tmp_path / "farfield.csv",
                 ["theta_deg", "phi_deg", "Re_E_theta", "Im_E_theta",
                  "Re_E_phi", "Im_E_phi", "mag_dB"], rows)
    path, _ = plot(PlotSpec("farfield", [csv], str(tmp_path / "ff.png"),
                            {"phi_cuts": [0.0, 90.0]}))
    assert path.exists()


def test_plot_rejects_unknown_kind(tmp_path):
    with pytest.raises(SchemaError):
        plot(PlotSpec("pie-chart", ["x.csv"], str(tmp_path / "x.png")))
    with pytest.raises(SchemaError):
        plot(PlotSpec("resonance", [], str(tmp_path / "x.png")))


def test_cli_exit_codes(tmp_path, conv_csv):
    out = tmp_path / "fig.png"
    assert cli.main(["convergence", conv_csv, "--out", str(out)]) == 0
    assert out.exists()
    missing = str(tmp_path / "nope.csv")
    assert cli.main(["convergence", missing, "--out", str(out)]) == 1


def test_deterministic_output(tmp_path, conv_csv):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    cli.main(["convergence", conv_csv, "--out", str(a)])
    cli.main(["convergence", conv_csv, "--out", str(b)])
    # SVG output embeds no timestamps: identical bytes for identical input
    assert a.read_bytes() == b.read_bytes()
