"""Consolidated markdown/CSV report with matplotlib figures for a run directory."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import numpy as np

from convqec.analysis import read_curve_csv


def _mpl():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(
        {
            "figure.figsize": (5.0, 3.6),
            "axes.grid": True,
            "grid.alpha": 0.3,
            "font.size": 9,
            "legend.fontsize": 8,
            "savefig.dpi": 120,
            # fixed metadata keeps PNG bytes reproducible
            "svg.hashsalt": "convqec",
        }
    )
    return plt


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def _fmt(x, digits=4):
    if isinstance(x, float):
        return f"{x:.{digits}g}"
    return str(x)


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        out.append("| " + " | ".join(_fmt(v) for v in r) + " |")
    return out


def plot_curves(curves: dict, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots()
    for name, pts in sorted(curves.items()):
        p = np.array([q.p for q in pts])
        pl = np.array([q.P_L for q in pts])
        lo = np.array([q.ci_low for q in pts])
        hi = np.array([q.ci_high for q in pts])
        ax.errorbar(p, pl, yerr=[pl - lo, hi - pl], marker="o", ms=3, capsize=2, label=name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("physical error rate p")
    ax.set_ylabel("logical error rate $P_L$")
    ax.legend()
    _save(fig, path)


def plot_lambda(pts, fit: dict | None, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots()
    d = np.array([q.d for q in pts])
    pl = np.array([q.P_L for q in pts])
    ax.errorbar(d, pl, yerr=[pl - [q.ci_low for q in pts], np.array([q.ci_high for q in pts]) - pl], marker="s", ms=3, capsize=2, ls="none", label="data")
    if fit:
        dd = np.linspace(d.min(), d.max(), 50)
        ax.plot(dd, np.exp(fit["params"]["intercept"] - fit["params"]["ln_Lambda"] * np.floor((dd + 1) / 2)), "k--", lw=1, label=f"Lambda = {fit['params']['Lambda']:.2f}")
    ax.set_yscale("log")
    ax.set_xlabel("code distance d")
    ax.set_ylabel("$P_L$")
    ax.legend()
    _save(fig, path)


def plot_loss(metrics: list, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots()
    steps = [m["step"] for m in metrics]
    loss = np.array([m["loss"] for m in metrics])
    ax.plot(steps, loss, lw=0.6, alpha=0.5, label="batch loss")
    if len(loss) >= 20:
        w = max(len(loss) // 50, 5)
        ax.plot(steps[w - 1 :], np.convolve(loss, np.ones(w) / w, mode="valid"), lw=1.2, label=f"mean over {w}")
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss")
    ax.legend()
    _save(fig, path)


def plot_reliability(cal: dict, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(3.8, 3.6))
    bins = [b for b in cal["bins"] if b[2] > 0]
    ax.plot([0, 1], [0, 1], "k:", lw=1)
    ax.plot([b[0] for b in bins], [b[1] for b in bins], "o-", ms=3)
    ax.set_xlabel("predicted probability")
    ax.set_ylabel("empirical frequency")
    ax.set_title(f"ECE = {cal['ece']:.4f}")
    _save(fig, path)


def plot_postselect(rows, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots()
    acc = np.array([float(r["acceptance"]) for r in rows])
    err = np.array([float(r["error"]) for r in rows])
    ok = np.isfinite(err) & (err > 0)
    ax.plot(acc[ok], err[ok], "o-", ms=3)
    ax.set_yscale("log")
    ax.set_xlabel("acceptance rate")
    ax.set_ylabel("error rate among accepted")
    ax.invert_xaxis()
    _save(fig, path)


def _load_json(path):
    return json.loads(Path(path).read_text())


def build_report(run_dir) -> dict:
    """Write report.md, summary.csv and figures into run_dir; return a status dict."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]
    summary: list[tuple[str, str]] = []
    figures = []
    missing = []
    manifest_path = run / "manifest.json"
    if not manifest_path.exists():
        print(f"warning: no manifest.json in {run}; empty report", file=sys.stderr)
        lines += ["No artifacts found.", ""]
        (run / "report.md").write_text("\n".join(lines))
        return {"sections": [], "missing": [], "warning": "empty"}

    manifest = _load_json(manifest_path)
    for f in manifest.get("files", []):
        if not (run / f["path"]).exists():
            missing.append(f["path"])
    lines += [f"Config hash `{manifest['config_hash'][:16]}`, seed {manifest['seed']}.", ""]
    sections = []

    metrics_path = run / "train" / "metrics.ndjson"
    if metrics_path.exists():
        metrics = [json.loads(x) for x in metrics_path.read_text().splitlines() if x.strip()]
        sections.append("training")
        lines += ["## Training", ""]
        if metrics:
            plot_loss(metrics, run / "fig_loss.png")
            figures.append("fig_loss.png")
            tail = float(np.mean([m["loss"] for m in metrics[-max(len(metrics) // 10, 1) :]]))
            lines += [f"{len(metrics)} steps; mean loss over the last 10%: {tail:.4f}", "", "![loss](fig_loss.png)", ""]
            summary.append(("train.final_loss", repr(tail)))
        else:
            lines += ["No optimizer steps were run.", ""]

    curve_files = sorted((run / "curves").glob("*.csv")) if (run / "curves").exists() else []
    curves = {f.stem: read_curve_csv(f) for f in curve_files if f.stem != "lambda"}
    if curves:
        sections.append("curves")
        lines += ["## Error-rate curves", ""]
        rows = []
        for name, pts in sorted(curves.items()):
            for q in pts:
                rows.append((name, q.p, q.shots, q.failures, q.P_block, q.P_L, q.ci_low, q.ci_high))
                summary.append((f"curve.{name}.p={q.p:g}.P_L", repr(q.P_L)))
        lines += _table(["decoder", "p", "shots", "failures", "P_block", "P_L", "ci_low", "ci_high"], rows) + [""]
        plot_curves(curves, run / "fig_curves.png")
        figures.append("fig_curves.png")
        lines += ["![curves](fig_curves.png)", ""]

    fits_path = run / "fits.json"
    if fits_path.exists() or (run / "curves" / "lambda.csv").exists():
        fits = _load_json(fits_path) if fits_path.exists() else {}
        sections.append("fits")
        lines += ["## Fits", ""]
        if "lambda" in fits:
            p = fits["lambda"]["params"]
            lines += [f"Lambda = {p['Lambda']:.4g} (raw regression slope across distances)", ""]
            summary.append(("fit.lambda", repr(p["Lambda"])))
        if (run / "curves" / "lambda.csv").exists():
            pts = read_curve_csv(run / "curves" / "lambda.csv")
            lines += _table(["d", "p", "shots", "failures", "P_L"], [(q.d, q.p, q.shots, q.failures, q.P_L) for q in pts]) + [""]
            plot_lambda(pts, fits.get("lambda"), run / "fig_lambda.png")
            figures.append("fig_lambda.png")
            lines += ["![lambda](fig_lambda.png)", ""]
        for key in ("waterfall", "suppression"):
            if key in fits:
                if "skipped" in fits[key]:
                    lines += [f"{key}: skipped ({fits[key]['skipped']})", ""]
                else:
                    lines += [f"{key}: " + ", ".join(f"{k} = {v:.4g}" for k, v in fits[key]["params"].items()), ""]
                    for k, v in fits[key]["params"].items():
                        summary.append((f"fit.{key}.{k}", repr(v)))

    census_path = run / "census.json"
    if census_path.exists():
        c = _load_json(census_path)
        sections.append("census")
        lines += ["## Failure-mode census", "", f"decoder {c['decoder']}, wmax {c['wmax']}, complete: {c['complete']}", ""]
        lines += _table(["w", "N(w)"], sorted((int(k), v) for k, v in c["N"].items())) + [""]
        if "predicted" in c:
            lines += [f"predicted P_L at p = {c['p']:g}: {c['predicted']:.4g}", ""]
        for k, v in c["N"].items():
            summary.append((f"census.N{k}", str(v)))

    cal_path = run / "calibration.json"
    if cal_path.exists():
        cal = _load_json(cal_path)
        sections.append("calibration")
        lines += ["## Calibration", "", f"ECE = {cal['ece']:.4g} over {sum(b[2] for b in cal['bins'])} predictions", ""]
        plot_reliability(cal, run / "fig_reliability.png")
        figures.append("fig_reliability.png")
        lines += ["![reliability](fig_reliability.png)", ""]
        summary.append(("calibration.ece", repr(cal["ece"])))
        ps_path = run / "postselect.csv"
        if ps_path.exists():
            with open(ps_path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            lines += _table(["tau", "acceptance", "error"], [(float(r["tau"]), float(r["acceptance"]), float(r["error"])) for r in rows]) + [""]
            plot_postselect(rows, run / "fig_postselect.png")
            figures.append("fig_postselect.png")
            lines += ["![post-selection](fig_postselect.png)", ""]

    hw_path = run / "hardware.json"
    if hw_path.exists():
        hw = _load_json(hw_path)
        sections.append("hardware")
        lines += ["## Hardware", ""]
        if "macs" in hw:
            rows = [(v, m["pointwise"], m["spatial"], m["attn_proj"], m["per_block"], m["spatial_fraction"], m["ratio_to_conv"]) for v, m in hw["macs"].items()]
            lines += _table(["variant", "pointwise", "spatial", "attn_proj", "per block", "spatial frac", "vs conv"], rows) + [""]
            for v, m in hw["macs"].items():
                summary.append((f"hw.macs.{v}.ratio_to_conv", repr(m["ratio_to_conv"])))
        if "roofline" in hw:
            r = hw["roofline"]
            lines += [
                f"Roofline ({r['preset']}, {r['throughput'] / 1e12:g} T MAC/s), d = {r['d']}, L = {r['L']}:",
                f"per-round n = {r['per_round_n']}: {r['latency_per_round_s'] * 1e6:.3f} us; "
                f"full volume n = {r['full_volume_n']}: {r['latency_full_volume_s'] * 1e6:.2f} us total, "
                f"{r['latency_full_volume_per_round_s'] * 1e6:.3f} us per round",
                "",
            ]
            lines += _table(["device", "latency factor"], sorted(r["latency_scaling"].items())) + [""]
            summary.append(("hw.roofline.latency_per_round_s", repr(r["latency_per_round_s"])))
        if "buffers" in hw:
            rows = [(v, b["residual_per_block"], b["residual_total"], b["weights_per_layer"], b["weights_total"]) for v, b in hw["buffers"].items()]
            lines += _table(["variant", "residual/block B", "residual total B", "weights/layer B", "weights total B"], rows) + [""]
        if "fold" in hw:
            lines += [f"BN folding: max |folded - eval| = {hw['fold']['max_abs_diff']:.3g}", ""]
        if "fp8" in hw:
            f = hw["fp8"]
            lines += [f"FP8 (E4M3): block error {f['rate_fp8']:.5f} vs {f['rate_fp32']:.5f} at 32 bits over {f['shots']} shots (2 sigma = {2 * f['sigma']:.5f})", ""]

    if missing:
        lines += ["## Missing artifacts", ""] + [f"- {m}" for m in missing] + [""]
    (run / "report.md").write_text("\n".join(lines))
    with open(run / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerows(summary)
    return {"sections": sections, "missing": missing, "figures": figures}
