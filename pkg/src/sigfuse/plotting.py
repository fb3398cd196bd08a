"""Figures and CSV tables rendered from a report dict."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "font.size": 9,
}


def _save(fig, path: Path) -> Path:
    # fixed metadata keeps the PNG bytes stable between runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_agreement(section: dict, path: Path) -> Path:
    levels = section["agreement"]["levels"]
    s = [lv["S"] for lv in levels]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar([x - 0.2 for x in s], [lv["synthetic"] for lv in levels], width=0.4, label="synthetic")
        ax.bar([x + 0.2 for x in s], [lv["background"] for lv in levels], width=0.4, label="background")
        ax.set_yscale("symlog")
        ax.set_xlabel("consensus S")
        ax.set_ylabel("records")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_thresholds(section: dict, path: Path) -> Path:
    rows = section["thresholds"]
    k = [r["k"] for r in rows]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(k, [r["corpus_fraction"] for r in rows], marker="o", label="corpus fraction |A_k|/T")
        prec = [(r["k"], r["precision"]) for r in rows if r["precision"] is not None]
        if prec:
            ax.plot([p[0] for p in prec], [p[1] for p in prec], marker="s", label="precision")
        ax.set_xlabel("threshold k")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_pair_distances(section: dict, path: Path) -> Path | None:
    levels = [lv for lv in section.get("pair_distances", {}).get("levels", []) if lv.get("decision")]
    if not levels:
        return None
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        s = [lv["S"] for lv in levels]
        ax.plot(s, [lv["decision"]["mean"] for lv in levels], marker="o", label="mean")
        ax.plot(s, [lv["decision"]["median"] for lv in levels], marker="s", label="median")
        ax.set_xlabel("synthetic consensus S")
        ax.set_ylabel("cosine distance to seed")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_tables(section: dict, outdir: Path, prefix: str = "") -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    ag = section["agreement"]["levels"]
    written.append(_write_csv(
        outdir / f"{prefix}agreement.csv",
        ["S", "synthetic", "background", "total", "percent_of_corpus"],
        [[lv["S"], lv["synthetic"], lv["background"], lv["total"], lv["percent_of_corpus"]] for lv in ag],
    ))
    written.append(_write_csv(
        outdir / f"{prefix}thresholds.csv",
        ["k", "total", "background", "background_share", "corpus_fraction", "precision"],
        [[r["k"], r["total"], r["background"], r["background_share"], r["corpus_fraction"], r["precision"]]
         for r in section["thresholds"]],
    ))
    written.append(_write_csv(
        outdir / f"{prefix}contingency.csv",
        ["k", "a", "b", "c", "d", "odds_ratio", "p_fisher", "p_chi2", "p_fisher_adjusted", "selected_test"],
        [[r["k"], r["a"], r["b"], r["c"], r["d"], r["odds_ratio"]["display"], r["p_fisher"], r["p_chi2"],
          r["p_fisher_adjusted"], r["selected_test"]] for r in section["contingency"]],
    ))
    if section.get("per_model"):
        keys = list(section["per_model"][0])
        written.append(_write_csv(
            outdir / f"{prefix}per_model.csv", keys, [[m[k] for k in keys] for m in section["per_model"]]
        ))
    pd = section.get("pair_distances")
    if pd and pd.get("levels"):
        rows = []
        for lv in pd["levels"]:
            dec = lv.get("decision") or {}
            rows.append([lv["S"], lv["pairs"], lv["undefined"], dec.get("mean"), dec.get("median")])
        written.append(_write_csv(
            outdir / f"{prefix}pair_distances.csv", ["S", "pairs", "undefined", "mean", "median"], rows
        ))
    return written


def render_figures(section: dict, outdir: Path, prefix: str = "") -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    out = [
        plot_agreement(section, outdir / f"{prefix}agreement.png"),
        plot_thresholds(section, outdir / f"{prefix}thresholds.png"),
    ]
    pd = plot_pair_distances(section, outdir / f"{prefix}pair_distances.png")
    if pd is not None:
        out.append(pd)
    return out
