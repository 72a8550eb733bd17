"""Render mission output directories into human summaries, CSV, and figures.

Rate rows 1 and 3 (streaming raw / streaming latent) are analytic from the
sensor shape and latent size; rows 2 and 4 divide the keyframe bytes a robot
actually produced by the mission duration.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .codec import load_codec  # noqa: E402
from .grid import explored_volume, load_grid  # noqa: E402
from .network import rate_table  # noqa: E402

ROBOTS = ("ground", "aerial")

# streaming-latent arithmetic defaults to the full-scale latent size unless
# the mission carried a learned codec whose dimension we can read back
FALLBACK_LATENT_DIM = 256


class _FakeIntr:
    def __init__(self, rows, cols):
        self.rows, self.cols = rows, cols


def load_report(mission_dir) -> dict:
    with open(Path(mission_dir) / "mission.json") as fh:
        return json.load(fh)


def load_metrics(mission_dir) -> list[dict]:
    rows = []
    with open(Path(mission_dir) / "metrics.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "t": float(row["t"]),
                "robot": row["robot"],
                "phase": int(row["phase"]),
                "explored_m3": float(row["explored_m3"]),
                "keyframes": int(row["keyframes"]),
                "bytes_tx": int(row["bytes_tx"]),
                "bytes_rx": int(row["bytes_rx"]),
            })
    return rows


def latent_dim_for(report: dict, robot: str, override: int | None = None) -> int:
    if override is not None:
        return override
    cfg = report["config"]
    spec = cfg[f"{robot}_codec"]
    if spec == "lossless":
        # lossless keyframes carry one float per pixel, so the matching
        # streaming row must assume the same per-message payload
        return cfg[f"{robot}_rows"] * cfg[f"{robot}_cols"]
    if Path(spec).is_file():
        return load_codec(spec).latent_dim
    return FALLBACK_LATENT_DIM


def robot_rate_rows(report: dict, robot: str, n_z: int):
    cfg, stats = report["config"], report["robots"][robot]
    intr = _FakeIntr(cfg[f"{robot}_rows"], cfg[f"{robot}_cols"])
    return rate_table(intr, n_z, stats["kf_raw_bytes"],
                      stats["kf_latent_bytes"], report["duration"])


def phase_spans(report: dict):
    """(phase, start, end) triples; a mission that never deploys is all 1."""
    end = report["duration"]
    deploy = report["deploy_t"]
    if deploy is None:
        return [(1, 0.0, end)]
    return [(1, 0.0, deploy), (2, deploy, deploy), (3, deploy, end)]


def _table(headers, rows, markdown: bool) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    if markdown:
        lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(row, widths))
                 + " |" for row in cells]
        lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    else:
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths))
                 for row in cells]
    return "\n".join(lines)


def render_summary(report: dict, n_z: int | None = None,
                   mission_dir=None, markdown: bool = False) -> str:
    out = []

    def heading(text):
        out.append(f"## {text}" if markdown else text)

    heading("Mission")
    overview = [
        ("seed", report["seed"]),
        ("duration_s", f"{report['duration']:.1f}"),
        ("trigger_fired", report["trigger_fired"]),
        ("deploy_t_s", "-" if report["deploy_t"] is None
         else f"{report['deploy_t']:.1f}"),
        ("timed_out", report["timed_out"]),
        ("merged_similarity_vs_truth",
         f"{report['merged_similarity_vs_truth']:.4f}"),
    ]
    if mission_dir is not None:
        combined = Path(mission_dir) / "combined_map.vox"
        if combined.is_file():
            overview.append(
                ("merged_explored_m3",
                 f"{explored_volume(load_grid(combined)):.3f}"))
    out.append(_table(["field", "value"], overview, markdown))

    heading("Phases")
    out.append(_table(
        ["phase", "start_s", "end_s", "duration_s"],
        [(p, f"{a:.1f}", f"{b:.1f}", f"{b - a:.1f}")
         for p, a, b in phase_spans(report)], markdown))

    heading("Robots")
    out.append(_table(
        ["robot", "explored_m3", "keyframes", "bytes_tx", "bytes_rx"],
        [(name, f"{r['explored_m3']:.3f}", r["keyframes"],
          r["bytes_tx"], r["bytes_rx"])
         for name, r in sorted(report["robots"].items())], markdown))

    for robot in ROBOTS:
        dim = latent_dim_for(report, robot, n_z)
        heading(f"Transmission rates: {robot} (N_z = {dim})")
        out.append(_table(
            ["scheme", "KiB/s"],
            [(label, f"{kib:.3f}")
             for label, kib in robot_rate_rows(report, robot, dim)],
            markdown))

    heading("Traffic by channel")
    out.append(_table(
        ["channel", "messages", "sent_B", "delivered_B", "dropped_B"],
        [(c, v["messages"], v["sent"], v["delivered"], v["dropped"])
         for c, v in sorted(report["traffic"].items())], markdown))
    return "\n\n".join(out) + "\n"


def write_rates_csv(path, report: dict, n_z: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["robot", "scheme", "kib_per_s"])
        for robot in ROBOTS:
            dim = latent_dim_for(report, robot, n_z)
            for label, kib in robot_rate_rows(report, robot, dim):
                w.writerow([robot, label, repr(kib)])


def render_figures(mission_dir, out_dir=None) -> list[Path]:
    """Exploration and bandwidth curves as PNG files, byte-stable per run."""
    mission_dir = Path(mission_dir)
    out_dir = mission_dir if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = load_report(mission_dir)
    rows = load_metrics(mission_dir)
    series = {name: ([r["t"] for r in rows if r["robot"] == name],
                     [r["explored_m3"] for r in rows if r["robot"] == name],
                     [r["bytes_tx"] / 1024 for r in rows
                      if r["robot"] == name]) for name in ROBOTS}
    written = []
    for fname, idx, ylabel, title in (
            ("exploration.png", 1, "explored volume [m^3]",
             "Explored volume over time"),
            ("bandwidth.png", 2, "cumulative transmitted [KiB]",
             "Transmitted bytes over time")):
        fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=120)
        for name in ROBOTS:
            t, *cols = series[name]
            ax.plot(t, cols[idx - 1], label=name)
        if report["deploy_t"] is not None:
            ax.axvline(report["deploy_t"], color="gray", linestyle="--",
                       linewidth=1, label="deployment")
        ax.set_xlabel("t [s]")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="upper left")
        fig.tight_layout()
        path = out_dir / fname
        # a None Date keeps the PNG free of wall-clock metadata
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
