import base64
import logging
from pathlib import Path
from typing import Dict

import numpy as np
import pandas as pd
import streamlit as st

from config import LOSS_SMOOTHING_WINDOW, RESOLUTION_LADDER, VALIDATION_LENGTHS
from utils import smooth

logger = logging.getLogger(__name__)


def find_runs(root) -> Dict[str, Path]:
    """Run directories under ``root``: any folder holding a loss_log.csv or a validation CSV."""
    root = Path(root)
    if not root.is_dir():
        return {}
    runs = {}
    for path in sorted(root.rglob("*.csv")):
        if path.name == "loss_log.csv" or path.name.startswith("validation"):
            runs.setdefault(str(path.parent.relative_to(root)) or ".", path.parent)
    return runs


def load_loss_log(path) -> pd.DataFrame:
    log = pd.read_csv(path)
    missing = {"global_step", "loss", "stage"} - set(log.columns)
    if missing:
        raise ValueError(f"{path} is not a loss log (missing {sorted(missing)})")
    return log


def loss_curves(log: pd.DataFrame, window: int = LOSS_SMOOTHING_WINDOW) -> pd.DataFrame:
    """Raw and smoothed loss indexed by global step, ready for st.line_chart."""
    frame = log.sort_values("global_step")
    return pd.DataFrame(
        {"loss": frame["loss"].to_numpy(), "smoothed": smooth(frame["loss"], window)},
        index=pd.Index(frame["global_step"].to_numpy(), name="global_step"),
    )


def stage_summary(log: pd.DataFrame) -> pd.DataFrame:
    """Per-stage step counts, first/last loss and masked-sample share."""
    rows = []
    for stage, group in log.groupby("stage", sort=True):
        videos = group["video_samples"].sum() if "video_samples" in group else 0
        rows.append({
            "stage": stage,
            "steps": len(group),
            "first_loss": group["loss"].iloc[0],
            "last_loss": group["loss"].iloc[-1],
            "masked_fraction": group["masked_samples"].sum() / videos if videos else np.nan,
        })
    return pd.DataFrame(rows, columns=["stage", "steps", "first_loss", "last_loss", "masked_fraction"])


def grid_table(cells: pd.DataFrame, value: str = "loss") -> pd.DataFrame:
    """Length x resolution table in ladder order; absent cells stay NaN."""
    table = cells.pivot(index="length", columns="resolution", values=value)
    rows = [r for r in VALIDATION_LENGTHS if r in table.index] + [r for r in table.index if r not in VALIDATION_LENGTHS]
    cols = [c for c in RESOLUTION_LADDER if c in table.columns] + [c for c in table.columns if c not in RESOLUTION_LADDER]
    return table.loc[rows, cols]


def get_download_link(content, filename="report.csv"):
    """Generate a download link for text content."""
    b64 = base64.b64encode(content.encode()).decode()
    return f'<a href="data:file/csv;base64,{b64}" download="{filename}" class="download-btn">Download {filename}</a>'


def main():
    """Dashboard over run artifacts."""
    st.set_page_config(page_title="Open-Sora Kit", page_icon="🎞️", layout="wide")
    st.title("🎞️ Open-Sora Kit runs")

    with st.sidebar:
        st.header("Run artifacts")
        root = st.text_input("Runs directory", value="runs")
        runs = find_runs(root)
        if not runs:
            st.info("No loss_log.csv or validation CSV found under this directory.")
            return
        run_name = st.selectbox("Run", list(runs))
        window = st.slider("Smoothing window", 1, 200, LOSS_SMOOTHING_WINDOW)
        st.markdown("---")
        st.caption("Artifacts are written by `cli.py train`, `validate` and `bucket-plan`.")

    run_dir = runs[run_name]
    tab1, tab2, tab3 = st.tabs(["📉 Training loss", "🧮 Validation grid", "🪣 Buckets"])

    with tab1:
        log_path = run_dir / "loss_log.csv"
        if log_path.exists():
            try:
                log = load_loss_log(log_path)
                st.line_chart(loss_curves(log, window))
                st.subheader("Stages")
                st.dataframe(stage_summary(log), use_container_width=True)
            except (ValueError, OSError) as e:
                st.error(f"Could not read {log_path}: {e}")
        else:
            st.info("This run has no loss log.")

    with tab2:
        grids = sorted(run_dir.glob("validation*.csv"))
        if not grids:
            st.info("Run `cli.py validate --out <run>/validation.csv` to fill this tab.")
        for path in grids:
            cells = pd.read_csv(path)
            st.subheader(path.name)
            st.dataframe(grid_table(cells).style.format("{:.4f}", na_rep="absent"), use_container_width=True)
            col1, col2 = st.columns(2)
            with col1:
                st.metric("Total loss", f"{cells['loss'].dropna().sum():.4f}")
            with col2:
                if "baseline" in cells:
                    st.metric("Untrained baseline", f"{cells['baseline'].dropna().sum():.4f}")
            st.markdown(get_download_link(cells.to_csv(index=False), path.name), unsafe_allow_html=True)

    with tab3:
        reports = sorted(run_dir.rglob("load_report.csv"))
        if not reports:
            st.info("Run `cli.py bucket-plan --out <run>/buckets` to fill this tab.")
        for path in reports:
            st.subheader(str(path.parent.relative_to(run_dir)))
            report = pd.read_csv(path)
            st.dataframe(report, use_container_width=True)
            per_bucket = report[report["bucket"] != "all"].set_index("bucket")
            st.bar_chart(per_bucket["batches"])


if __name__ == "__main__":
    main()
