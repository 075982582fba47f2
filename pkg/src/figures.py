"""
Figures
=======
Plotly charts for sweep tables, iteration reports and depth maps. Used by
the `sweep` command (HTML export) and the dashboard.
"""

from typing import TYPE_CHECKING, Union

import numpy as np
import pandas as pd
import plotly.graph_objs as go

from core import DepthMap

if TYPE_CHECKING:
    from pipeline import ReconstructionReport


def sweep_figure(table: pd.DataFrame) -> go.Figure:
    """Depth error versus light distance, one line per method."""
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=table["distance"], y=100 * table["parallel_error"],
        mode="lines+markers", name="Parallel lights",
        line=dict(color="#d32f2f", width=2),
    ))
    fig.add_trace(go.Scatter(
        x=table["distance"], y=100 * table["near_point_error"],
        mode="lines+markers", name="Near point lights",
        line=dict(color="#1976d2", width=2),
    ))
    fig.update_layout(
        title="Depth error vs. light distance",
        xaxis_title="Light distance (scene units)",
        yaxis_title="Depth error (% of depth range)",
        template="plotly_white",
        hovermode="x unified",
    )
    return fig


def iteration_figure(report: Union[dict, "ReconstructionReport"]) -> go.Figure:
    """Calibration objective and light movement per global iteration."""
    data = report if isinstance(report, dict) else report.to_dict()
    rows = data.get("iterations", [])
    its = [r["iteration"] for r in rows]

    fig = go.Figure()
    fig.add_trace(go.Scatter(x=its, y=[r["objective"] for r in rows], mode="lines+markers",
                             name="Objective", yaxis="y1"))
    fig.add_trace(go.Bar(x=its, y=[r["max_position_change"] for r in rows],
                         name="Max light shift", yaxis="y2", opacity=0.4))
    errors = [r.get("depth_error") for r in rows]
    if any(e is not None for e in errors):
        fig.add_trace(go.Scatter(x=its, y=[None if e is None else 100 * e for e in errors],
                                 mode="lines+markers", name="Depth error (%)", yaxis="y2"))
    fig.update_layout(
        title="Global iterations",
        xaxis=dict(title="Iteration", dtick=1),
        yaxis=dict(title="Objective", type="log"),
        yaxis2=dict(title="Shift / error", overlaying="y", side="right"),
        template="plotly_white",
    )
    return fig


def depth_figure(depth: Union[DepthMap, np.ndarray], title: str = "Depth") -> go.Figure:
    values = depth.depth if isinstance(depth, DepthMap) else np.asarray(depth, dtype=float)
    fig = go.Figure(go.Heatmap(z=values, colorscale="Viridis", colorbar=dict(title="z")))
    fig.update_layout(title=title, template="plotly_white",
                      yaxis=dict(autorange="reversed", scaleanchor="x"))
    return fig
