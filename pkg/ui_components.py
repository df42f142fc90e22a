import logging
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from tabulate import tabulate

logger = logging.getLogger(__name__)

# --- CORPORATE IDENTITY COLORS ---
COLOR_BLUE = "#302BFF"   # Electric Blue
COLOR_TEAL = "#00D2BE"   # Turbo Teal
COLOR_CORAL = "#FF2E4D"  # Radical Coral
COLOR_GREY = "#4B5563"   # Space Grey
COLOR_AMBER = "#FFAB00"  # Amber Flux
COLOR_PURPLE = "#7B2BFF" # Electric Violet

FAMILY_COLORS = {"rvq": COLOR_TEAL, "dct_bpe": COLOR_BLUE, "uniform": COLOR_CORAL}
VARIANT_COLORS = {"ar_token_head": COLOR_PURPLE, "flow_s5": COLOR_BLUE, "distilled_s1": COLOR_TEAL}


def _layout(fig, title, x_title, y_title, log_x=False, log_y=False, height=500):
    fig.update_layout(
        title=title, template="plotly_white", height=height,
        margin=dict(l=20, r=20, t=40, b=20),
        legend=dict(orientation="h", y=1.02, x=1, xanchor="right"),
        xaxis_title=x_title, yaxis_title=y_title,
    )
    if log_x:
        fig.update_xaxes(type="log")
    if log_y:
        fig.update_yaxes(type="log")
    return fig


# --- FIGURE BUILDERS ---

def tokenizer_pareto_figure(df: pd.DataFrame):
    """Tokens per chunk against position MSE and rotation error, one trace per tokenizer."""
    fig = go.Figure()
    for family, grp in df.groupby("tokenizer", sort=True):
        grp = grp.sort_values("tokens_per_chunk")
        color = FAMILY_COLORS.get(family, COLOR_GREY)
        fig.add_trace(go.Scatter(x=grp["tokens_per_chunk"], y=grp["pos_mse"], mode="lines+markers",
                                 name=f"{family} position", line=dict(color=color, width=2)))
        fig.add_trace(go.Scatter(x=grp["tokens_per_chunk"], y=grp["rot_geodesic_rad"], mode="lines+markers",
                                 name=f"{family} rotation", yaxis="y2",
                                 line=dict(color=color, width=2, dash="dot")))
    fig.update_layout(yaxis2=dict(title="Rotation geodesic error (rad)", overlaying="y", side="right", type="log"))
    return _layout(fig, "Tokenizer error vs tokens", "Tokens per chunk", "Position MSE (m²)",
                   log_x=True, log_y=True)


def hybrid_training_figure(df: pd.DataFrame):
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=df["step"], y=df["hybrid_loss"], mode="lines", showlegend=False,
                             line=dict(color="rgba(0, 210, 190, 0.15)", width=1), hoverinfo="skip"))
    fig.add_trace(go.Scatter(x=df["step"], y=df["scratch_loss"], mode="lines", showlegend=False,
                             line=dict(color="rgba(255, 46, 77, 0.15)", width=1), hoverinfo="skip"))
    fig.add_trace(go.Scatter(x=df["step"], y=df["hybrid_smoothed"], mode="lines", name="AR + flow",
                             line=dict(color=COLOR_TEAL, width=3)))
    fig.add_trace(go.Scatter(x=df["step"], y=df["scratch_smoothed"], mode="lines", name="Flow from scratch",
                             line=dict(color=COLOR_CORAL, width=3)))
    return _layout(fig, "Flow loss: pretrained condition vs scratch", "Step", "Flow-matching loss", log_y=True)


def speed_figure(df: pd.DataFrame):
    colors = [VARIANT_COLORS.get(v, COLOR_GREY) for v in df["variant"]]
    fig = go.Figure(go.Bar(x=df["variant"], y=df["chunks_per_s"], marker_color=colors,
                           text=[f"{v:.1f}" for v in df["chunks_per_s"]], textposition="outside"))
    return _layout(fig, "Inference throughput", "Variant", "Chunks per second")


def scaling_figure(points: pd.DataFrame, fit: dict):
    fig = go.Figure()
    sizes = sorted(points["N"].unique())
    palette = [COLOR_BLUE, COLOR_TEAL, COLOR_PURPLE, COLOR_CORAL, COLOR_AMBER, COLOR_GREY]
    for i, n in enumerate(sizes):
        grp = points[points["N"] == n].sort_values("D")
        color = palette[i % len(palette)]
        fig.add_trace(go.Scatter(x=grp["D"], y=grp["loss"], mode="markers", name=f"N={int(n)}",
                                 marker=dict(color=color, size=6)))
        if fit:
            d_grid = np.geomspace(grp["D"].min(), grp["D"].max(), 50)
            pred = fit["E"] + fit["A"] / n ** fit["alpha"] + fit["B"] / d_grid ** fit["beta"]
            fig.add_trace(go.Scatter(x=d_grid, y=pred, mode="lines", showlegend=False,
                                     line=dict(color=color, width=2, dash="dash")))
    return _layout(fig, "Loss vs consumed tokens", "Tokens D", "Loss", log_x=True, log_y=True)


def success_rate_figure(df: pd.DataFrame):
    k = df["k"].to_numpy()
    upper = (df["p_hat"] + df["se"]).to_numpy()
    lower = (df["p_hat"] - df["se"]).to_numpy()
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=np.concatenate([k, k[::-1]]), y=np.concatenate([upper, lower[::-1]]),
                             fill="toself", fillcolor="rgba(0, 210, 190, 0.15)", line=dict(width=0),
                             name="± 1 SE"))
    fig.add_trace(go.Scatter(x=k, y=df["p_hat"], mode="lines", name="Success rate",
                             line=dict(color=COLOR_BLUE, width=3)))
    final = float(df["p_hat"].iloc[-1])
    fig.add_shape(type="line", x0=1, y0=final, x1=int(k[-1]), y1=final,
                  line=dict(color="gray", width=1, dash="dash"))
    return _layout(fig, "Success-rate convergence", "Trials", "Success rate")


def write_figure(fig, path, div_id: str) -> Path:
    """Standalone HTML with a fixed div id so reruns give identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    html = fig.to_html(include_plotlyjs="cdn", full_html=True, div_id=div_id)
    path.write_text(html, encoding="utf-8")
    return path


# --- TEXT TABLES ---

def render_table(df: pd.DataFrame, floatfmt=".6g") -> str:
    return tabulate(df, headers="keys", tablefmt="github", showindex=False, floatfmt=floatfmt)


def print_summary(title: str, df: pd.DataFrame, floatfmt=".6g"):
    print(f"\n{title}\n{render_table(df, floatfmt)}")
