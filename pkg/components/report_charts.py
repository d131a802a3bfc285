import altair as alt
import pandas as pd

SERIES_COLORS = {
    "estimate": "#1565c0",
    "exact": "#43a047",
    "output": "#1565c0",
    "truth": "#43a047",
}


def _trace_frame(checkpoints, columns):
    rows = []
    for point in checkpoints:
        for column in columns:
            if point.get(column) is None:
                continue
            rows.append({"t": point["t"], "series": column, "value": float(point[column])})
    return pd.DataFrame(rows, columns=["t", "series", "value"])


def error_trace_chart(checkpoints, title, columns=("estimate", "exact")):
    """Estimate and exact value at each checkpoint, one line per series."""
    df = _trace_frame(checkpoints, columns)
    color_scale = alt.Scale(
        domain=list(columns),
        range=[SERIES_COLORS.get(c, "#757575") for c in columns],
    )
    return (
        alt.Chart(df)
        .mark_line(point=True)
        .encode(
            x=alt.X("t:Q", title="Updates"),
            y=alt.Y("value:Q", title="Value"),
            color=alt.Color("series:N", scale=color_scale, title=None),
            tooltip=[
                alt.Tooltip("t:Q", title="t"),
                alt.Tooltip("series:N", title="Series"),
                alt.Tooltip("value:Q", title="Value", format=",.3f"),
            ],
        )
        .properties(height=250, width=520, title=title)
    )


def relative_error_chart(steps, eps, title):
    """Per-step relative error with the eps band drawn as a rule."""
    df = pd.DataFrame(steps)
    line = (
        alt.Chart(df)
        .mark_line(color="#1565c0")
        .encode(
            x=alt.X("t:Q", title="Updates"),
            y=alt.Y("rel_error:Q", title="Relative error"),
            tooltip=[alt.Tooltip("t:Q"), alt.Tooltip("rel_error:Q", format=".4f")],
        )
    )
    band = alt.Chart(pd.DataFrame({"eps": [eps]})).mark_rule(color="#e53935", strokeDash=[4, 4]).encode(y="eps:Q")
    return (line + band).properties(height=250, width=520, title=title)


def space_scaling_chart(accounting, title="Rows vs 1/eps"):
    """Log-log rows against 1/eps, one point per eps."""
    df = pd.DataFrame(accounting)
    df["inv_eps"] = 1.0 / df["eps"]
    base = alt.Chart(df).encode(
        x=alt.X("inv_eps:Q", scale=alt.Scale(type="log"), title="1/eps"),
        y=alt.Y("stack_rows:Q", scale=alt.Scale(type="log"), title="Rows"),
        tooltip=[
            alt.Tooltip("eps:Q", title="eps"),
            alt.Tooltip("stack_rows:Q", title="Rows", format=",.0f"),
            alt.Tooltip("levels:Q", title="Levels"),
        ],
    )
    chart = base.mark_line(color="#1565c0") + base.mark_point(color="#1565c0", size=60)
    return chart.properties(height=250, width=420, title=title)


def save_chart(chart, path):
    chart.save(str(path))
    return path
