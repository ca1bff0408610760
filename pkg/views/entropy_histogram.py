import logging

import numpy as np
import pandas as pd
from bokeh.embed import file_html
from bokeh.models import ColumnDataSource
from bokeh.plotting import figure
from bokeh.resources import CDN

from views.loss_epoch import first_color, last_color, style

logger = logging.getLogger(__name__)


def entropy_histogram_graph(frame, unit="bits"):
    """P (with context) and Q (without) bin counts; the overflow bin is drawn one width wide."""
    lows = frame["bin_lo"].to_numpy(dtype=float)
    highs = frame["bin_hi"].to_numpy(dtype=float)
    width = float(highs[0] - lows[0]) if len(lows) > 1 else 1.0
    highs = np.where(np.isfinite(highs), highs, lows + width)

    p = figure(
        title="Entropy of reconstructed reaction centres",
        x_axis_label=f"Entropy ({unit})",
        y_axis_label="Masked positions",
        width=730,
        height=425,
        toolbar_location=None,
        tools=[],
        output_backend="canvas",
    )
    for column_name, color, label in (("count_P", first_color, "With conditional molecules"), ("count_Q", last_color, "Without")):
        source = ColumnDataSource(data=dict(left=lows, right=highs, top=frame[column_name].to_numpy()))
        p.quad(left='left', right='right', top='top', bottom=0, source=source, color=color, alpha=0.5, legend_label=label)
    return style(p)


def render_histogram(csv_path, out_path, unit="bits"):
    frame = pd.read_csv(csv_path)
    page = file_html(entropy_histogram_graph(frame, unit), CDN, "Entropy histogram")
    with open(out_path, "w", encoding="utf-8") as handle:
        handle.write(page)
    logger.info("wrote %s", out_path)
    return out_path
