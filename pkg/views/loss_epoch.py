import json
import logging

from bokeh.embed import file_html
from bokeh.layouts import column
from bokeh.models import ColumnDataSource, Range1d
from bokeh.plotting import figure
from bokeh.resources import CDN

logger = logging.getLogger(__name__)

graph_background_color = (37, 37, 37)
graph_grid_color = (67, 67, 67)
tick_color = 'white'

# Colors
line_color = "#7EC8E3"
first_color = "#8BC34A"
last_color = "#FF6F61"


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def style(p):
    p.legend.location = "top_right"
    p.legend.label_text_color = "white"
    p.legend.background_fill_color = "#252525"
    p.legend.border_line_color = "white"

    p.background_fill_color = graph_background_color
    p.border_fill_color = graph_background_color
    p.outline_line_color = graph_background_color
    p.title.text_color = tick_color
    p.grid.grid_line_color = graph_grid_color
    p.xaxis.major_label_text_color = tick_color
    p.yaxis.major_label_text_color = tick_color
    p.xaxis.axis_label_text_color = tick_color
    p.yaxis.axis_label_text_color = tick_color
    return p


def _series(history, key):
    points = [(line["epoch"], line[key]) for line in history if line.get(key) is not None]
    return [x for x, _ in points], [y for _, y in points]


def loss_epoch_graph(history):
    """Training loss per epoch (step 0 included) with first/last markers, and validation metrics."""
    epochs, losses = _series(history, "loss")
    last_epoch = max(epochs) if epochs else 1

    loss_plot = figure(
        title=f"Pre-training loss ({history[0]['objective'] if history else '?'})",
        x_axis_label="Epoch",
        y_axis_label="Loss per example",
        x_range=Range1d(start=0, end=max(last_epoch, 1)),
        width=730,
        height=425,
        toolbar_location=None,
        tools=[],
        output_backend="canvas",
    )
    source = ColumnDataSource(data=dict(x=epochs, y=losses))
    loss_plot.line('x', 'y', source=source, color=line_color, line_width=3, legend_label="Training loss")
    loss_plot.scatter('x', 'y', source=source, color=line_color, size=6, legend_label="Training loss")
    if epochs:
        loss_plot.scatter(x=[epochs[0]], y=[losses[0]], size=10, color=first_color, legend_label="Initial model", level='overlay')
        loss_plot.scatter(x=[epochs[-1]], y=[losses[-1]], size=10, color=last_color, legend_label="Final model", level='overlay')
    style(loss_plot)

    val_plot = figure(
        title="Validation reconstruction accuracy / RCI ROC-AUC",
        x_axis_label="Epoch",
        y_axis_label="Score",
        x_range=Range1d(start=0, end=max(last_epoch, 1)),
        y_range=Range1d(start=0, end=1.05),
        width=730,
        height=425,
        toolbar_location=None,
        tools=[],
        output_backend="canvas",
    )
    for key, color, label in (("recon_acc", line_color, "Reconstruction accuracy"), ("rci_auc", first_color, "RCI ROC-AUC")):
        xs, ys = _series(history, key)
        val_plot.line(xs, ys, color=color, line_width=3, legend_label=label)
        val_plot.scatter(xs, ys, color=color, size=6, legend_label=label)
    style(val_plot)
    val_plot.legend.location = "bottom_right"

    return column(loss_plot, val_plot, sizing_mode="scale_width")


def render_metrics(metrics_path, out_path):
    history = read_metrics(metrics_path)
    page = file_html(loss_epoch_graph(history), CDN, "Pre-training metrics")
    with open(out_path, "w", encoding="utf-8") as handle:
        handle.write(page)
    logger.info("wrote %s (%d metric lines)", out_path, len(history))
    return out_path
