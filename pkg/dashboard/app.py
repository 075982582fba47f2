import dash
from dash import dcc, html, Output, Input
import plotly.graph_objs as go
import pandas as pd
import json
import os
from dotenv import load_dotenv
import sys

# import helpers for loading reconstruction outputs
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
try:
    import settings
    from figures import depth_figure, iteration_figure, sweep_figure
    from image_io import read_pfm
    from errors import ReconstructionError
except Exception:
    settings = None
    depth_figure = iteration_figure = sweep_figure = None
    read_pfm = None
    ReconstructionError = Exception

# Load environment variables from .env file
env_path = os.path.join(os.path.dirname(__file__), "..", ".env")
load_dotenv(env_path)

if settings is not None:
    settings.setup_logging()

RESULTS_DIR = os.getenv('PSRECON_OUTPUT_DIR', 'output')
try:
    DASHBOARD_PORT = int(os.getenv('PSRECON_DASHBOARD_PORT', '8050'))
except Exception:
    DASHBOARD_PORT = 8050

app = dash.Dash(__name__)

BUTTON_STYLE = {
    'marginTop': '10px',
    'padding': '8px 16px',
    'backgroundColor': '#2196F3',
    'color': 'white',
    'border': 'none',
    'borderRadius': '4px',
    'cursor': 'pointer',
    'fontSize': '14px'
}

app.layout = html.Div([
    html.H1("Reconstruction Viewer"),

    html.Div([
        html.Label("Results directory:"),
        dcc.Input(id='results-dir', type='text', value=RESULTS_DIR, debounce=True,
                  style={'width': '400px'}),
    ], style={'marginBottom': '12px'}),

    # Manual refresh button for results
    html.Button('🔄 Reload Results', id='reload-btn', n_clicks=0, style=BUTTON_STYLE),

    html.Div(id='status', style={'marginTop': '8px', 'color': '#666', 'fontSize': '12px'}),

    html.Div([
        dcc.Graph(id='depth-graph', style={'width': '50%'}),
        dcc.Graph(id='iteration-graph', style={'width': '50%'}),
    ], style={'display': 'flex'}),

    dcc.Graph(id='sweep-graph'),
])


def empty_figure(message: str) -> go.Figure:
    fig = go.Figure()
    fig.update_layout(
        template='plotly_white',
        xaxis={'visible': False},
        yaxis={'visible': False},
        annotations=[{'text': message, 'showarrow': False, 'font': {'size': 14, 'color': '#999'}}]
    )
    return fig


def load_results(results_dir: str) -> dict:
    """
    Read whatever outputs exist in a reconstruction directory.

    Args:
        results_dir: Output folder of `cli.py reconstruct` or `cli.py sweep`

    Returns:
        Dict with optional 'depth' (array), 'report' (dict) and 'sweep' (DataFrame)
    """
    results = {}
    depth_path = os.path.join(results_dir, 'depth.pfm')
    report_path = os.path.join(results_dir, 'report.json')
    sweep_path = os.path.join(results_dir, 'sweep.csv')

    if read_pfm and os.path.exists(depth_path):
        results['depth'] = read_pfm(depth_path)
    if os.path.exists(report_path):
        with open(report_path) as f:
            results['report'] = json.load(f)
    if os.path.exists(sweep_path):
        results['sweep'] = pd.read_csv(sweep_path)
    return results


@app.callback(
    Output('depth-graph', 'figure'),
    Output('iteration-graph', 'figure'),
    Output('sweep-graph', 'figure'),
    Output('status', 'children'),
    Input('reload-btn', 'n_clicks'),
    Input('results-dir', 'value'),
)
def update_figures(n_clicks, results_dir):
    if depth_figure is None:
        message = "⚠️ Plotting helpers could not be imported from src/"
        return empty_figure(message), empty_figure(message), empty_figure(message), message

    if not results_dir or not os.path.isdir(results_dir):
        message = f"❌ Directory not found: {results_dir}"
        return empty_figure(message), empty_figure(message), empty_figure(message), message

    try:
        results = load_results(results_dir)
    except (OSError, ValueError, ReconstructionError) as e:
        message = f"❌ Failed to load results: {e}"
        return empty_figure(message), empty_figure(message), empty_figure(message), message

    depth_fig = depth_figure(results['depth']) if 'depth' in results else empty_figure("No depth.pfm")
    iter_fig = iteration_figure(results['report']) if 'report' in results else empty_figure("No report.json")
    sweep_fig = sweep_figure(results['sweep']) if 'sweep' in results else empty_figure("No sweep.csv")

    found = ', '.join(sorted(results)) or 'nothing'
    return depth_fig, iter_fig, sweep_fig, f"✓ Loaded {found} from {results_dir}"


if __name__ == "__main__":
    app.run(debug=True, host="0.0.0.0", port=DASHBOARD_PORT)
