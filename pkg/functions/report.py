"""
Modulo per la generazione di report HTML con grafici Plotly.
"""

import html
import webbrowser

import pandas as pd
import plotly.graph_objects as go

PHASE_COLORS = {
    'pretrain': '#302B8F',
    'mcd': '#8C564B',
    'adv_d': '#D62728',
    'adv_g': '#2CA02C',
    'finetune': '#FF7F0E',
}


def loss_curves_figure(metrics, smoothing=25):
    """
    Curve delle loss dal log delle metriche.

    Args:
        metrics: DataFrame con colonne step, phase, loss_name, value
        smoothing: finestra della media mobile (1 = nessuna)

    Returns:
        go.Figure con una traccia per coppia (fase, loss)
    """
    fig = go.Figure()
    for (phase, name), group in metrics.groupby(['phase', 'loss_name'], sort=False):
        values = group['value'].rolling(max(1, smoothing), min_periods=1).mean()
        fig.add_trace(go.Scatter(
            x=group['step'], y=values, mode='lines', name=f"{phase}/{name}",
            line=dict(color=PHASE_COLORS.get(phase)),
            hovertemplate='step %{x}<br>%{y:.4f}<extra>' + f"{phase}/{name}" + '</extra>',
        ))
    fig.update_layout(xaxis_title='passo di ottimizzazione', yaxis_title='loss', yaxis_type='log')
    return fig


def accuracy_figure(summary):
    """
    Barre di accuratezza per metodo (media sui seed, barre d'errore = std).

    Args:
        summary: DataFrame con colonne method, seed, sequence_accuracy, char_acc
    """
    grouped = summary.groupby('method', sort=False)
    means = grouped[['sequence_accuracy', 'char_acc']].mean()
    stds = grouped[['sequence_accuracy', 'char_acc']].std().fillna(0.0)
    fig = go.Figure()
    for column, label in (('sequence_accuracy', 'Sequence accuracy'), ('char_acc', 'CharAcc')):
        fig.add_trace(go.Bar(
            x=means.index, y=means[column] * 100, name=label,
            error_y=dict(type='data', array=stds[column] * 100),
            text=[f"{v * 100:.1f}" for v in means[column]], textposition='outside',
        ))
    fig.update_layout(barmode='group', yaxis_title='accuratezza (%)', yaxis_range=[0, 105])
    return fig


def probe_figure(probes):
    """Accuratezza del probe G1 vs G2 prima e dopo l'adattamento, per seed."""
    fig = go.Figure()
    for column, label in (('probe_before', 'prima'), ('probe_after', 'dopo')):
        fig.add_trace(go.Bar(x=probes['seed'].astype(str), y=probes[column] * 100, name=label))
    fig.update_layout(barmode='group', xaxis_title='seed', yaxis_title='accuratezza del probe (%)',
                      yaxis_range=[0, 105])
    return fig


def summary_table_html(frame, float_format='{:.4f}'):
    """Tabella HTML semplice di un DataFrame."""
    return frame.to_html(index=False, float_format=float_format.format, border=0,
                         classes='summary-table')


_STYLE = """
body { font-family: 'Segoe UI', sans-serif; max-width: 1200px; margin: 0 auto; padding: 12px; background: #fafafa; }
h1 { color: #302B8F; font-size: 22px; margin: 8px 0 16px; }
nav { position: sticky; top: 0; z-index: 10; background: #fff; padding: 8px 12px; border: 1px solid #ddd; }
nav button { font-size: 12px; margin: 2px; padding: 3px 8px; border: 1px solid #bbb; background: #fff; }
nav button.on { background: #2CA02C; border-color: #2CA02C; color: #fff; }
section { background: #fff; border: 1px solid #e3e3e3; margin: 12px 0; padding: 8px; }
section h2 { font-size: 15px; color: #302B8F; margin: 2px 6px; }
section p { font-size: 13px; color: #555; margin: 6px; }
table.summary-table { border-collapse: collapse; font-size: 13px; margin: 6px; }
table.summary-table td, table.summary-table th { padding: 3px 9px; border-bottom: 1px solid #ddd; text-align: right; }
"""

# Filtro per nome di serie: nessuna selezione = tutte visibili
_SCRIPT = """
const chosen = new Set();
function pick(btn) {
    const name = btn.dataset.series;
    chosen.has(name) ? chosen.delete(name) : chosen.add(name);
    btn.classList.toggle('on');
    refresh();
}
function pickNone() {
    chosen.clear();
    document.querySelectorAll('nav button').forEach(b => b.classList.remove('on'));
    refresh();
}
function refresh() {
    document.querySelectorAll('section.fig .plotly-graph-div').forEach(div => {
        if (div.data) Plotly.restyle(div, {visible: div.data.map(t => !chosen.size || chosen.has(t.name))});
    });
}
"""


def generate_html_report(plots_with_captions, title="FASDA Report", tables=None):
    """
    Genera un report HTML con grafici Plotly.

    Args:
        plots_with_captions: lista di tuple (fig, caption) o (fig, caption, titolo)
        title: titolo del report
        tables: lista di tuple (titolo, html della tabella)

    Returns:
        stringa HTML del report
    """
    series = []
    for item in plots_with_captions:
        series += [t.name for t in item[0].data if t.name and t.name not in series]

    buttons = ''.join(f'<button data-series="{html.escape(s)}" onclick="pick(this)">{html.escape(s)}</button>'
                      for s in series)
    parts = [
        '<!DOCTYPE html>\n<html>\n<head>\n<meta charset="utf-8">\n',
        f'<title>{html.escape(title)}</title>\n',
        '<script src="https://cdn.plot.ly/plotly-2.35.2.min.js"></script>\n',
        f'<style>{_STYLE}</style>\n</head>\n<body>\n',
        f'<h1>{html.escape(title)}</h1>\n',
        f'<nav><strong>Serie:</strong> <button onclick="pickNone()">tutte</button>{buttons}</nav>\n',
    ]
    for table_title, table_html in tables or []:
        parts.append(f'<section><h2>{html.escape(table_title)}</h2>\n{table_html}\n</section>\n')

    for fig, caption, *rest in plots_with_captions:
        fig.update_layout(height=480, margin=dict(l=50, r=30, t=30, b=50))
        heading = f'<h2>{html.escape(rest[0])}</h2>' if rest and rest[0] else ''
        parts.append(f'<section class="fig">{heading}\n'
                     f'{fig.to_html(full_html=False, include_plotlyjs=False)}\n'
                     f'<p>{caption}</p>\n</section>\n')

    parts.append(f'<script>{_SCRIPT}</script>\n</body>\n</html>\n')
    return ''.join(parts)


def build_run_report(metrics=None, summary=None, probes=None, title="FASDA Report"):
    """Report completo da log delle metriche e/o riepilogo degli esperimenti."""
    plots = []
    tables = []
    if metrics is not None and not metrics.empty:
        plots.append((loss_curves_figure(metrics),
                      "Loss per fase (media mobile). pretrain: L_att sorgente; mcd/adv_d: L_D; "
                      "adv_g: L_att, L_G e L_Att-G; finetune: L_att.",
                      "Curve di training"))
    if summary is not None and not summary.empty:
        plots.append((accuracy_figure(summary),
                      "Accuratezza sul test target, media sui seed.",
                      "Confronto tra metodi"))
        means = summary.groupby('method', sort=False)[['sequence_accuracy', 'char_acc']].mean().reset_index()
        tables.append(("Medie per metodo", summary_table_html(means)))
    if probes is not None and not probes.empty:
        plots.append((probe_figure(probes),
                      "Probe logistico G1 vs G2 su coppie tenute da parte: valori vicini al 50% "
                      "indicano domini non distinguibili.",
                      "Confusione tra domini"))
        tables.append(("Probe e MCD", summary_table_html(probes)))
    return generate_html_report(plots, title=title, tables=tables)


def save_report(html_content, filename, open_browser=False, verbose=True):
    """
    Salva il report HTML su file e opzionalmente lo apre nel browser.

    Args:
        html_content: stringa HTML
        filename: nome del file di output
        open_browser: se True, apre il report nel browser
    """
    with open(filename, 'w', encoding='utf-8') as f:
        f.write(html_content)
    if verbose:
        print(f"Report salvato: {filename}")

    if open_browser:
        webbrowser.open(filename)


def load_table(path):
    """Legge un TSV (metriche o riepilogo) come DataFrame."""
    return pd.read_csv(path, sep='\t')
