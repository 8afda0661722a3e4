import { formatPct, formatValue } from './session';
import type { MetricReport, RunStatus } from './types';

/**
 * Metric reports as a table.  Delta cells carry the raw wire value in
 * data-raw so the displayed number can always be traced back to the
 * run record it came from.
 */
export function renderMetricsTable(doc: Document, metrics: MetricReport[]): HTMLTableElement {
  const cell = (row: HTMLElement, text: string, className?: string): HTMLElement => {
    const td = doc.createElement('td');
    td.textContent = text;
    if (className) td.className = className;
    row.appendChild(td);
    return td;
  };

  const table = doc.createElement('table');
  table.className = 'metrics';
  const thead = doc.createElement('thead');
  const headRow = doc.createElement('tr');
  for (const title of ['region', 'mean', 'std', 'SNR', 'dSNR', 'dmean']) {
    const th = doc.createElement('th');
    th.textContent = title;
    headRow.appendChild(th);
  }
  thead.appendChild(headRow);
  table.appendChild(thead);

  const tbody = doc.createElement('tbody');
  table.appendChild(tbody);
  for (const m of metrics) {
    const row = doc.createElement('tr');
    tbody.appendChild(row);
    cell(row, `${m.region.x},${m.region.y} ${m.region.width}x${m.region.height}`);
    cell(row, formatValue(m.mean));
    cell(row, formatValue(m.std));
    cell(row, formatValue(m.snr));
    cell(row, formatPct(m.delta_snr_pct), 'delta-snr')
      .setAttribute('data-raw', JSON.stringify(m.delta_snr_pct));
    cell(row, formatPct(m.delta_mean_pct), 'delta-mean')
      .setAttribute('data-raw', JSON.stringify(m.delta_mean_pct));
  }
  return table;
}

/** One-line run summary for the progress panel. */
export function statusLine(status: RunStatus): string {
  if (status.status === 'error') return `error: ${status.error ?? 'unknown failure'}`;
  const stage = status.stage ? ` - ${status.stage}` : '';
  const epochs = status.loss_history.length;
  const loss = epochs > 0 ? `, epoch ${epochs} loss ${status.loss_history[epochs - 1].toFixed(4)}` : '';
  return `${status.status}${stage}${loss}`;
}

/** Dismissible error banner; onDismiss also fires when the user closes it. */
export function renderBanner(doc: Document, message: string, onDismiss?: () => void): HTMLElement {
  const banner = doc.createElement('div');
  banner.className = 'banner';
  const text = doc.createElement('span');
  text.textContent = message;
  const close = doc.createElement('button');
  close.textContent = 'dismiss';
  close.addEventListener('click', () => {
    banner.remove();
    onDismiss?.();
  });
  banner.appendChild(text);
  banner.appendChild(close);
  return banner;
}
