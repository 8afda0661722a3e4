import { ApiClient, ApiError } from './api';
import { renderBanner, renderMetricsTable, statusLine } from './render';
import {
  PATCH_SIZE,
  clearSession,
  countByLabel,
  loadSession,
  roiAt,
  saveSession,
  snapRoi,
  sparklinePoints,
  toRoiDoc,
  validateRoiDoc,
} from './session';
import type { Roi, RoiLabel, RunStatus } from './types';

// The service is a separate process; default to its standard port but let
// deployments override with ?api=<base>.
const apiBase =
  new URLSearchParams(location.search).get('api') ?? 'http://127.0.0.1:8000';
const api = new ApiClient(apiBase);

interface AppState {
  imageId: string | null;
  width: number;
  height: number;
  rois: Roi[];
  label: RoiLabel;
  zoom: number;
  runId: string | null;
  running: boolean;
}

const state: AppState = {
  imageId: null,
  width: 0,
  height: 0,
  rois: [],
  label: 'A',
  zoom: 1,
  runId: null,
  running: false,
};

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const banners = $('banners');
const canvas = $<HTMLCanvasElement>('view');
const runButton = $<HTMLButtonElement>('run');
const statusEl = $('status');
const sparkline = $('sparkline');
const metricsBox = $('metrics-box');
const compareBox = $('compare-box');
const inputImg = $<HTMLImageElement>('input-img');
const outputImg = $<HTMLImageElement>('output-img');
const attentionImg = $<HTMLImageElement>('attention-img');
let preview: HTMLImageElement | null = null;

function showError(message: string): void {
  banners.appendChild(renderBanner(document, message));
}

function asMessage(err: unknown): string {
  if (err instanceof ApiError) return `${err.status}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

// ---------------------------------------------------------------------------
// annotation canvas
// ---------------------------------------------------------------------------

function drawRois(ctx: CanvasRenderingContext2D): void {
  const z = state.zoom;
  ctx.lineWidth = Math.max(1, z);
  for (const roi of state.rois) {
    // stroke in scaled image coords so the box is 32x32 image pixels at
    // every zoom level
    ctx.strokeStyle = roi.label === 'A' ? '#e4572e' : '#17bebb';
    ctx.strokeRect(roi.x * z, roi.y * z, PATCH_SIZE * z, PATCH_SIZE * z);
    ctx.fillStyle = ctx.strokeStyle;
    ctx.font = `${10 * z}px sans-serif`;
    ctx.fillText(roi.label, roi.x * z + 2 * z, roi.y * z + 10 * z);
  }
}

function redraw(): void {
  if (!preview) return;
  const z = state.zoom;
  canvas.width = state.width * z;
  canvas.height = state.height * z;
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(preview, 0, 0, canvas.width, canvas.height);
  drawRois(ctx);
  const counts = countByLabel(state.rois);
  $('roi-count').textContent = `${counts.A} A / ${counts.N} N`;
}

async function saveRois(): Promise<void> {
  if (!state.imageId) return;
  const doc = toRoiDoc(state.rois);
  const problems = validateRoiDoc(doc, state.width, state.height);
  if (problems.length > 0) {
    showError(problems.join('; '));
    return;
  }
  await api.putRois(state.imageId, doc);
}

canvas.addEventListener('click', async (e) => {
  if (!state.imageId || state.running) return;
  const rect = canvas.getBoundingClientRect();
  const x = (e.clientX - rect.left) / state.zoom;
  const y = (e.clientY - rect.top) / state.zoom;

  const hit = roiAt(state.rois, x, y);
  const before = state.rois.slice();
  if (hit >= 0) {
    state.rois.splice(hit, 1);
  } else {
    const snapped = snapRoi(x, y, state.width, state.height);
    if (!snapped) return;
    state.rois.push({ ...snapped, label: state.label });
  }
  try {
    await saveRois();
  } catch (err) {
    state.rois = before; // server rejected; keep client state equal to server state
    showError(`saving ROIs failed: ${asMessage(err)}`);
  }
  redraw();
});

// ---------------------------------------------------------------------------
// upload and session restore
// ---------------------------------------------------------------------------

async function loadPreview(): Promise<void> {
  if (!state.imageId) return;
  preview = new Image();
  preview.crossOrigin = 'anonymous';
  preview.src = api.previewUrl(state.imageId);
  await preview.decode();
  redraw();
}

$('upload').addEventListener('click', async () => {
  const files = $<HTMLInputElement>('file').files;
  if (!files || files.length === 0) {
    showError('choose a file first');
    return;
  }
  const format = $<HTMLSelectElement>('format').value;
  const dims =
    format === 'raw'
      ? {
          width: Number($<HTMLInputElement>('raw-width').value),
          height: Number($<HTMLInputElement>('raw-height').value),
        }
      : undefined;
  try {
    const info = await api.uploadImage(await files[0].arrayBuffer(), format, dims);
    state.imageId = info.image_id;
    state.width = info.width;
    state.height = info.height;
    state.rois = [];
    state.runId = null;
    saveSession(localStorage, {
      imageId: info.image_id,
      width: info.width,
      height: info.height,
      runId: null,
    });
    compareBox.hidden = true;
    metricsBox.textContent = '';
    statusEl.textContent = 'image ready; place A and N regions';
    await loadPreview();
  } catch (err) {
    showError(`upload failed: ${asMessage(err)}`);
  }
});

$('reset').addEventListener('click', () => {
  clearSession(localStorage);
  location.reload();
});

$<HTMLSelectElement>('zoom').addEventListener('change', (e) => {
  state.zoom = Number((e.target as HTMLSelectElement).value);
  redraw();
});

for (const radio of document.querySelectorAll<HTMLInputElement>('input[name=label]')) {
  radio.addEventListener('change', () => {
    if (radio.checked) state.label = radio.value as RoiLabel;
  });
}

$<HTMLInputElement>('brightness').addEventListener('input', (e) => {
  const k = Number((e.target as HTMLInputElement).value);
  for (const el of [canvas, inputImg, outputImg]) {
    el.style.filter = `brightness(${k})`;
  }
});

// ---------------------------------------------------------------------------
// runs
// ---------------------------------------------------------------------------

function renderProgress(status: RunStatus): void {
  statusEl.textContent = statusLine(status);
  const points = sparklinePoints(status.loss_history, 160, 40);
  sparkline.innerHTML = points
    ? `<svg width="160" height="40"><polyline points="${points}" fill="none" stroke="#444" stroke-width="1.5"/></svg>`
    : '';
}

function renderResult(status: RunStatus): void {
  if (!state.runId) return;
  inputImg.src = api.previewUrl(state.imageId as string);
  outputImg.src = api.outputUrl(state.runId);
  outputImg.style.clipPath = `inset(0 ${100 - Number($<HTMLInputElement>('compare').value)}% 0 0)`;
  setAttentionStep();
  compareBox.hidden = false;
  metricsBox.textContent = '';
  if (status.metrics) {
    metricsBox.appendChild(renderMetricsTable(document, status.metrics));
  }
}

function setAttentionStep(): void {
  if (!state.runId) return;
  const choice = (
    document.querySelector<HTMLInputElement>('input[name=attention]:checked') ?? null
  )?.value;
  if (!choice || choice === 'off') {
    attentionImg.hidden = true;
    return;
  }
  attentionImg.hidden = false;
  attentionImg.src = api.attentionUrl(state.runId, choice === '1' ? 1 : 2);
}

for (const radio of document.querySelectorAll<HTMLInputElement>('input[name=attention]')) {
  radio.addEventListener('change', setAttentionStep);
}

$<HTMLInputElement>('overlay-opacity').addEventListener('input', (e) => {
  attentionImg.style.opacity = (e.target as HTMLInputElement).value;
});

$<HTMLInputElement>('compare').addEventListener('input', (e) => {
  const pct = Number((e.target as HTMLInputElement).value);
  // reveal the output from the left up to the slider position
  outputImg.style.clipPath = `inset(0 ${100 - pct}% 0 0)`;
});

async function watchRun(runId: string): Promise<void> {
  state.running = true;
  runButton.disabled = true;
  try {
    const final = await api.pollRun(runId, renderProgress);
    if (final.status === 'done') {
      renderResult(final);
    } else {
      showError(`run failed: ${final.error ?? 'unknown failure'}`);
    }
  } catch (err) {
    showError(`polling failed: ${asMessage(err)}`);
  } finally {
    state.running = false;
    runButton.disabled = false;
  }
}

runButton.addEventListener('click', async () => {
  if (!state.imageId || state.running) return;
  const overrides: Record<string, unknown> = {
    seed: Number($<HTMLInputElement>('seed').value) || 0,
    attention_enabled: $<HTMLInputElement>('attention-enabled').checked,
  };
  const profile = $<HTMLSelectElement>('profile').value;
  if (profile !== 'full') overrides.profile = profile;
  try {
    const runId = await api.startRun(state.imageId, overrides);
    state.runId = runId;
    saveSession(localStorage, {
      imageId: state.imageId,
      width: state.width,
      height: state.height,
      runId,
    });
    await watchRun(runId);
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      showError('a run is already active for this image; wait for it to finish');
    } else {
      showError(`starting run failed: ${asMessage(err)}`);
    }
  }
});

// ---------------------------------------------------------------------------
// boot: restore everything the server knows about
// ---------------------------------------------------------------------------

async function restore(): Promise<void> {
  const stored = loadSession(localStorage);
  if (!stored) return;
  state.imageId = stored.imageId;
  state.width = stored.width;
  state.height = stored.height;
  state.runId = stored.runId;
  try {
    await loadPreview();
    state.rois = (await api.getRois(stored.imageId)).rois;
    redraw();
    if (stored.runId) {
      const status = await api.getRun(stored.runId);
      renderProgress(status);
      if (status.status === 'done') {
        renderResult(status);
      } else if (status.status !== 'error') {
        await watchRun(stored.runId);
      }
    }
  } catch (err) {
    // the server no longer knows this session; start fresh
    clearSession(localStorage);
    showError(`could not restore previous session: ${asMessage(err)}`);
  }
}

void restore();
