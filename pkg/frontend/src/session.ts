import type { Roi, RoiDoc, RoiLabel, WireFloat } from './types';

/** Fixed window side: the pipeline trains on 32x32 patches. */
export const PATCH_SIZE = 32;

/**
 * Snap a click to the top-left of a 32x32 window that stays inside the
 * image.  Clicks near the right/bottom edge clamp inward, so (250, 250)
 * on a 256x256 image lands at (224, 224).  Returns null when the image
 * is too small to hold a window at all.
 */
export function snapRoi(
  x: number,
  y: number,
  imageWidth: number,
  imageHeight: number,
): { x: number; y: number } | null {
  if (imageWidth < PATCH_SIZE || imageHeight < PATCH_SIZE) return null;
  const clamp = (v: number, hi: number) => Math.min(Math.max(Math.floor(v), 0), hi);
  return {
    x: clamp(x, imageWidth - PATCH_SIZE),
    y: clamp(y, imageHeight - PATCH_SIZE),
  };
}

/** Index of the most recently placed ROI whose window contains (x, y), or -1. */
export function roiAt(rois: Roi[], x: number, y: number): number {
  for (let i = rois.length - 1; i >= 0; i--) {
    const r = rois[i];
    if (x >= r.x && x < r.x + PATCH_SIZE && y >= r.y && y < r.y + PATCH_SIZE) return i;
  }
  return -1;
}

/** The exact document shape the service stores and returns. */
export function toRoiDoc(rois: Roi[]): RoiDoc {
  return {
    patch_size: PATCH_SIZE,
    rois: rois.map((r) => ({ x: r.x, y: r.y, label: r.label })),
  };
}

/**
 * Client-side mirror of the server's annotation checks; returns a list of
 * problems (empty means valid).  Catching these before PUT keeps the
 * error banner specific.
 */
export function validateRoiDoc(doc: RoiDoc, imageWidth: number, imageHeight: number): string[] {
  const problems: string[] = [];
  if (doc.patch_size !== PATCH_SIZE) {
    problems.push(`patch_size must be ${PATCH_SIZE}, got ${doc.patch_size}`);
  }
  doc.rois.forEach((r, i) => {
    if (r.label !== 'A' && r.label !== 'N') problems.push(`roi #${i}: bad label ${r.label}`);
    if (!Number.isInteger(r.x) || !Number.isInteger(r.y)) {
      problems.push(`roi #${i}: non-integer origin (${r.x}, ${r.y})`);
    } else if (r.x < 0 || r.y < 0 || r.x + PATCH_SIZE > imageWidth || r.y + PATCH_SIZE > imageHeight) {
      problems.push(`roi #${i}: window (${r.x}, ${r.y}) leaves the ${imageWidth}x${imageHeight} image`);
    }
  });
  return problems;
}

export function countByLabel(rois: Roi[]): Record<RoiLabel, number> {
  const counts: Record<RoiLabel, number> = { A: 0, N: 0 };
  for (const r of rois) counts[r.label] += 1;
  return counts;
}

/**
 * Human form of a percent metric: explicit sign, one decimal.  null means
 * the baseline made the ratio undefined; "inf" strings are how non-finite
 * floats travel in the JSON.
 */
export function formatPct(value: WireFloat | null): string {
  if (value === null) return 'n/a';
  if (value === 'inf') return '+inf%';
  if (value === '-inf') return '-inf%';
  const sign = value >= 0 ? '+' : '';
  return `${sign}${value.toFixed(1)}%`;
}

/** Fixed-precision form for mean/std/snr table cells. */
export function formatValue(value: WireFloat): string {
  if (value === 'inf') return 'inf';
  if (value === '-inf') return '-inf';
  return value.toFixed(4);
}

/**
 * Polyline points for an SVG loss sparkline, scaled to fit width x height
 * with a small inset.  A single epoch renders as a flat line so the panel
 * never collapses.
 */
export function sparklinePoints(losses: number[], width: number, height: number): string {
  if (losses.length === 0) return '';
  const inset = 2;
  const lo = Math.min(...losses);
  const hi = Math.max(...losses);
  const span = hi - lo || 1;
  const stepX = losses.length > 1 ? (width - 2 * inset) / (losses.length - 1) : 0;
  return losses
    .map((loss, i) => {
      const x = inset + i * stepX;
      const y = inset + ((hi - loss) / span) * (height - 2 * inset);
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(' ');
}

/** What survives a page reload; everything else is refetched. */
export interface StoredSession {
  imageId: string;
  width: number;
  height: number;
  runId: string | null;
}

const STORAGE_KEY = 'osar-annotator-session';

export function saveSession(storage: Storage, session: StoredSession): void {
  storage.setItem(STORAGE_KEY, JSON.stringify(session));
}

export function loadSession(storage: Storage): StoredSession | null {
  const raw = storage.getItem(STORAGE_KEY);
  if (!raw) return null;
  try {
    const doc = JSON.parse(raw);
    if (typeof doc.imageId !== 'string') return null;
    return {
      imageId: doc.imageId,
      width: Number(doc.width),
      height: Number(doc.height),
      runId: typeof doc.runId === 'string' ? doc.runId : null,
    };
  } catch {
    return null;
  }
}

export function clearSession(storage: Storage): void {
  storage.removeItem(STORAGE_KEY);
}
