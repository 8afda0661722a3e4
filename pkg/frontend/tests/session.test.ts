import { describe, expect, it } from 'vitest';

import {
  PATCH_SIZE,
  countByLabel,
  formatPct,
  formatValue,
  loadSession,
  roiAt,
  saveSession,
  snapRoi,
  sparklinePoints,
  toRoiDoc,
  validateRoiDoc,
} from '../src/session';
import type { Roi } from '../src/types';

describe('snapRoi', () => {
  it('keeps an interior click as the window origin', () => {
    expect(snapRoi(5, 5, 256, 256)).toEqual({ x: 5, y: 5 });
  });

  it('clamps a near-edge click so the window stays inside', () => {
    expect(snapRoi(250, 250, 256, 256)).toEqual({ x: 224, y: 224 });
  });

  it('clamps each axis independently', () => {
    expect(snapRoi(250, 5, 256, 256)).toEqual({ x: 224, y: 5 });
    expect(snapRoi(-3, 300, 256, 256)).toEqual({ x: 0, y: 224 });
  });

  it('floors fractional canvas coordinates', () => {
    expect(snapRoi(10.7, 99.2, 256, 256)).toEqual({ x: 10, y: 99 });
  });

  it('accepts the exact last valid origin', () => {
    expect(snapRoi(224, 224, 256, 256)).toEqual({ x: 224, y: 224 });
  });

  it('rejects images smaller than one window', () => {
    expect(snapRoi(0, 0, 31, 256)).toBeNull();
    expect(snapRoi(0, 0, 32, 32)).toEqual({ x: 0, y: 0 });
  });
});

describe('roiAt', () => {
  const rois: Roi[] = [
    { x: 0, y: 0, label: 'A' },
    { x: 16, y: 16, label: 'N' },
  ];

  it('prefers the most recently placed region on overlap', () => {
    expect(roiAt(rois, 20, 20)).toBe(1);
  });

  it('treats the window as half-open', () => {
    expect(roiAt(rois, 15, 15)).toBe(0);
    expect(roiAt(rois, 16 + PATCH_SIZE, 20)).toBe(-1);
  });

  it('misses empty space', () => {
    expect(roiAt([], 5, 5)).toBe(-1);
  });
});

describe('roi documents', () => {
  const rois: Roi[] = [
    { x: 8, y: 8, label: 'A' },
    { x: 120, y: 210, label: 'N' },
  ];

  it('emits the patch_size the service requires', () => {
    const doc = toRoiDoc(rois);
    expect(doc.patch_size).toBe(32);
    expect(doc.rois).toEqual(rois);
  });

  it('round-trips through JSON unchanged', () => {
    const doc = toRoiDoc(rois);
    expect(JSON.parse(JSON.stringify(doc))).toEqual(doc);
  });

  it('validates in-bounds documents', () => {
    expect(validateRoiDoc(toRoiDoc(rois), 256, 256)).toEqual([]);
  });

  it('flags wrong patch_size, bad labels, and out-of-bounds windows', () => {
    const doc = {
      patch_size: 16,
      rois: [
        { x: 240, y: 8, label: 'A' as const },
        { x: 8, y: 8, label: 'B' as never },
        { x: 8.5, y: 8, label: 'N' as const },
      ],
    };
    const problems = validateRoiDoc(doc, 256, 256);
    expect(problems.some((p) => p.includes('patch_size'))).toBe(true);
    expect(problems.some((p) => p.includes('leaves the'))).toBe(true);
    expect(problems.some((p) => p.includes('bad label'))).toBe(true);
    expect(problems.some((p) => p.includes('non-integer'))).toBe(true);
  });

  it('counts labels for the toolbar', () => {
    expect(countByLabel(rois)).toEqual({ A: 1, N: 1 });
  });
});

describe('formatting', () => {
  it('formats percent deltas with explicit sign and one decimal', () => {
    expect(formatPct(66.79546875402262)).toBe('+66.8%');
    expect(formatPct(-0.51)).toBe('-0.5%');
    expect(formatPct(0)).toBe('+0.0%');
  });

  it('handles wire infinities and undefined deltas', () => {
    expect(formatPct('inf')).toBe('+inf%');
    expect(formatPct('-inf')).toBe('-inf%');
    expect(formatPct(null)).toBe('n/a');
  });

  it('formats plain values at fixed precision', () => {
    expect(formatValue(0.680015)).toBe('0.6800');
    expect(formatValue('inf')).toBe('inf');
  });
});

describe('sparklinePoints', () => {
  it('returns one point per epoch, left to right', () => {
    const points = sparklinePoints([0.35, 0.31, 0.3, 0.29], 160, 40);
    expect(points.split(' ')).toHaveLength(4);
    const xs = points.split(' ').map((p) => Number(p.split(',')[0]));
    expect(xs).toEqual([...xs].sort((a, b) => a - b));
  });

  it('maps the minimum loss to the bottom of the box', () => {
    const points = sparklinePoints([1, 0], 100, 50).split(' ');
    const ys = points.map((p) => Number(p.split(',')[1]));
    expect(ys[0]).toBeLessThan(ys[1]); // higher loss drawn higher (smaller y)
  });

  it('keeps a flat series inside the box', () => {
    const points = sparklinePoints([0.5, 0.5], 100, 50);
    expect(points).not.toContain('NaN');
  });

  it('renders nothing for an empty history', () => {
    expect(sparklinePoints([], 100, 50)).toBe('');
  });
});

describe('session storage', () => {
  function memoryStorage(): Storage {
    const map = new Map<string, string>();
    return {
      getItem: (k) => map.get(k) ?? null,
      setItem: (k, v) => void map.set(k, v),
      removeItem: (k) => void map.delete(k),
      clear: () => map.clear(),
      key: (i) => [...map.keys()][i] ?? null,
      get length() {
        return map.size;
      },
    };
  }

  it('round-trips a stored session', () => {
    const storage = memoryStorage();
    saveSession(storage, { imageId: 'abc123def456', width: 256, height: 256, runId: null });
    expect(loadSession(storage)).toEqual({
      imageId: 'abc123def456',
      width: 256,
      height: 256,
      runId: null,
    });
  });

  it('returns null for garbage or missing state', () => {
    const storage = memoryStorage();
    expect(loadSession(storage)).toBeNull();
    storage.setItem('osar-annotator-session', '{not json');
    expect(loadSession(storage)).toBeNull();
  });
});
