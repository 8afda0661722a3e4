/** Wire types mirroring the denoising service's JSON. */

export type RoiLabel = 'A' | 'N';

export interface Roi {
  x: number;
  y: number;
  label: RoiLabel;
}

/** The annotation document stored under PUT /api/images/{id}/rois. */
export interface RoiDoc {
  patch_size: number;
  rois: Roi[];
}

export interface UploadResponse {
  image_id: string;
  width: number;
  height: number;
}

/** Non-finite floats travel as "inf" / "-inf" strings in strict JSON. */
export type WireFloat = number | 'inf' | '-inf';

export interface MetricRegion {
  x: number;
  y: number;
  width: number;
  height: number;
}

export interface MetricReport {
  region: MetricRegion;
  mean: number;
  std: number;
  snr: WireFloat;
  delta_snr_pct: WireFloat | null;
  delta_mean_pct: WireFloat | null;
}

export type RunState = 'queued' | 'running' | 'done' | 'error';

export interface RunStatus {
  status: RunState;
  stage: string | null;
  loss_history: number[];
  metrics: MetricReport[] | null;
  error: string | null;
}
