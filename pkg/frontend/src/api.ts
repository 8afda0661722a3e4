import type { RoiDoc, RunStatus, UploadResponse } from './types';

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

async function errorDetail(res: Response): Promise<string> {
  try {
    const body = await res.json();
    if (body && typeof body.detail === 'string') return body.detail;
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `${res.status} ${res.statusText}`;
}

async function expectJson<T>(res: Response): Promise<T> {
  if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
  return (await res.json()) as T;
}

/** Thin typed client for the denoising service; pure fetch, no state. */
export class ApiClient {
  constructor(readonly base: string) {}

  async uploadImage(
    body: BodyInit,
    format: string,
    dims?: { width: number; height: number },
  ): Promise<UploadResponse> {
    const params = new URLSearchParams({ format });
    if (dims) {
      params.set('width', String(dims.width));
      params.set('height', String(dims.height));
    }
    const res = await fetch(`${this.base}/api/images?${params}`, {
      method: 'POST',
      body,
      headers: { 'content-type': 'application/octet-stream' },
    });
    return expectJson<UploadResponse>(res);
  }

  previewUrl(imageId: string, scale = 1): string {
    return `${this.base}/api/images/${imageId}/pixels?scale=${scale}`;
  }

  async putRois(imageId: string, doc: RoiDoc): Promise<void> {
    const res = await fetch(`${this.base}/api/images/${imageId}/rois`, {
      method: 'PUT',
      body: JSON.stringify(doc),
      headers: { 'content-type': 'application/json' },
    });
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
  }

  async getRois(imageId: string): Promise<RoiDoc> {
    return expectJson<RoiDoc>(await fetch(`${this.base}/api/images/${imageId}/rois`));
  }

  async startRun(imageId: string, overrides: Record<string, unknown> = {}): Promise<string> {
    const res = await fetch(`${this.base}/api/images/${imageId}/runs`, {
      method: 'POST',
      body: JSON.stringify(overrides),
      headers: { 'content-type': 'application/json' },
    });
    const body = await expectJson<{ run_id: string }>(res);
    return body.run_id;
  }

  async getRun(runId: string): Promise<RunStatus> {
    return expectJson<RunStatus>(await fetch(`${this.base}/api/runs/${runId}`));
  }

  outputUrl(runId: string): string {
    return `${this.base}/api/runs/${runId}/output.png`;
  }

  attentionUrl(runId: string, step: 1 | 2): string {
    return `${this.base}/api/runs/${runId}/attention/${step}.png`;
  }

  /**
   * Poll a run until it reaches a terminal state (done / error).  Each
   * intermediate status is passed to onUpdate so the caller can render
   * stage and loss progress.
   */
  async pollRun(
    runId: string,
    onUpdate: (status: RunStatus) => void,
    intervalMs = 1500,
  ): Promise<RunStatus> {
    for (;;) {
      const status = await this.getRun(runId);
      onUpdate(status);
      if (status.status === 'done' || status.status === 'error') return status;
      await new Promise((tick) => setTimeout(tick, intervalMs));
    }
  }
}
