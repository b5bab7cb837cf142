/**
 * Typed client for the flowedit HTTP API.
 *
 * The studio never computes model math; everything goes through these
 * endpoints. Base64 PNG payloads pass through untouched.
 */

export interface SolverParams {
  family: string;
  steps?: number | null;
  atol?: number | null;
  rtol?: number | null;
}

export interface ModelInfo {
  arch: { kind: string; depth?: number; prompt_length?: number; [k: string]: unknown };
  attributes: string[];
  vocabulary: string[];
  prompt_length: number;
  latent_shape: number[];
  depth?: number;
}

export interface SampleRequest {
  seed: number;
  prompt: string;
  solver?: SolverParams;
}

export interface SampleResponse {
  image: string;
  seconds: number;
}

export interface AttrWeight {
  k: string;
  w: number;
}

export interface TokenReweight {
  word: string;
  c: number;
}

export interface EditRequest {
  seed?: number | null;
  noise_id?: string | null;
  prompt: string;
  attrs: AttrWeight[];
  t_edit: number;
  solver?: SolverParams;
  reweights: TokenReweight[];
}

export interface EditResponse {
  image: string;
  relative_edit_error: number;
}

export interface TokenHeatmap {
  position: number;
  word: string;
  heatmap: string;
  grid: number[];
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const res = await fetch(`${base}${path}`, init);
  if (!res.ok) {
    const body = await res.json().catch(() => ({}));
    const detail =
      (body as { message?: string; detail?: string }).message ??
      (body as { detail?: string }).detail ??
      `HTTP ${res.status}`;
    throw new ApiError(res.status, detail);
  }
  return res.json() as Promise<T>;
}

function post<T>(base: string, path: string, payload: unknown): Promise<T> {
  return request<T>(base, path, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(payload),
  });
}

export class StudioApi {
  constructor(readonly base: string = '') {}

  getModel(): Promise<ModelInfo> {
    return request<ModelInfo>(this.base, '/model');
  }

  sample(req: SampleRequest): Promise<SampleResponse> {
    return post<SampleResponse>(this.base, '/sample', req);
  }

  invert(imageB64: string, prompt: string): Promise<{ noise_id: string }> {
    return post<{ noise_id: string }>(this.base, '/invert', { image: imageB64, prompt });
  }

  edit(req: EditRequest): Promise<EditResponse> {
    return post<EditResponse>(this.base, '/edit', req);
  }

  attention(prompt: string, block: number, step: number, seed: number): Promise<TokenHeatmap[]> {
    const params = new URLSearchParams({
      prompt,
      block: String(block),
      step: String(step),
      seed: String(seed),
    });
    return request<TokenHeatmap[]>(this.base, `/attention?${params.toString()}`);
  }
}
