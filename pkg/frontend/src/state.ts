/**
 * Studio session state: slider values, solver choice, and a replayable
 * history of issued requests. Pure data + transformations, no DOM.
 */

import type { AttrWeight, EditRequest, SolverParams, TokenReweight } from './api.js';

export interface SliderLimits {
  wMin: number;
  wMax: number;
  cMin: number;
  cMax: number;
}

export const DEFAULT_LIMITS: SliderLimits = { wMin: -2, wMax: 2, cMin: 0, cMax: 5 };

export interface HistoryEntry {
  request: EditRequest;
  image: string;
  relativeError: number;
}

export interface SessionState {
  seed: number;
  noiseId: string | null;
  prompt: string;
  attrWeights: Map<string, number>;
  tEdit: number;
  solver: SolverParams;
  tokenScales: Map<string, number>;
  history: HistoryEntry[];
  limits: SliderLimits;
  advanced: boolean;
}

export function newSession(attributes: string[], limits: SliderLimits = DEFAULT_LIMITS): SessionState {
  return {
    seed: 0,
    noiseId: null,
    prompt: '',
    attrWeights: new Map(attributes.map((a) => [a, 0])),
    tEdit: 0.5,
    solver: { family: 'dopri5', atol: 1e-5, rtol: 1e-5 },
    tokenScales: new Map(),
    history: [],
    limits,
    advanced: false,
  };
}

function clamp(value: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, value));
}

export function setAttrWeight(state: SessionState, attr: string, w: number): void {
  if (!state.attrWeights.has(attr)) {
    throw new Error(`unknown attribute '${attr}'`);
  }
  state.attrWeights.set(attr, state.advanced ? w : clamp(w, state.limits.wMin, state.limits.wMax));
}

export function setTokenScale(state: SessionState, word: string, c: number): void {
  state.tokenScales.set(word, state.advanced ? c : clamp(c, state.limits.cMin, state.limits.cMax));
}

export function setTEdit(state: SessionState, t: number): void {
  state.tEdit = clamp(t, 1e-6, 1.0);
}

/** Neutral sliders (all w=0, all c=1) contribute nothing to the request. */
export function liveAttrs(state: SessionState): AttrWeight[] {
  return [...state.attrWeights.entries()]
    .filter(([, w]) => w !== 0)
    .map(([k, w]) => ({ k, w }));
}

export function liveReweights(state: SessionState): TokenReweight[] {
  return [...state.tokenScales.entries()]
    .filter(([, c]) => c !== 1)
    .map(([word, c]) => ({ word, c }));
}

export function buildEditRequest(state: SessionState): EditRequest {
  return {
    seed: state.noiseId === null ? state.seed : null,
    noise_id: state.noiseId,
    prompt: state.prompt,
    attrs: liveAttrs(state),
    t_edit: state.tEdit,
    solver: state.solver,
    reweights: liveReweights(state),
  };
}

/** True when the request would reproduce the unedited baseline exactly. */
export function isNeutral(state: SessionState): boolean {
  return liveAttrs(state).length === 0 && liveReweights(state).length === 0;
}

export function recordHistory(state: SessionState, request: EditRequest, image: string,
                              relativeError: number): void {
  state.history.push({ request: structuredCloneRequest(request), image, relativeError });
}

/** History entries replay the exact request body that produced them. */
export function replayRequest(state: SessionState, index: number): EditRequest {
  const entry = state.history[index];
  if (!entry) {
    throw new Error(`no history entry ${index}`);
  }
  return structuredCloneRequest(entry.request);
}

function structuredCloneRequest(req: EditRequest): EditRequest {
  return {
    seed: req.seed ?? null,
    noise_id: req.noise_id ?? null,
    prompt: req.prompt,
    attrs: req.attrs.map((a) => ({ ...a })),
    t_edit: req.t_edit,
    solver: req.solver ? { ...req.solver } : undefined,
    reweights: req.reweights.map((r) => ({ ...r })),
  };
}
