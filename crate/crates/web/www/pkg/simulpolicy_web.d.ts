/* tslint:disable */
/* eslint-disable */

/**
 * Exact information gain over the frame grid for the first utterance drawn
 * with `seed`, as JSON.
 */
export function info_gain_grid(seed: bigint, ambiguity_prob: number): string;

/**
 * Latency-quality points of the calibrated-gain threshold policy and of
 * wait-k over `count` utterances, as JSON. Wait-k points carry `k` in the
 * `alpha` field.
 */
export function reference_curves(seed: bigint, count: number, ambiguity_prob: number, chunk_ms: number): string;

export function time_embedding(t_audio: number, dim: number, base: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly info_gain_grid: (a: bigint, b: number) => [number, number, number, number];
    readonly reference_curves: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
    readonly time_embedding: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
