/* tslint:disable */
/* eslint-disable */

/**
 * JSON `{d_an: [...], curves: [{label, alpha, values}]}`.
 */
export function loss_curves(d_ap: number, margin: number, d_an_max: number, points: number): string;

/**
 * JSON `[{rho, x, y}]`.
 */
export function tsne_clusters(per_level: number, spread: number, perplexity: number, iterations: number, seed: number): string;

/**
 * Seeds are `u32` here so JavaScript can pass plain numbers.
 */
export function volume_slice(level: number, signal: number, noise: number, seed: number, z: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly loss_curves: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly tsne_clusters: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly volume_slice: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
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
