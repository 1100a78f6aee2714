/* tslint:disable */
/* eslint-disable */

/**
 * Runs the loop from `x = −3, λ = 0` with the output measured under
 * Gaussian noise. Returns `[x₀, λ₀, x₁, λ₁, …]` after each step.
 */
export function run_primal_dual(alpha: number, epsilon: number, sigma: number, upper: number, steps: number, seed: bigint): Float64Array;

/**
 * `[x*, λ*]` of the regularized scalar problem.
 */
export function saddle_point(upper: number, p: number, d: number): Float64Array;

/**
 * `[|V|, angle (rad), P0, Q0]` at the end of one line feeding a load,
 * all in p.u. with a 1 p.u. source.
 */
export function two_bus(r: number, x: number, p_load: number, q_load: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly run_primal_dual: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly saddle_point: (a: number, b: number, c: number) => [number, number, number, number];
    readonly two_bus: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
