/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const run_primal_dual: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const saddle_point: (a: number, b: number, c: number) => [number, number, number, number];
export const two_bus: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
