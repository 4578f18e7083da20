/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const info_gain_grid: (a: bigint, b: number) => [number, number, number, number];
export const reference_curves: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
export const time_embedding: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
