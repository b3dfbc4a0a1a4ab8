/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_central_rgba: (a: number) => [number, number];
export const demo_epi_rgba: (a: number) => [number, number];
export const demo_mask_rgba: (a: number) => [number, number];
export const demo_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const demo_recon_rgba: (a: number) => [number, number, number, number];
export const demo_reconstruct: (a: number, b: number, c: number) => [number, number, number];
export const demo_size: (a: number) => number;
export const demo_views: (a: number) => number;
export const normgradsim_trace: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
