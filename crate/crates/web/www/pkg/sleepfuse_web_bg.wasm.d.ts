/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const lr_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const masking_sample: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const signal_kinds: () => [number, number];
export const synth_preview: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
