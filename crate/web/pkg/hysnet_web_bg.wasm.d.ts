/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_phantom_free: (a: number, b: number) => void;
export const __wbg_weightgenerator_free: (a: number, b: number) => void;
export const correlations: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const phantom_extent: (a: number) => number;
export const phantom_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const phantom_score: (a: number) => number;
export const phantom_slice: (a: number, b: number) => [number, number, number, number];
export const weightgenerator_generate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const weightgenerator_layer_sizes: (a: number) => [number, number];
export const weightgenerator_new: (a: number) => [number, number, number];
export const weightgenerator_predict: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
