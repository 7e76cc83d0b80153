/* tslint:disable */
/* eslint-disable */

/**
 * A generated phantom: normalized voxels (x fastest) and its score.
 */
export class Phantom {
    free(): void;
    [Symbol.dispose](): void;
    constructor(_class: string, sigma: number, seed: number, extent: number);
    /**
     * Axial slice `z` as `extent * extent` values in `[0, 1]`, row `y`.
     */
    slice(z: number): Float32Array;
    readonly extent: number;
    /**
     * Signal amplitude over noise level.
     */
    readonly score: number;
}

/**
 * Untrained desk-scale hyper-network, seeded, used to show how generated
 * predictor weights change with image content.
 */
export class WeightGenerator {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Generated predictor parameters for the center patch of a 32^3
     * phantom, layers concatenated.
     */
    generate(_class: string, sigma: number, seed: number): Float64Array;
    /**
     * Parameter count of each generated predictor layer.
     */
    layer_sizes(): Uint32Array;
    constructor(init_seed: number);
    /**
     * Score the untrained model assigns to the same patch.
     */
    predict(_class: string, sigma: number, seed: number): number;
}

/**
 * `[srocc, plcc]` of two equally long score lists.
 */
export function correlations(predicted: Float64Array, reference: Float64Array): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_phantom_free: (a: number, b: number) => void;
    readonly __wbg_weightgenerator_free: (a: number, b: number) => void;
    readonly correlations: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly phantom_extent: (a: number) => number;
    readonly phantom_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly phantom_score: (a: number) => number;
    readonly phantom_slice: (a: number, b: number) => [number, number, number, number];
    readonly weightgenerator_generate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly weightgenerator_layer_sizes: (a: number) => [number, number];
    readonly weightgenerator_new: (a: number) => [number, number, number];
    readonly weightgenerator_predict: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
