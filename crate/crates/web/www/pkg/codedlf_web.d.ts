/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    central_rgba(): Uint8Array;
    /**
     * Grey epipolar image at the middle spatial row: `views` rows (angular
     * `v`) by `size` columns (spatial `t`), channel mean. Line slopes encode
     * disparity.
     */
    epi_rgba(): Uint8Array;
    /**
     * Open channel of every mask pixel, colour-coded.
     */
    mask_rgba(): Uint8Array;
    /**
     * `pattern` is one of `checker`, `gradient-ramp`, `spectral-stripes`,
     * `random-smooth`; `disparity` is constant across the scene.
     */
    constructor(pattern: string, disparity: number, channels: number, seed: bigint);
    /**
     * Central view of the last reconstruction, or of the lifted
     * measurement before any reconstruction.
     */
    recon_rgba(): Uint8Array;
    /**
     * OWL-QN reconstruction of the coded measurement; returns the PSNR in
     * dB of the full light field.
     */
    reconstruct(lambda: number, max_iters: number): number;
    readonly size: number;
    readonly views: number;
}

/**
 * NormGradSim weight trajectory for one auxiliary loss whose gradient has
 * cosine `cos` with the main gradient and `norm_ratio = ‖g_aux‖/‖g_main‖`.
 * Returns `[α_0, β_0, α_1, β_1, …]` for `steps + 1` states.
 */
export function normgradsim_trace(cos: number, norm_ratio: number, alpha0: number, beta0: number, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_central_rgba: (a: number) => [number, number];
    readonly demo_epi_rgba: (a: number) => [number, number];
    readonly demo_mask_rgba: (a: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly demo_recon_rgba: (a: number) => [number, number, number, number];
    readonly demo_reconstruct: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_views: (a: number) => number;
    readonly normgradsim_trace: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
