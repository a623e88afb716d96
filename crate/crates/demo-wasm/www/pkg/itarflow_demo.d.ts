/* tslint:disable */
/* eslint-disable */

/**
 * Noisy draws at `t` denoised by the ODE and by one Tweedie step, both with
 * the exact score, against clean data.
 */
export class DenoiseReport {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Energy distances to clean data: noisy, ODE, Tweedie.
     */
    distances(): Float64Array;
    noisy_hist(bins: number): Float64Array;
    ode_hist(bins: number): Float64Array;
    tweedie_hist(bins: number): Float64Array;
}

/**
 * Small class-conditional flow fitted to the mixture a few steps at a time.
 */
export class Trainer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Model density at noise level `t` on [`grid`]: the class densities
     * weighted by the mixture weights.
     */
    density(t: number, n: number): Float64Array;
    losses(): Float64Array;
    constructor(seed: bigint, total_steps: number);
    /**
     * Histogram of `n` generated and denoised samples.
     */
    sample_hist(n: number, steps: number, bins: number, seed: bigint): Float64Array;
    /**
     * Runs up to `steps` optimizer steps and returns the mean loss over them.
     */
    step(steps: number): number;
    steps_done(): bigint;
}

export function denoise(t: number, steps: number, n: number, seed: bigint): DenoiseReport;

/**
 * `n` evenly spaced points over [`X_RANGE`].
 */
export function grid(n: number): Float64Array;

/**
 * Density of the mixture blurred to noise level `t`, on [`grid`].
 */
export function noised_density(t: number, n: number): Float64Array;

/**
 * Exact score of the noised mixture on [`grid`].
 */
export function noised_score(t: number, n: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_denoisereport_free: (a: number, b: number) => void;
    readonly __wbg_trainer_free: (a: number, b: number) => void;
    readonly denoise: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly denoisereport_distances: (a: number) => [number, number];
    readonly denoisereport_noisy_hist: (a: number, b: number) => [number, number];
    readonly denoisereport_ode_hist: (a: number, b: number) => [number, number];
    readonly denoisereport_tweedie_hist: (a: number, b: number) => [number, number];
    readonly grid: (a: number) => [number, number];
    readonly noised_density: (a: number, b: number) => [number, number];
    readonly noised_score: (a: number, b: number) => [number, number];
    readonly trainer_density: (a: number, b: number, c: number) => [number, number, number, number];
    readonly trainer_losses: (a: number) => [number, number];
    readonly trainer_new: (a: bigint, b: number) => number;
    readonly trainer_sample_hist: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly trainer_step: (a: number, b: number) => [number, number, number];
    readonly trainer_steps_done: (a: number) => bigint;
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
