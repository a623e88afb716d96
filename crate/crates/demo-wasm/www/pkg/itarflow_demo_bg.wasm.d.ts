/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_denoisereport_free: (a: number, b: number) => void;
export const __wbg_trainer_free: (a: number, b: number) => void;
export const denoise: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const denoisereport_distances: (a: number) => [number, number];
export const denoisereport_noisy_hist: (a: number, b: number) => [number, number];
export const denoisereport_ode_hist: (a: number, b: number) => [number, number];
export const denoisereport_tweedie_hist: (a: number, b: number) => [number, number];
export const grid: (a: number) => [number, number];
export const noised_density: (a: number, b: number) => [number, number];
export const noised_score: (a: number, b: number) => [number, number];
export const trainer_density: (a: number, b: number, c: number) => [number, number, number, number];
export const trainer_losses: (a: number) => [number, number];
export const trainer_new: (a: bigint, b: number) => number;
export const trainer_sample_hist: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const trainer_step: (a: number, b: number) => [number, number, number];
export const trainer_steps_done: (a: number) => bigint;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
