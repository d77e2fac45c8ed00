/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_baldstepper_free: (a: number, b: number) => void;
export const baldstepper_acquisition: (a: number) => [number, number];
export const baldstepper_answer: (a: number, b: number) => [number, number, number];
export const baldstepper_history_json: (a: number) => [number, number];
export const baldstepper_mean: (a: number) => number;
export const baldstepper_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const baldstepper_next_level: (a: number) => number;
export const baldstepper_posterior_histogram: (a: number) => [number, number];
export const baldstepper_sd: (a: number) => number;
export const baldstepper_step: (a: number) => [number, number, number];
export const baldstepper_trials: (a: number) => number;
export const psychometric_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const simulate_mse: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
