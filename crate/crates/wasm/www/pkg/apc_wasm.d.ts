/* tslint:disable */
/* eslint-disable */

/**
 * One observer probed by BALD, trial by trial.
 */
export class BaldStepper {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Acquisition score at every level.
     */
    acquisition(): Float64Array;
    /**
     * Record an answer at the next level. Returns the level used.
     */
    answer(prefers_reference: boolean): number;
    /**
     * JSON array of `[level, prefers_reference]` pairs.
     */
    history_json(): string;
    mean(): number;
    constructor(true_q: number, slope: number, lapse: number, seed: bigint);
    /**
     * Level BALD would show next.
     */
    next_level(): number;
    /**
     * Posterior mass summed into one bin per level.
     */
    posterior_histogram(): Float64Array;
    sd(): number;
    /**
     * Let the simulated observer answer. Returns the level used.
     */
    step(): number;
    trials(): number;
}

/**
 * Probability of preferring the reference at levels `1..=n_levels`.
 */
export function psychometric_curve(q: number, slope: number, lapse: number, n_levels: number): Float64Array;

/**
 * MSE-versus-trials curves for all three policies as JSON
 * `{policy: [mse at trial 1, 2, ...]}`.
 */
export function simulate_mse(n_observers: number, trials: number, seed: bigint, fixed_q?: number | null): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_baldstepper_free: (a: number, b: number) => void;
    readonly baldstepper_acquisition: (a: number) => [number, number];
    readonly baldstepper_answer: (a: number, b: number) => [number, number, number];
    readonly baldstepper_history_json: (a: number) => [number, number];
    readonly baldstepper_mean: (a: number) => number;
    readonly baldstepper_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly baldstepper_next_level: (a: number) => number;
    readonly baldstepper_posterior_histogram: (a: number) => [number, number];
    readonly baldstepper_sd: (a: number) => number;
    readonly baldstepper_step: (a: number) => [number, number, number];
    readonly baldstepper_trials: (a: number) => number;
    readonly psychometric_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly simulate_mse: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
