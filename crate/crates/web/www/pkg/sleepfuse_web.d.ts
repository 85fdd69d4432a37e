/* tslint:disable */
/* eslint-disable */

/**
 * Learning rate at `points` evenly spaced steps in `[0, steps]`.
 */
export function lr_curve(max_lr: number, warmup_steps: number, half_life_steps: number, steps: number, points: number): Float64Array;

/**
 * Draws `draws` masks for the kinds in `available` (bits: ECG=1, PPG=2,
 * ABD=4, THX=8) with the given drop probabilities.
 */
export function masking_sample(available: number, p_ecg: number, p_ppg: number, p_abd: number, p_thx: number, draws: number, seed: number): string;

/**
 * Names of the signal kinds in bit order.
 */
export function signal_kinds(): string;

/**
 * Generates one recording and returns its whole hypnogram plus every channel
 * inside `[start_epoch, start_epoch + window_epochs)`.
 */
export function synth_preview(seed: number, duration_epochs: number, start_epoch: number, window_epochs: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly lr_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly masking_sample: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly signal_kinds: () => [number, number];
    readonly synth_preview: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
