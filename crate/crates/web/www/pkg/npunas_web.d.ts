/* tslint:disable */
/* eslint-disable */

/**
 * Analytical and simulated latency of one block, with the analytical
 * compute/memory split.
 */
export function block_latency(height: number, in_channels: number, out_channels: number, stride: number, config_id: string): string;

/**
 * Scales a random default-space architecture and reports both shapes.
 */
export function scale_random(seed: bigint, depth_width_coef: number, resolution_coef: number, target_ms: number): string;

/**
 * A {3, 5, 7} × {0, 2} superkernel on one input channel. Each threshold is
 * given as a fraction of its shell's squared norm, so 1.0 sits on the
 * boundary; the reply holds the selected choice and the masked weights.
 */
export function superkernel_view(seed: bigint, k5_fraction: number, k7_fraction: number, expansion_fraction: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly block_latency: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly scale_random: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
    readonly superkernel_view: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
