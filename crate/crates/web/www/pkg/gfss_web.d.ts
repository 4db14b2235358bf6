/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    base_classes(): number;
    classes(): number;
    /**
     * The same report over every evaluation image.
     */
    dataset_report(bias: number, use_pkl: boolean, use_fcp: boolean, use_cbbi: boolean, novel_only: boolean): string;
    /**
     * Foreground probability of the last [`Demo::segment`] call; pixels
     * inside the thresholded mask are tinted.
     */
    fg_rgba(): Uint8Array;
    height(): number;
    /**
     * `key = value` report for the selected image.
     */
    image_report(bias: number, use_pkl: boolean, use_fcp: boolean, use_cbbi: boolean, novel_only: boolean): string;
    images(): number;
    /**
     * A 32×32 world with 6 base and 2 novel classes, untrained.
     */
    constructor(seed: number, noise_sigma: number, blobs: boolean);
    /**
     * Prediction for the selected image as RGBA; also refreshes
     * [`Demo::fg_rgba`].
     */
    segment(bias: number, use_pkl: boolean, use_fcp: boolean, use_cbbi: boolean, novel_only: boolean): Uint8Array;
    select(image: number): void;
    steps_trained(): bigint;
    /**
     * Runs `steps` more training steps and re-registers the novel classes;
     * returns the last total loss.
     */
    train(steps: number): number;
    truth_rgba(): Uint8Array;
    width(): number;
}

/**
 * RGB colour of a class id; the same table the page uses for its legend.
 */
export function class_color(class_id: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly class_color: (a: number) => [number, number];
    readonly demo_base_classes: (a: number) => number;
    readonly demo_classes: (a: number) => number;
    readonly demo_dataset_report: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_fg_rgba: (a: number) => [number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_image_report: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_images: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_segment: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_select: (a: number, b: number) => void;
    readonly demo_steps_trained: (a: number) => bigint;
    readonly demo_train: (a: number, b: number) => [number, number, number];
    readonly demo_truth_rgba: (a: number) => [number, number];
    readonly demo_width: (a: number) => number;
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
