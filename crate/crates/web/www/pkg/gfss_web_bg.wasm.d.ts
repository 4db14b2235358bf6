/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const class_color: (a: number) => [number, number];
export const demo_base_classes: (a: number) => number;
export const demo_classes: (a: number) => number;
export const demo_dataset_report: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const demo_fg_rgba: (a: number) => [number, number];
export const demo_height: (a: number) => number;
export const demo_image_report: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const demo_images: (a: number) => number;
export const demo_new: (a: number, b: number, c: number) => [number, number, number];
export const demo_segment: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const demo_select: (a: number, b: number) => void;
export const demo_steps_trained: (a: number) => bigint;
export const demo_train: (a: number, b: number) => [number, number, number];
export const demo_truth_rgba: (a: number) => [number, number];
export const demo_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
