//! WebAssembly bindings for the demo page: build a synthetic world, train
//! the head on it in the browser, then segment evaluation images with the
//! inference toggles exposed as controls.

use gfss_core::cbbi::{infer_trace, InferenceConfig};
use gfss_core::config::DataConfig;
use gfss_core::dataset::Dataset;
use gfss_core::metrics::{confusion_accumulate, ConfusionMatrix, EvalReport};
use gfss_core::pipeline::{evaluate, init_state, register_all, visible_truth, Scalar};
use gfss_core::pkl::LabelMask;
use gfss_core::registry::SessionRegistry;
use gfss_core::synthgen::{make_world, sample_episode, Layout, WorldSpec};
use gfss_core::training::{freeze, train_step, FrozenModel, TrainConfig, TrainState};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 12] = [
    [24, 24, 32],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

/// RGB colour of a class id; the same table the page uses for its legend.
#[wasm_bindgen]
pub fn class_color(class_id: u32) -> Vec<u8> {
    PALETTE[class_id as usize % PALETTE.len()].to_vec()
}

fn rgba(labels: &[u32]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = PALETTE[l as usize % PALETTE.len()];
            [r, g, b, 255]
        })
        .collect()
}

fn err(e: gfss_core::Error) -> String {
    e.to_string()
}

/// Inference controls as plain arguments so the page needs no glue types.
fn infer_config(bias: f64, use_pkl: bool, use_fcp: bool, use_cbbi: bool, novel_only: bool) -> InferenceConfig {
    InferenceConfig {
        bias_b: bias,
        use_pkl_update: use_pkl,
        use_fcp,
        use_cbbi,
        novel_only_bias: novel_only,
        ..InferenceConfig::default()
    }
}

#[wasm_bindgen]
pub struct Demo {
    ds: Dataset<Scalar>,
    train: TrainConfig,
    state: TrainState<Scalar>,
    model: FrozenModel<Scalar>,
    registry: SessionRegistry<Scalar>,
    image: usize,
    fg: Vec<u8>,
}

#[wasm_bindgen]
impl Demo {
    /// A 32×32 world with 6 base and 2 novel classes, untrained.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise_sigma: f64, blobs: bool) -> Result<Demo, String> {
        let spec = WorldSpec {
            seed: seed as u64,
            noise_sigma,
            layout: if blobs { Layout::Blobs } else { Layout::Blocks },
            ..WorldSpec::default()
        };
        let world = make_world(&spec).map_err(err)?;
        let ds = Dataset::generate(&world, &DataConfig { eval_images: 8, ..DataConfig::default() }).map_err(err)?;
        let train = TrainConfig {
            seed: seed as u64,
            batch: 2,
            lr: 5e-2,
            ..TrainConfig::default()
        };
        let state = init_state(&world, &train).map_err(err)?;
        let model = freeze(&mut state.clone(), train.pkl);
        let registry = register_all(&ds, &model).map_err(err)?;
        Ok(Demo { ds, train, state, model, registry, image: 0, fg: Vec::new() })
    }

    pub fn width(&self) -> usize {
        self.ds.world.spec.width
    }

    pub fn height(&self) -> usize {
        self.ds.world.spec.height
    }

    pub fn images(&self) -> usize {
        self.ds.eval.len()
    }

    pub fn classes(&self) -> usize {
        self.ds.world.spec.n_classes()
    }

    pub fn base_classes(&self) -> usize {
        self.ds.world.spec.n_base
    }

    pub fn steps_trained(&self) -> u64 {
        self.state.step
    }

    /// Runs `steps` more training steps and re-registers the novel classes;
    /// returns the last total loss.
    pub fn train(&mut self, steps: u32) -> Result<f64, String> {
        let mut last = f64::NAN;
        for _ in 0..steps {
            let counter = self.train.seed.wrapping_mul(1 << 20) + self.state.step;
            let ep = sample_episode(&self.ds.world, self.train.batch, self.train.classes_per_image, counter).map_err(err)?;
            last = train_step(&mut self.state, &ep, &self.train).map_err(err)?.total;
        }
        self.model = freeze(&mut self.state.clone(), self.train.pkl);
        self.registry = register_all(&self.ds, &self.model).map_err(err)?;
        Ok(last)
    }

    pub fn select(&mut self, image: usize) {
        self.image = image.min(self.ds.eval.len() - 1);
        self.fg.clear();
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        rgba(self.ds.eval[self.image].labels.labels())
    }

    /// Prediction for the selected image as RGBA; also refreshes
    /// [`Demo::fg_rgba`].
    pub fn segment(&mut self, bias: f64, use_pkl: bool, use_fcp: bool, use_cbbi: bool, novel_only: bool) -> Result<Vec<u8>, String> {
        let cfg = infer_config(bias, use_pkl, use_fcp, use_cbbi, novel_only);
        let sample = &self.ds.eval[self.image];
        let trace = infer_trace(&self.model, &self.registry, &sample.feat, &cfg).map_err(err)?;
        self.fg = trace
            .fg_prob
            .data()
            .iter()
            .zip(trace.fg_mask.data())
            .flat_map(|(&p, &m)| {
                let v = (p.clamp(0.0, 1.0) * 255.0) as u8;
                if m > 0.0 { [v, v, 96, 255] } else { [v / 2, v / 2, v / 2, 255] }
            })
            .collect();
        Ok(rgba(trace.labels.labels()))
    }

    /// Foreground probability of the last [`Demo::segment`] call; pixels
    /// inside the thresholded mask are tinted.
    pub fn fg_rgba(&self) -> Vec<u8> {
        self.fg.clone()
    }

    /// `key = value` report for the selected image.
    pub fn image_report(&self, bias: f64, use_pkl: bool, use_fcp: bool, use_cbbi: bool, novel_only: bool) -> Result<String, String> {
        let cfg = infer_config(bias, use_pkl, use_fcp, use_cbbi, novel_only);
        let sample = &self.ds.eval[self.image];
        let pred: LabelMask = gfss_core::cbbi::infer(&self.model, &self.registry, &sample.feat, &cfg).map_err(err)?;
        let truth = visible_truth(&sample.labels, &self.registry, &self.ds.world);
        let acc = confusion_accumulate(&pred, &truth, ConfusionMatrix::new(self.classes())).map_err(err)?;
        let r = EvalReport::from_confusion(&acc, &self.ds.world.base_ids(), &self.ds.world.novel_ids(), 1);
        Ok(r.to_text())
    }

    /// The same report over every evaluation image.
    pub fn dataset_report(&self, bias: f64, use_pkl: bool, use_fcp: bool, use_cbbi: bool, novel_only: bool) -> Result<String, String> {
        let cfg = infer_config(bias, use_pkl, use_fcp, use_cbbi, novel_only);
        let r = evaluate(&self.ds.world, &self.model, &self.registry, &self.ds.eval, &cfg).map_err(err)?;
        Ok(r.to_text())
    }
}
