//! End-to-end experiments on a synthetic world: training, registration,
//! evaluation, session streams and inference-time ablations.

use crate::cbbi::{infer, InferenceConfig};
use crate::config::CifssConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::fcp::FcpParams;
use crate::metrics::{confusion_accumulate, ConfusionMatrix, EvalReport, IGNORE};
use crate::pkl::{KernelBank, LabelMask};
use crate::registry::SessionRegistry;
use crate::synthgen::{make_cifss_stream, sample_episode, SyntheticSample, World};
use crate::training::{freeze, train_step, FrozenModel, LossReport, TrainConfig, TrainState};

/// Precision used by every experiment.
pub type Scalar = f32;

/// Fresh parameters for a world's base classes.
pub fn init_state(world: &World, cfg: &TrainConfig) -> Result<TrainState<Scalar>> {
    let c = world.spec.channels;
    let bank = KernelBank::init_base(world.spec.n_base, c, cfg.seed)?;
    let fcp = FcpParams::init(c, cfg.seed.wrapping_add(1))?;
    TrainState::new(bank, fcp)
}

/// Runs `cfg.steps` steps on base-only episodes, reporting each loss.
pub fn train_model(world: &World, cfg: &TrainConfig, mut on_step: impl FnMut(&LossReport)) -> Result<FrozenModel<Scalar>> {
    cfg.validate()?;
    let mut state = init_state(world, cfg)?;
    for step in 0..cfg.steps as u64 {
        let ep = sample_episode(world, cfg.batch, cfg.classes_per_image, cfg.seed.wrapping_mul(1 << 20) + step)?;
        let report = train_step(&mut state, &ep, cfg)?;
        on_step(&report);
    }
    Ok(freeze(&mut state, cfg.pkl))
}

/// Base session plus every novel class with supports in one session.
pub fn register_all(ds: &Dataset<Scalar>, model: &FrozenModel<Scalar>) -> Result<SessionRegistry<Scalar>> {
    let base = SessionRegistry::base(model);
    let ids: Vec<u32> = ds.supports.keys().copied().collect();
    if ids.is_empty() {
        return Ok(base);
    }
    base.extend_session(1, model, &ds.supports_for(&ids)?)
}

/// Truth with novel classes outside the registry marked [`IGNORE`].
pub fn visible_truth(truth: &LabelMask, registry: &SessionRegistry<Scalar>, world: &World) -> LabelMask {
    let known = registry.bank().class_ids();
    let labels = truth
        .labels()
        .iter()
        .map(|&l| if world.is_novel(l) && !known.contains(&l) { IGNORE } else { l })
        .collect();
    LabelMask::new(truth.dims(), labels).expect("same shape")
}

/// Confusion over an evaluation set, scored against the registered classes.
pub fn evaluate(
    world: &World,
    model: &FrozenModel<Scalar>,
    registry: &SessionRegistry<Scalar>,
    samples: &[SyntheticSample<Scalar>],
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let mut acc = ConfusionMatrix::new(world.spec.n_classes());
    for s in samples {
        let pred = infer(model, registry, &s.feat, cfg)?;
        acc = confusion_accumulate(&pred, &visible_truth(&s.labels, registry, world), acc)?;
    }
    Ok(report_for(&acc, world, registry, samples.len()))
}

pub fn report_for(acc: &ConfusionMatrix, world: &World, registry: &SessionRegistry<Scalar>, images: usize) -> EvalReport {
    let novel: Vec<u32> = registry.novel_ids().into_iter().filter(|&c| world.is_novel(c)).collect();
    EvalReport::from_confusion(acc, &world.base_ids(), &novel, images as u64)
}

/// One row of a session-stream run.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionResult {
    pub session: usize,
    pub new_classes: Vec<u32>,
    pub report: EvalReport,
    /// Base rows equal to the trained model's, bit for bit.
    pub base_rows_intact: bool,
}

/// Registers the stream's sessions one by one, evaluating after each
/// (session 0 is the base model alone).
pub fn run_cifss(
    ds: &Dataset<Scalar>,
    model: &FrozenModel<Scalar>,
    cifss: &CifssConfig,
    infer_cfg: &InferenceConfig,
) -> Result<Vec<SessionResult>> {
    let world = &ds.world;
    let stream = make_cifss_stream(world, cifss.sessions, cifss.classes_per_session)?;
    let base_rows = model.bank.base_rows();
    let mut registry = SessionRegistry::base(model);
    let mut out = Vec::with_capacity(stream.len() + 1);
    for (t, classes) in std::iter::once(Vec::new()).chain(stream).enumerate() {
        if t > 0 {
            registry = registry.extend_session(t, model, &ds.supports_for(&classes)?)?;
        }
        out.push(SessionResult {
            session: t,
            report: evaluate(world, model, &registry, &ds.eval, infer_cfg)?,
            base_rows_intact: registry.bank().base_rows() == base_rows,
            new_classes: classes,
        });
    }
    Ok(out)
}

/// Inference-time component toggles on one trained model.
pub fn ablation_variants(base: &InferenceConfig) -> Vec<(&'static str, InferenceConfig)> {
    let with = |f: &dyn Fn(&mut InferenceConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("no-pkl", with(&|c| c.use_pkl_update = false)),
        ("no-fcp", with(&|c| c.use_fcp = false)),
        ("no-cbbi", with(&|c| c.use_cbbi = false)),
        ("fixed-alr", with(&|c| c.fixed_alr = true)),
        (
            "no-cbbi-no-pkl",
            with(&|c| {
                c.use_cbbi = false;
                c.use_pkl_update = false
            }),
        ),
    ]
}

pub fn run_ablation(
    ds: &Dataset<Scalar>,
    model: &FrozenModel<Scalar>,
    infer_cfg: &InferenceConfig,
) -> Result<Vec<(&'static str, EvalReport)>> {
    let registry = register_all(ds, model)?;
    ablation_variants(infer_cfg)
        .into_iter()
        .map(|(tag, cfg)| Ok((tag, evaluate(&ds.world, model, &registry, &ds.eval, &cfg)?)))
        .collect()
}
