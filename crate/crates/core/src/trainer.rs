//! Three-phase training: matching pretraining, separate captioner and GAN
//! pretraining against frozen encoders, then joint training on the weighted
//! multimodal objective.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta, LoadReport};
use crate::config::{LossWeights, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{EncodedImage, Features, Trainability};
use crate::itm::TeacherBatch;
use crate::model::{scope, Model, CAP, DISC, GEN, IMAGE, TEXT};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::text::{EncodedText, TokenBatch, UNK};
use crate::tim::{discriminator_loss, downsample_to, generator_loss, sample_noise, tim_total_loss};
use crate::vta::{matching_loss, Gammas};

pub const STAGE_VTA: &str = "vta";
pub const STAGE_CAPTIONER: &str = "captioner";
pub const STAGE_GAN: &str = "gan";
pub const STAGE_JOINT: &str = "joint";

/// Rows per chunk when running encoders outside training.
const CHUNK: usize = 64;

/// Joint-phase variants: the full model and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Matching loss only, backbone frozen.
    VtaFrozen,
    /// Matching loss only, backbone trainable as in the full model.
    VtaTrainable,
    /// Captioner branch without the generator.
    Img2TxtOnly,
    /// Generator branch without the captioner.
    Txt2ImgOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::VtaFrozen,
        Ablation::VtaTrainable,
        Ablation::Img2TxtOnly,
        Ablation::Txt2ImgOnly,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::VtaFrozen => "vta-frozen",
            Ablation::VtaTrainable => "vta-trainable",
            Ablation::Img2TxtOnly => "img2txt-only",
            Ablation::Txt2ImgOnly => "txt2img-only",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Txt2ImgOnly)
    }

    pub fn uses_captioner(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Img2TxtOnly)
    }

    /// Zeroes the weights of removed branches.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        let mut w = base;
        if !self.uses_generator() {
            w.fake_image = 0.0;
            w.generator = 0.0;
        }
        if !self.uses_captioner() {
            w.fake_text = 0.0;
            w.captioning = 0.0;
        }
        w
    }

    pub fn trainability(self, frozen_blocks: usize) -> Trainability {
        match self {
            Ablation::VtaFrozen => Trainability::FrozenBackbone,
            _ => Trainability::FirstKFrozen(frozen_blocks),
        }
    }

    /// Stages that must be complete before this variant's joint phase.
    pub fn prerequisites(self) -> Vec<&'static str> {
        let mut v = vec![STAGE_VTA];
        if self.uses_captioner() {
            v.push(STAGE_CAPTIONER);
        }
        if self.uses_generator() {
            v.push(STAGE_GAN);
        }
        v
    }
}

/// Budget and trainability of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePlan {
    pub phase: u8,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub image: Trainability,
    /// Modules receiving updates.
    pub modules: Vec<&'static str>,
    pub weights: LossWeights,
    pub fake_grad: bool,
    pub max_steps: usize,
}

impl PhasePlan {
    pub fn phase1(cfg: &RunConfig) -> Self {
        PhasePlan {
            phase: 1,
            epochs: cfg.phase1_epochs,
            batch: cfg.phase1_batch,
            lr: cfg.phase1_lr,
            disc_lr: 0.0,
            image: Trainability::FirstKFrozen(cfg.phase1_frozen_blocks),
            modules: vec![TEXT, IMAGE],
            weights: LossWeights {
                matching: 1.0,
                fake_image: 0.0,
                fake_text: 0.0,
                generator: 0.0,
                captioning: 0.0,
            },
            fake_grad: false,
            max_steps: cfg.max_steps,
        }
    }

    pub fn phase3(cfg: &RunConfig, ablation: Ablation) -> Self {
        let mut modules = vec![TEXT, IMAGE];
        if ablation.uses_generator() {
            modules.push(GEN);
        }
        if ablation.uses_captioner() {
            modules.push(CAP);
        }
        PhasePlan {
            phase: 3,
            epochs: cfg.phase3_epochs,
            batch: cfg.phase3_batch,
            lr: cfg.phase3_lr,
            disc_lr: cfg.phase3_d_lr,
            image: ablation.trainability(cfg.phase3_frozen_blocks),
            modules,
            weights: ablation.weights(cfg.weights),
            fake_grad: cfg.phase3_fake_grad,
            max_steps: cfg.max_steps,
        }
    }
}

/// Joint-phase plan and weights for a named variant.
pub fn ablation_profile(name: &str, cfg: &RunConfig) -> Result<(PhasePlan, LossWeights)> {
    let plan = PhasePlan::phase3(cfg, Ablation::parse(name)?);
    let w = plan.weights;
    Ok((plan, w))
}

/// The weight rows of the published comparison table, as
/// `(generator, captioning, fake_text, fake_image, matching)`.
pub const TABLE_WEIGHTS: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 1.0],
    [1.0, 1.0, 1.0, 1.0, 1.0],
    [0.1, 0.1, 1.0, 1.0, 1.0],
    [0.01, 0.1, 1.0, 1.0, 10.0],
    [0.01, 0.1, 1.0, 50.0, 1.0],
    [0.01, 0.1, 50.0, 1.0, 1.0],
];

pub fn table_weights(row: usize) -> Result<LossWeights> {
    let r = TABLE_WEIGHTS
        .get(row)
        .ok_or_else(|| Error::Config(format!("weight table has no row {row}")))?;
    Ok(LossWeights {
        generator: r[0],
        captioning: r[1],
        fake_text: r[2],
        fake_image: r[3],
        matching: r[4],
    })
}

/// `(L_m^I, L_m^T)`: matching on generated images with real texts, and on
/// real images with generated texts.
pub fn assist_losses(
    g: &mut Graph,
    real_image: &EncodedImage,
    real_text: &EncodedText,
    fake_image: &EncodedImage,
    fake_text: &EncodedText,
    gammas: Gammas,
) -> Result<(Var, Var)> {
    let li = matching_loss(g, fake_image, real_text, gammas)?.total;
    let lt = matching_loss(g, real_image, fake_text, gammas)?.total;
    Ok((li, lt))
}

/// Loss components of one joint step; absent terms contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub matching: Var,
    pub fake_image: Option<Var>,
    pub fake_text: Option<Var>,
    pub generator: Option<Var>,
    pub captioning: Option<Var>,
}

impl LossParts {
    /// `[matching, fake_image, fake_text, generator, captioning]`, 0 when absent.
    pub fn values(&self, g: &Graph) -> [f64; 5] {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar_value(x));
        [
            g.scalar_value(self.matching),
            v(self.fake_image),
            v(self.fake_text),
            v(self.generator),
            v(self.captioning),
        ]
    }
}

/// `sum_i lambda_i L_i` over the present components.
pub fn multimodal_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        (Some(parts.matching), w.matching),
        (parts.fake_image, w.fake_image),
        (parts.fake_text, w.fake_text),
        (parts.generator, w.generator),
        (parts.captioning, w.captioning),
    ];
    let mut total = None;
    for (v, lambda) in terms {
        if let Some(v) = v {
            let t = g.scale(v, lambda);
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
    }
    Ok(total.expect("matching is always present"))
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub phase: u8,
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    /// `[matching, fake_image, fake_text, generator, captioning]`
    pub parts: [f64; 5],
    pub discriminator: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<StepLog>,
}

impl LossLog {
    pub const HEADER: &'static str =
        "phase,stage,epoch,step,total,matching,fake_image,fake_text,generator,captioning,discriminator";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{},{}", r.phase, r.stage, r.epoch, r.step, r.total);
            for p in r.parts {
                let _ = write!(s, ",{p}");
            }
            let _ = writeln!(s, ",{}", r.discriminator);
        }
        s
    }

    pub fn stage(&self, stage: &str) -> Vec<&StepLog> {
        self.rows.iter().filter(|r| r.stage == stage).collect()
    }
}

/// Matches a generated batch to the encoder's input side by doubling or halving.
pub fn fit_to_size(g: &mut Graph, images: Var, size: usize) -> Result<Var> {
    let mut x = images;
    while g.shape(x)[2] < size {
        x = g.upsample2(x)?;
    }
    if g.shape(x)[2] > size {
        x = downsample_to(g, x, size)?;
    }
    if g.shape(x)[2] != size {
        return Err(Error::Config(format!(
            "generated side {} cannot be resized to {size} by factors of two",
            g.shape(images)[2]
        )));
    }
    Ok(x)
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub data: &'d Dataset,
    pub model: Model,
    pub stages: Vec<String>,
    pub log: LossLog,
    steps: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: RunConfig, data: &'d Dataset) -> Result<Self> {
        if cfg.image_size != data.side {
            return Err(Error::Config(format!(
                "configured image size {} but the dataset holds {}px images",
                cfg.image_size, data.side
            )));
        }
        let model = Model::new(&cfg, data.vocab.len())?;
        Ok(Trainer {
            cfg,
            data,
            model,
            stages: Vec::new(),
            log: LossLog::default(),
            steps: 0,
        })
    }

    /// Rebuilds a trainer and restores a checkpoint's parameters into it.
    pub fn restore(cfg: RunConfig, data: &'d Dataset, ck: &Checkpoint) -> Result<(Self, LoadReport)> {
        let mut t = Trainer::new(cfg, data)?;
        let report = ck.apply(&mut t.model.store)?;
        t.stages = ck.meta.stages.clone();
        t.steps = ck.meta.step as usize;
        Ok((t, report))
    }

    /// Modules trained by the completed stages.
    pub fn trained_modules(&self) -> Vec<&'static str> {
        let mut m = Vec::new();
        for s in &self.stages {
            let add: &[&'static str] = match s.as_str() {
                STAGE_VTA => &[TEXT, IMAGE],
                STAGE_CAPTIONER => &[CAP],
                STAGE_GAN => &[GEN, DISC],
                _ => &[],
            };
            for a in add {
                if !m.contains(a) {
                    m.push(*a);
                }
            }
        }
        m
    }

    pub fn checkpoint(&self, phase: u8) -> Checkpoint {
        let prefixes: Vec<String> = self.trained_modules().iter().map(|m| scope(m)).collect();
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        Checkpoint::from_store(
            &self.model.store,
            &refs,
            CheckpointMeta {
                phase,
                step: self.steps as u64,
                seed: self.cfg.seed,
                config_hash: self.cfg.hash(),
                stages: self.stages.clone(),
            },
        )
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    fn require(&self, stages: &[&str], what: &str) -> Result<()> {
        for s in stages {
            if !self.has_stage(s) {
                return Err(Error::Orchestration(format!("{what} needs a completed {s} stage")));
            }
        }
        Ok(())
    }

    fn mark(&mut self, stage: &str) {
        if !self.has_stage(stage) {
            self.stages.push(stage.to_string());
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn ids(&self, modules: &[&str]) -> Vec<ParamId> {
        modules.iter().flat_map(|m| self.model.store.ids_with_prefix(&scope(m))).collect()
    }

    fn budget_left(&self, phase_steps: usize, max: usize) -> bool {
        max == 0 || phase_steps < max
    }

    /// Caption ids for each item, one randomly chosen caption per item.
    fn captions<R: Rng>(&self, items: &[usize], rng: &mut R) -> Vec<Vec<usize>> {
        items
            .iter()
            .map(|&i| {
                let c = rng.random_range(0..self.data.records[i].captions.len());
                self.data.caption_ids(i, c, self.cfg.n_max)
            })
            .collect()
    }

    /// Backbone activations of `items` through the first `upto` blocks.
    pub fn features(&self, items: &[usize], upto: usize) -> Result<Features> {
        let parts = items
            .chunks(CHUNK)
            .map(|c| self.model.image.precompute(&self.model.store, &self.data.pixel_batch(c), upto))
            .collect::<Result<Vec<_>>>()?;
        Features::concat(&parts)
    }

    /// Runs an epoch loop, calling `step` on each shuffled batch of
    /// training positions. Batches smaller than two are skipped.
    fn epochs<F>(&mut self, epochs: usize, batch: usize, max_steps: usize, rng: &mut ChaCha8Rng, mut step: F) -> Result<usize>
    where
        F: FnMut(&mut Self, usize, &[usize], &mut ChaCha8Rng) -> Result<()>,
    {
        let n = self.data.split(Split::Train).len();
        let mut done = 0;
        'outer: for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                if chunk.len() < 2 {
                    continue;
                }
                if !self.budget_left(done, max_steps) {
                    break 'outer;
                }
                step(self, epoch, chunk, rng)?;
                done += 1;
                self.steps += 1;
            }
        }
        Ok(done)
    }

    /// Phase 1: text encoder and image encoder on the matching loss, with the
    /// leading `phase1.frozen_blocks` conv blocks frozen.
    pub fn run_phase1(&mut self) -> Result<()> {
        let plan = PhasePlan::phase1(&self.cfg);
        self.model.train_only(&plan.modules);
        self.model.image.set_trainability(&mut self.model.store, plan.image)?;
        let train = self.data.split(Split::Train);
        let frozen = self.model.image.frozen_prefix(&self.model.store);
        let feats = self.features(&train, frozen)?;
        let mut opt = Adam::new(
            AdamConfig {
                lr: plan.lr,
                ..AdamConfig::default()
            },
            self.ids(&plan.modules),
        );
        let mut rng = self.rng(1);
        let gammas = self.cfg.gammas;
        let n_max = self.cfg.n_max;
        self.epochs(plan.epochs, plan.batch, plan.max_steps, &mut rng, |t, epoch, chunk, rng| {
            let items: Vec<usize> = chunk.iter().map(|&p| train[p]).collect();
            let tb = TokenBatch::from_sequences(&t.captions(&items, rng), n_max);
            let f = feats.select(chunk);
            let (grads, v) = {
                let mut g = Graph::with_params(&t.model.store);
                let et = t.model.text.encode(&mut g, &tb)?;
                let ei = t.model.image.encode_features(&mut g, &f)?;
                let l = matching_loss(&mut g, &ei, &et, gammas)?;
                (g.backward(l.total)?, g.scalar_value(l.total))
            };
            t.push_log(1, STAGE_VTA, epoch, v, [v, 0.0, 0.0, 0.0, 0.0], 0.0);
            t.apply(&grads, &mut opt)
        })?;
        self.mark(STAGE_VTA);
        Ok(())
    }

    fn push_log(&mut self, phase: u8, stage: &'static str, epoch: usize, total: f64, parts: [f64; 5], disc: f64) {
        if !total.is_finite() {
            log::warn!("non-finite loss at step {}", self.steps);
        }
        self.log.rows.push(StepLog {
            phase,
            stage,
            epoch,
            step: self.steps,
            total,
            parts,
            discriminator: disc,
        });
    }

    fn apply(&mut self, grads: &crate::graph::Gradients, opt: &mut Adam) -> Result<()> {
        self.model.store.accumulate(grads);
        opt.step(&mut self.model.store);
        self.model.store.zero_grad();
        Ok(())
    }

    /// Region features `[n*M, d]` of `items` from the current (frozen) encoder.
    pub fn region_features(&self, items: &[usize]) -> Result<Tensor> {
        let blocks = self.model.image.config.blocks;
        let mut rows = Vec::new();
        let mut d = 0;
        for c in items.chunks(CHUNK) {
            let f = self.model.image.precompute(&self.model.store, &self.data.pixel_batch(c), blocks)?;
            let mut g = Graph::with_params(&self.model.store);
            g.freeze_prefix("");
            let e = self.model.image.encode_features(&mut g, &f)?;
            d = g.shape(e.r)[1];
            rows.extend_from_slice(g.value(e.r).data());
        }
        Tensor::new(vec![rows.len() / d.max(1), d], rows)
    }

    /// Phase 2a: captioner by teacher forcing on frozen region features.
    pub fn run_captioner(&mut self) -> Result<()> {
        self.require(&[STAGE_VTA], "captioner pretraining")?;
        self.model.train_only(&[CAP]);
        let train = self.data.split(Split::Train);
        let r_all = self.region_features(&train)?;
        let m = self.model.image.config.regions();
        let d = r_all.cols();
        let cfg = self.cfg.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.phase2_cap_lr,
                ..AdamConfig::default()
            },
            self.ids(&[CAP]),
        );
        let mut rng = self.rng(2);
        self.epochs(cfg.phase2_cap_epochs, cfg.phase2_batch, cfg.max_steps, &mut rng, |t, epoch, chunk, rng| {
            opt.set_lr(captioner_lr(&cfg, epoch));
            let items: Vec<usize> = chunk.iter().map(|&p| train[p]).collect();
            let tb = TeacherBatch::new(&t.captions(&items, rng), cfg.n_max);
            let mut r = Vec::with_capacity(chunk.len() * m * d);
            for &p in chunk {
                r.extend_from_slice(&r_all.data()[p * m * d..(p + 1) * m * d]);
            }
            let (grads, v) = {
                let mut g = Graph::with_params(&t.model.store);
                let rv = g.constant(Tensor::new(vec![chunk.len() * m, d], r)?);
                let mem = t.model.cap.encode_regions(&mut g, rv, chunk.len(), m)?;
                let l = t.model.cap.captioning_loss(&mut g, &mem, &tb)?;
                (g.backward(l)?, g.scalar_value(l))
            };
            t.push_log(2, STAGE_CAPTIONER, epoch, v, [0.0, 0.0, 0.0, 0.0, v], 0.0);
            t.apply(&grads, &mut opt)
        })?;
        self.mark(STAGE_CAPTIONER);
        Ok(())
    }

    /// Phase 2b: generator cascade and discriminators against frozen encoders.
    pub fn run_gan(&mut self) -> Result<()> {
        self.require(&[STAGE_VTA], "generator pretraining")?;
        self.model.train_only(&[GEN, DISC]);
        let train = self.data.split(Split::Train);
        let cfg = self.cfg.clone();
        let mut g_opt = Adam::new(gan_adam(cfg.phase2_g_lr), self.ids(&[GEN]));
        let mut d_opt = Adam::new(gan_adam(cfg.phase2_d_lr), self.ids(&[DISC]));
        let mut rng = self.rng(3);
        self.epochs(cfg.phase2_gan_epochs, cfg.phase2_batch, cfg.max_steps, &mut rng, |t, epoch, chunk, rng| {
            let items: Vec<usize> = chunk.iter().map(|&p| train[p]).collect();
            let tb = TokenBatch::from_sequences(&t.captions(&items, rng), cfg.n_max);
            let z = sample_noise(items.len(), cfg.tim_z_dim, rng);
            let (grads, fakes, s, parts) = {
                let mut g = Graph::with_params(&t.model.store);
                g.freeze_prefix(scope(DISC));
                let et = t.model.text.encode(&mut g, &tb)?;
                let zv = g.constant(z);
                let imgs = t.model.gen.generate(&mut g, et.s, zv)?;
                let lg = t.generator_terms(&mut g, &imgs, et.s)?;
                let lambda = cfg.weights.fake_image;
                let (total, lm) = if lambda > 0.0 {
                    let last = *imgs.last().expect("at least one stage");
                    let big = fit_to_size(&mut g, last, cfg.image_size)?;
                    let ei = t.model.image.encode(&mut g, big)?;
                    let lm = matching_loss(&mut g, &ei, &et, cfg.gammas)?.total;
                    (tim_total_loss(&mut g, lg, lm, lambda)?, g.scalar_value(lm))
                } else {
                    (lg, 0.0)
                };
                let parts = [0.0, lm, 0.0, g.scalar_value(lg), 0.0];
                let fakes: Vec<Tensor> = imgs.iter().map(|&v| g.value(v).clone()).collect();
                let s = g.value(et.s).clone();
                (g.backward(total)?, fakes, s, (g.scalar_value(total), parts))
            };
            t.apply(&grads, &mut g_opt)?;
            let ld = t.discriminator_step(&items, &fakes, &s, &mut d_opt)?;
            t.push_log(2, STAGE_GAN, epoch, parts.0, parts.1, ld);
            Ok(())
        })?;
        self.mark(STAGE_GAN);
        Ok(())
    }

    /// `L_G` summed over stages, discriminators held fixed.
    fn generator_terms(&self, g: &mut Graph, imgs: &[Var], s: Var) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (img, disc) in imgs.iter().zip(&self.model.discs) {
            let (pu, pc) = disc.forward(g, *img, s)?;
            let l = generator_loss(g, pu, pc)?;
            total = Some(match total {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        total.ok_or_else(|| Error::Contract("generator has no stages".into()))
    }

    /// One discriminator update on real images and the given fakes.
    fn discriminator_step(&mut self, items: &[usize], fakes: &[Tensor], s: &Tensor, opt: &mut Adam) -> Result<f64> {
        let real = self.data.pixel_batch(items);
        let (grads, v) = {
            let mut g = Graph::with_params(&self.model.store);
            g.freeze_prefix(scope(GEN));
            let rv = g.constant(real);
            let sv = g.constant(s.clone());
            let mut total: Option<Var> = None;
            for (fake, disc) in fakes.iter().zip(&self.model.discs) {
                let r = downsample_to(&mut g, rv, disc.res)?;
                let f = g.constant(fake.clone());
                let (ru, rc) = disc.forward(&mut g, r, sv)?;
                let (fu, fc) = disc.forward(&mut g, f, sv)?;
                let l = discriminator_loss(&mut g, ru, fu, rc, fc)?;
                total = Some(match total {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            let total = total.ok_or_else(|| Error::Contract("no discriminators".into()))?;
            (g.backward(total)?, g.scalar_value(total))
        };
        self.apply(&grads, opt)?;
        Ok(v)
    }

    pub fn run_phase2(&mut self) -> Result<()> {
        self.run_captioner()?;
        self.run_gan()
    }

    /// Phase 3: all modules of the variant on the weighted objective, then a
    /// discriminator update per step when the generator is present.
    pub fn run_phase3(&mut self, ablation: Ablation) -> Result<()> {
        self.require(&ablation.prerequisites(), &format!("joint training ({})", ablation.name()))?;
        let plan = PhasePlan::phase3(&self.cfg, ablation);
        self.model.train_only(&plan.modules);
        self.model.image.set_trainability(&mut self.model.store, plan.image)?;
        let train = self.data.split(Split::Train);
        let frozen = self.model.image.frozen_prefix(&self.model.store);
        let feats = self.features(&train, frozen)?;
        let cfg = self.cfg.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: plan.lr,
                ..AdamConfig::default()
            },
            self.ids(&plan.modules),
        );
        let mut d_opt = Adam::new(gan_adam(plan.disc_lr), self.ids(&[DISC]));
        let mut rng = self.rng(4);
        let m = self.model.image.config.regions();
        self.epochs(plan.epochs, plan.batch, plan.max_steps, &mut rng, |t, epoch, chunk, rng| {
            let items: Vec<usize> = chunk.iter().map(|&p| train[p]).collect();
            let caps = t.captions(&items, rng);
            let tb = TokenBatch::from_sequences(&caps, cfg.n_max);
            let z = ablation.uses_generator().then(|| sample_noise(items.len(), cfg.tim_z_dim, rng));
            let f = feats.select(chunk);
            let b = items.len();
            let (grads, total, parts, fakes, s) = {
                let mut g = Graph::with_params(&t.model.store);
                g.freeze_prefix(scope(DISC));
                let et = t.model.text.encode(&mut g, &tb)?;
                let ei = t.model.image.encode_features(&mut g, &f)?;
                let lm = matching_loss(&mut g, &ei, &et, cfg.gammas)?.total;
                let mut lp = LossParts {
                    matching: lm,
                    fake_image: None,
                    fake_text: None,
                    generator: None,
                    captioning: None,
                };
                let mut fakes = Vec::new();
                let s_det = g.detach(et.s);
                if let Some(z) = z {
                    let zv = g.constant(z);
                    let imgs = t.model.gen.generate(&mut g, s_det, zv)?;
                    lp.generator = Some(t.generator_terms(&mut g, &imgs, s_det)?);
                    let last = *imgs.last().expect("at least one stage");
                    let input = if plan.fake_grad { last } else { g.detach(last) };
                    let big = fit_to_size(&mut g, input, cfg.image_size)?;
                    let fi = t.model.image.encode(&mut g, big)?;
                    lp.fake_image = Some(matching_loss(&mut g, &fi, &et, cfg.gammas)?.total);
                    fakes = imgs.iter().map(|&v| g.value(v).clone()).collect();
                }
                if ablation.uses_captioner() {
                    let generated = t.generate_captions(g.value(ei.r), b, m)?;
                    let ftb = TokenBatch::from_sequences(&nonempty(generated), cfg.n_max);
                    let ft = t.model.text.encode(&mut g, &ftb)?;
                    lp.fake_text = Some(matching_loss(&mut g, &ei, &ft, cfg.gammas)?.total);
                    let mem = t.model.cap.encode_regions(&mut g, ei.r, b, m)?;
                    lp.captioning = Some(t.model.cap.captioning_loss(&mut g, &mem, &TeacherBatch::new(&caps, cfg.n_max))?);
                }
                let total = multimodal_loss(&mut g, &lp, &plan.weights)?;
                let s = g.value(et.s).clone();
                (g.backward(total)?, g.scalar_value(total), lp.values(&g), fakes, s)
            };
            t.apply(&grads, &mut opt)?;
            let ld = if fakes.is_empty() {
                0.0
            } else {
                t.discriminator_step(&items, &fakes, &s, &mut d_opt)?
            };
            t.push_log(3, STAGE_JOINT, epoch, total, parts, ld);
            Ok(())
        })?;
        self.mark(STAGE_JOINT);
        Ok(())
    }

    /// Greedy captions from region features `[b*m, d]`, outside any tape.
    pub fn generate_captions(&self, r: &Tensor, b: usize, m: usize) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::with_params(&self.model.store);
        g.freeze_prefix("");
        let rv = g.constant(r.clone());
        let mem = self.model.cap.encode_regions(&mut g, rv, b, m)?;
        self.model.cap.generate(&mut g, &mem)
    }
}

/// Captioner learning rate: the base rate, cut tenfold from the decay epoch on.
pub fn captioner_lr(cfg: &RunConfig, epoch: usize) -> f64 {
    if epoch >= cfg.phase2_cap_decay_epoch {
        cfg.phase2_cap_lr * 0.1
    } else {
        cfg.phase2_cap_lr
    }
}

fn gan_adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: 0.5,
        weight_decay: 0.0,
        ..AdamConfig::default()
    }
}

/// Generated captions can be empty; the text encoder needs a real token.
fn nonempty(caps: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    caps.into_iter().map(|c| if c.is_empty() { vec![UNK] } else { c }).collect()
}
