//! Flat `key = value` run configuration with typed parsing.
//!
//! Lines are `key = value`; `#` starts a comment. A `profile` line, wherever
//! it appears, selects the defaults that the other keys override. Unknown
//! keys and unparsable values are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::image::ImageConfig;
use crate::itm::CaptionerConfig;
use crate::text::TextConfig;
use crate::tim::TimConfig;
use crate::vta::Gammas;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

/// Weights of the five terms of the multimodal objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub matching: f64,
    pub fake_image: f64,
    pub fake_text: f64,
    pub generator: f64,
    pub captioning: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")))
        }
    }

    /// `[matching, fake_image, fake_text, generator, captioning]`
    pub fn as_array(&self) -> [f64; 5] {
        [self.matching, self.fake_image, self.fake_text, self.generator, self.captioning]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            matching: 10.0,
            fake_image: 1.0,
            fake_text: 1.0,
            generator: 0.01,
            captioning: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    pub data_train: usize,
    pub data_test: usize,
    pub data_captions: usize,
    pub data_max_objects: usize,
    pub data_seed: u64,

    pub d: usize,
    pub heads: usize,
    pub n_max: usize,
    pub text_layers: usize,
    pub text_ffn: usize,
    pub image_size: usize,
    pub image_base_channels: usize,
    pub image_head_hidden: usize,
    pub tim_stages: usize,
    pub tim_base_res: usize,
    pub tim_z_dim: usize,
    pub tim_gen_channels: usize,
    pub tim_disc_channels: usize,
    pub cap_enc_layers: usize,
    pub cap_dec_layers: usize,
    pub cap_ffn: usize,

    pub gammas: Gammas,
    pub weights: LossWeights,

    pub phase1_epochs: usize,
    pub phase1_batch: usize,
    pub phase1_lr: f64,
    /// Leading conv blocks frozen in phase 1; the whole backbone when equal
    /// to the block count.
    pub phase1_frozen_blocks: usize,

    pub phase2_batch: usize,
    pub phase2_cap_epochs: usize,
    pub phase2_cap_lr: f64,
    pub phase2_cap_decay_epoch: usize,
    pub phase2_gan_epochs: usize,
    pub phase2_g_lr: f64,
    pub phase2_d_lr: f64,

    pub phase3_epochs: usize,
    pub phase3_batch: usize,
    pub phase3_lr: f64,
    pub phase3_d_lr: f64,
    pub phase3_frozen_blocks: usize,
    /// Let the matching loss on generated images update the generator.
    pub phase3_fake_grad: bool,
    /// Stop each phase after this many optimizer steps (0: no limit).
    pub max_steps: usize,

    pub eval_pool: usize,
    pub eval_top_k: usize,
    pub eval_seed: u64,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            data_train: 512,
            data_test: 128,
            data_captions: 3,
            data_max_objects: 3,
            data_seed: 7,
            d: 64,
            heads: 8,
            n_max: 15,
            text_layers: 1,
            text_ffn: 128,
            image_size: 64,
            image_base_channels: 32,
            image_head_hidden: 256,
            tim_stages: 2,
            tim_base_res: 16,
            tim_z_dim: 32,
            tim_gen_channels: 32,
            tim_disc_channels: 16,
            cap_enc_layers: 2,
            cap_dec_layers: 2,
            cap_ffn: 128,
            gammas: Gammas::default(),
            weights: LossWeights::default(),
            phase1_epochs: 60,
            phase1_batch: 32,
            phase1_lr: 1e-3,
            phase1_frozen_blocks: 0,
            phase2_batch: 32,
            phase2_cap_epochs: 30,
            phase2_cap_lr: 1e-3,
            phase2_cap_decay_epoch: 20,
            phase2_gan_epochs: 4,
            phase2_g_lr: 2e-4,
            phase2_d_lr: 2e-4,
            phase3_epochs: 1,
            phase3_batch: 8,
            phase3_lr: 1e-5,
            phase3_d_lr: 2e-4,
            phase3_frozen_blocks: 2,
            phase3_fake_grad: false,
            max_steps: 0,
            eval_pool: 100,
            eval_top_k: 3,
            eval_seed: 0,
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            d: 256,
            text_ffn: 512,
            image_size: 136,
            image_head_hidden: 0,
            tim_stages: 3,
            tim_base_res: 64,
            tim_z_dim: 100,
            cap_enc_layers: 6,
            cap_dec_layers: 6,
            cap_ffn: 512,
            data_captions: 10,
            phase1_lr: 2e-4,
            phase1_frozen_blocks: 4,
            phase2_cap_lr: 1e-4,
            phase2_cap_decay_epoch: 20,
            phase3_lr: 1e-6,
            ..RunConfig::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            train: self.data_train,
            test: self.data_test,
            size: self.image_size,
            captions_per_image: self.data_captions,
            max_objects: self.data_max_objects,
            seed: self.data_seed,
        }
    }

    pub fn text_config(&self) -> TextConfig {
        TextConfig {
            d: self.d,
            heads: self.heads,
            layers: self.text_layers,
            ffn: self.text_ffn,
            n_max: self.n_max,
        }
    }

    pub fn image_config(&self) -> ImageConfig {
        ImageConfig {
            size: self.image_size,
            head_hidden: self.image_head_hidden,
            base_channels: self.image_base_channels,
            d: self.d,
            ..ImageConfig::desk()
        }
    }

    pub fn tim_config(&self) -> TimConfig {
        TimConfig {
            z_dim: self.tim_z_dim,
            stages: self.tim_stages,
            base_res: self.tim_base_res,
            gen_channels: self.tim_gen_channels,
            disc_channels: self.tim_disc_channels,
            d: self.d,
        }
    }

    pub fn captioner_config(&self, vocab: usize) -> CaptionerConfig {
        CaptionerConfig {
            enc_layers: self.cap_enc_layers,
            dec_layers: self.cap_dec_layers,
            heads: self.heads,
            d: self.d,
            ffn: self.cap_ffn,
            n_max: self.n_max,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gammas.validate()?;
        self.weights.validate()?;
        self.image_config().validate()?;
        self.tim_config().validate()?;
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.d, self.heads)));
        }
        if self.phase1_batch == 0 || self.phase2_batch == 0 || self.phase3_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let blocks = self.image_config().blocks;
        for k in [self.phase1_frozen_blocks, self.phase3_frozen_blocks] {
            if k > blocks {
                return Err(Error::Config(format!("cannot freeze {k} of {blocks} conv blocks")));
            }
        }
        Ok(())
    }
}

macro_rules! keys {
    ($( $key:literal => $($field:ident).+ ),* $(,)?) => {
        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    "profile" => self.profile = value.parse()?,
                    $( $key => self.$($field).+ = parse_value(key, value)?, )*
                    other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
                }
                Ok(())
            }

            /// Every key with its current value, in a fixed order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                let mut v = vec![("profile", self.profile.to_string())];
                $( v.push(($key, self.$($field).+.to_string())); )*
                v
            }
        }
    };
}

keys! {
    "seed" => seed,
    "data.train" => data_train,
    "data.test" => data_test,
    "data.captions" => data_captions,
    "data.max_objects" => data_max_objects,
    "data.seed" => data_seed,
    "model.d" => d,
    "model.heads" => heads,
    "model.n_max" => n_max,
    "text.layers" => text_layers,
    "text.ffn" => text_ffn,
    "image.size" => image_size,
    "image.base_channels" => image_base_channels,
    "image.head_hidden" => image_head_hidden,
    "tim.stages" => tim_stages,
    "tim.base_res" => tim_base_res,
    "tim.z_dim" => tim_z_dim,
    "tim.gen_channels" => tim_gen_channels,
    "tim.disc_channels" => tim_disc_channels,
    "cap.enc_layers" => cap_enc_layers,
    "cap.dec_layers" => cap_dec_layers,
    "cap.ffn" => cap_ffn,
    "gamma1" => gammas.g1,
    "gamma2" => gammas.g2,
    "gamma3" => gammas.g3,
    "lambda.m" => weights.matching,
    "lambda.img" => weights.fake_image,
    "lambda.txt" => weights.fake_text,
    "lambda.g" => weights.generator,
    "lambda.c" => weights.captioning,
    "phase1.epochs" => phase1_epochs,
    "phase1.batch" => phase1_batch,
    "phase1.lr" => phase1_lr,
    "phase1.frozen_blocks" => phase1_frozen_blocks,
    "phase2.batch" => phase2_batch,
    "phase2.cap_epochs" => phase2_cap_epochs,
    "phase2.cap_lr" => phase2_cap_lr,
    "phase2.cap_decay_epoch" => phase2_cap_decay_epoch,
    "phase2.gan_epochs" => phase2_gan_epochs,
    "phase2.g_lr" => phase2_g_lr,
    "phase2.d_lr" => phase2_d_lr,
    "phase3.epochs" => phase3_epochs,
    "phase3.batch" => phase3_batch,
    "phase3.lr" => phase3_lr,
    "phase3.d_lr" => phase3_d_lr,
    "phase3.frozen_blocks" => phase3_frozen_blocks,
    "phase3.fake_grad" => phase3_fake_grad,
    "max_steps" => max_steps,
    "eval.pool" => eval_pool,
    "eval.top_k" => eval_top_k,
    "eval.seed" => eval_seed,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for key {key:?}")))
}

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies `pairs` on top of the defaults of the profile they name
    /// (desk when none is named). Later duplicates win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = match pairs.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = RunConfig::for_profile(profile);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text: every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, String> {
        self.entries().into_iter().collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
