//! The full model: both encoders, the generator cascade with its
//! discriminators, and the captioner, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::image::ImageEncoder;
use crate::itm::Captioner;
use crate::params::ParamStore;
use crate::text::TextEncoder;
use crate::tim::{Discriminator, Generator};

pub const TEXT: &str = "text";
pub const IMAGE: &str = "image";
pub const GEN: &str = "gen";
pub const DISC: &str = "disc";
pub const CAP: &str = "cap";

/// `"<module>."`, the name prefix of a module's parameters.
pub fn scope(module: &str) -> String {
    format!("{module}.")
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub gen: Generator,
    pub discs: Vec<Discriminator>,
    pub cap: Captioner,
}

impl Model {
    /// Every module draws its initial weights from its own stream, so a
    /// module's initialisation does not depend on which others exist.
    pub fn new(cfg: &RunConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let rng = |salt: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x100).wrapping_add(salt));
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, TEXT, cfg.text_config(), vocab, &mut rng(1))?;
        let image = ImageEncoder::new(&mut store, IMAGE, cfg.image_config(), &mut rng(2))?;
        let tim = cfg.tim_config();
        let gen = Generator::new(&mut store, GEN, tim.clone(), &mut rng(3))?;
        let mut drng = rng(4);
        let discs = (0..tim.stages)
            .map(|k| {
                Discriminator::new(
                    &mut store,
                    &format!("{DISC}.{k}"),
                    tim.resolution(k),
                    tim.disc_channels,
                    tim.d,
                    &mut drng,
                )
            })
            .collect::<Result<_>>()?;
        let cap = Captioner::new(&mut store, CAP, cfg.captioner_config(vocab), &mut rng(5))?;
        Ok(Model {
            store,
            text,
            image,
            gen,
            discs,
            cap,
        })
    }

    /// Freezes everything, then unfreezes the listed modules.
    pub fn train_only(&mut self, modules: &[&str]) {
        self.store.set_trainable("", false);
        for m in modules {
            self.store.set_trainable(&scope(m), true);
        }
    }

    pub fn fingerprint(&self, module: &str) -> u64 {
        self.store.fingerprint(&scope(module))
    }
}
