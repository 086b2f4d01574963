//! Text-to-image branch: a cascade of generators conditioned on the sentence
//! feature, with an unconditional and a conditional discriminator per stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Linear, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct TimConfig {
    pub z_dim: usize,
    pub stages: usize,
    /// Side of the first stage output.
    pub base_res: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub d: usize,
}

impl TimConfig {
    /// Two stages at 16 and 32 pixels.
    pub fn desk() -> Self {
        TimConfig {
            z_dim: 32,
            stages: 2,
            base_res: 16,
            gen_channels: 32,
            disc_channels: 16,
            d: 64,
        }
    }

    /// Three stages at 64, 128 and 256 pixels.
    pub fn paper() -> Self {
        TimConfig {
            z_dim: 100,
            stages: 3,
            base_res: 64,
            gen_channels: 32,
            disc_channels: 16,
            d: 256,
        }
    }

    pub fn resolution(&self, stage: usize) -> usize {
        self.base_res << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.z_dim == 0 {
            return Err(Error::Config("the cascade needs at least one stage and a noise vector".into()));
        }
        if self.base_res < 8 || !self.base_res.is_power_of_two() {
            return Err(Error::Config(format!("base resolution {} must be a power of two >= 8", self.base_res)));
        }
        Ok(())
    }
}

/// `[batch, z_dim]` noise uniform in `[-1, 1]`.
pub fn sample_noise<R: Rng + ?Sized>(batch: usize, z_dim: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[batch, z_dim], -1.0, 1.0, rng)
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: TimConfig,
    pub stem: Linear,
    /// Upsample-conv blocks; the first `log2(base_res / 4)` reach stage 0.
    pub ups: Vec<Conv>,
    pub to_rgb: Vec<Conv>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: TimConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.gen_channels;
        let stem = Linear::new(store, &format!("{prefix}.stem"), config.z_dim + config.d, c * 16, true, rng)?;
        let first = (config.base_res / 4).trailing_zeros() as usize;
        let ups = (0..first + config.stages - 1)
            .map(|i| Conv::new(store, &format!("{prefix}.up{i}"), c, c, 3, 1, 1, rng))
            .collect::<Result<_>>()?;
        let to_rgb = (0..config.stages)
            .map(|k| Conv::new(store, &format!("{prefix}.rgb{k}"), c, 3, 3, 1, 1, rng))
            .collect::<Result<_>>()?;
        Ok(Generator {
            config,
            stem,
            ups,
            to_rgb,
        })
    }

    /// One image batch per stage, `[batch, 3, res_k, res_k]` in `[-1, 1]`.
    pub fn generate(&self, g: &mut Graph, s: Var, z: Var) -> Result<Vec<Var>> {
        let b = g.shape(s)[0];
        if g.shape(z) != [b, self.config.z_dim] || g.shape(s) != [b, self.config.d] {
            return Err(Error::shape(
                "generator",
                format!("noise {:?} and sentence {:?} for batch {b}", g.shape(z), g.shape(s)),
            ));
        }
        let c = self.config.gen_channels;
        let zs = g.concat_cols(&[z, s])?;
        let h = self.stem.forward(g, zs)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let mut x = g.reshape(h, &[b, c, 4, 4])?;
        let first = (self.config.base_res / 4).trailing_zeros() as usize;
        let mut out = Vec::with_capacity(self.config.stages);
        for (i, conv) in self.ups.iter().enumerate() {
            let u = g.upsample2(x)?;
            let y = conv.forward(g, u)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
            if i + 1 >= first {
                let rgb = self.to_rgb[out.len()].forward(g, x)?;
                out.push(g.tanh(rgb));
            }
        }
        if first == 0 {
            let rgb = self.to_rgb[0].forward(g, x)?;
            out.insert(0, g.tanh(rgb));
        }
        Ok(out)
    }
}

/// Per-stage discriminator returning unconditional and conditional probabilities.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub res: usize,
    pub downs: Vec<Conv>,
    pub uncond: Linear,
    pub joint: Conv,
    pub cond: Linear,
    pub d: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        res: usize,
        channels: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = (res / 4).trailing_zeros() as usize;
        let mut downs = Vec::with_capacity(n);
        let mut c_in = 3;
        let mut c = channels;
        for i in 0..n {
            downs.push(Conv::new(store, &format!("{prefix}.down{i}"), c_in, c, 3, 2, 1, rng)?);
            c_in = c;
            c = (c * 2).min(channels * 8);
        }
        let feat = c_in;
        Ok(Discriminator {
            res,
            downs,
            uncond: Linear::new(store, &format!("{prefix}.uncond"), feat * 16, 1, true, rng)?,
            joint: Conv::new(store, &format!("{prefix}.joint"), feat + d, feat, 1, 1, 0, rng)?,
            cond: Linear::new(store, &format!("{prefix}.cond"), feat * 16, 1, true, rng)?,
            d,
        })
    }

    /// `([batch, 1], [batch, 1])` probabilities for `image` alone and `image` with `s`.
    pub fn forward(&self, g: &mut Graph, image: Var, s: Var) -> Result<(Var, Var)> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[2] != self.res || shape[3] != self.res {
            return Err(Error::shape(
                "discriminator",
                format!("expected {0}x{0} images, got {1:?}", self.res, shape),
            ));
        }
        let b = shape[0];
        let mut x = image;
        for conv in &self.downs {
            let y = conv.forward(g, x)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let c = g.shape(x)[1];
        let flat = g.reshape(x, &[b, c * 16])?;
        let u = self.uncond.forward(g, flat)?;
        let pu = g.sigmoid(u);
        let sb = g.broadcast_spatial(s, 4, 4)?;
        let joined = g.concat_channels(x, sb)?;
        let j = self.joint.forward(g, joined)?;
        let j = g.leaky_relu(j, LEAKY_SLOPE);
        let jf = g.reshape(j, &[b, c * 16])?;
        let cl = self.cond.forward(g, jf)?;
        let pc = g.sigmoid(cl);
        Ok((pu, pc))
    }
}

fn mean_log(g: &mut Graph, p: Var, complement: bool) -> Var {
    let q = if complement {
        let neg = g.scale(p, -1.0);
        g.add_scalar(neg, 1.0)
    } else {
        p
    };
    let l = g.ln_clamped(q, PROB_EPS, 1.0 - PROB_EPS);
    g.mean(l)
}

/// `-1/2 E[log d_u] - 1/2 E[log d_c]` for discriminator outputs on fakes.
pub fn generator_loss(g: &mut Graph, d_uncond: Var, d_cond: Var) -> Result<Var> {
    let a = mean_log(g, d_uncond, false);
    let b = mean_log(g, d_cond, false);
    let s = g.add(a, b)?;
    Ok(g.scale(s, -0.5))
}

/// Unconditional plus conditional real/fake cross-entropy, each term halved.
pub fn discriminator_loss(g: &mut Graph, real_u: Var, fake_u: Var, real_c: Var, fake_c: Var) -> Result<Var> {
    let terms = [
        mean_log(g, real_u, false),
        mean_log(g, fake_u, true),
        mean_log(g, real_c, false),
        mean_log(g, fake_c, true),
    ];
    let a = g.add(terms[0], terms[1])?;
    let b = g.add(terms[2], terms[3])?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -0.5))
}

/// `L_G + lambda * L_m` on generated images paired with real text.
pub fn tim_total_loss(g: &mut Graph, l_g: Var, l_m_fake: Var, lambda: f64) -> Result<Var> {
    let w = g.scale(l_m_fake, lambda);
    g.add(l_g, w)
}

/// Average-pools real `[B, 3, S, S]` images down to side `res`.
pub fn downsample_to(g: &mut Graph, images: Var, res: usize) -> Result<Var> {
    let mut x = images;
    while g.shape(x)[2] > res {
        x = g.avg_pool2(x)?;
    }
    if g.shape(x)[2] != res {
        return Err(Error::shape(
            "downsample",
            format!("cannot pool {:?} to side {res}", g.shape(images)),
        ));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(g: &mut Graph, p: f64) -> Var {
        g.constant(Tensor::full(&[3, 1], p))
    }

    #[test]
    fn generator_loss_closed_forms() {
        let mut g = Graph::new();
        let one = probs(&mut g, 1.0);
        let l = generator_loss(&mut g, one, one).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-6);
        let half = probs(&mut g, 0.5);
        let l = generator_loss(&mut g, half, half).unwrap();
        assert!((g.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
        let l = generator_loss(&mut g, half, one).unwrap();
        assert!((g.scalar_value(l) - 0.5 * 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn discriminator_loss_closed_forms() {
        let mut g = Graph::new();
        let (one, zero, half) = (probs(&mut g, 1.0), probs(&mut g, 0.0), probs(&mut g, 0.5));
        let l = discriminator_loss(&mut g, one, zero, one, zero).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-6);
        let l = discriminator_loss(&mut g, half, half, half, half).unwrap();
        assert!((g.scalar_value(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l = discriminator_loss(&mut g, half, zero, half, zero).unwrap();
        assert!((g.scalar_value(l) - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn desk_cascade_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = TimConfig {
            d: 8,
            gen_channels: 4,
            ..TimConfig::desk()
        };
        let gen = Generator::new(&mut store, "gen", cfg.clone(), &mut rng).unwrap();
        let disc = Discriminator::new(&mut store, "disc0", 16, 4, 8, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let z = g.constant(sample_noise(2, cfg.z_dim, &mut rng));
        let imgs = gen.generate(&mut g, s, z).unwrap();
        assert_eq!(g.shape(imgs[0]), &[2, 3, 16, 16]);
        assert_eq!(g.shape(imgs[1]), &[2, 3, 32, 32]);
        assert!(g.value(imgs[1]).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (pu, pc) = disc.forward(&mut g, imgs[0], s).unwrap();
        assert_eq!(g.shape(pu), &[2, 1]);
        assert!(g.value(pc).data().iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut g = Graph::new();
        let lg = g.constant(Tensor::scalar(0.7));
        let lm = g.constant(Tensor::scalar(2.0));
        let t = tim_total_loss(&mut g, lg, lm, 1.0).unwrap();
        assert!((g.scalar_value(t) - 2.7).abs() < 1e-15);
        let t = tim_total_loss(&mut g, lg, lm, 0.0).unwrap();
        assert_eq!(g.scalar_value(t), 0.7);
    }
}
