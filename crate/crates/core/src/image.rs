//! Convolutional image encoder producing region features `r` and a global
//! feature `v`.
//!
//! The backbone is a stack of stride-2 3x3 convolutions with leaky ReLU and
//! channel doubling. `r` is the flattened output grid of block
//! `region_block`, projected to `d`; `v` projects the global averages of
//! every block, concatenated, to `d`. Pooling early blocks keeps the
//! edge-orientation statistics that separate shapes. Only the projections
//! form the output layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Linear, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageConfig {
    pub size: usize,
    pub base_channels: usize,
    pub blocks: usize,
    /// 1-based block whose output grid becomes `r`.
    pub region_block: usize,
    pub d: usize,
    /// Hidden width of the projection heads; 0 makes them single linear maps.
    pub head_hidden: usize,
}

impl ImageConfig {
    /// 64x64 input, 8x8 region grid.
    pub fn desk() -> Self {
        ImageConfig {
            size: 64,
            base_channels: 32,
            blocks: 4,
            region_block: 3,
            d: 64,
            head_hidden: 256,
        }
    }

    /// 136x136 input, 17x17 region grid (289 regions).
    pub fn paper() -> Self {
        ImageConfig {
            size: 136,
            base_channels: 32,
            blocks: 4,
            region_block: 3,
            d: 256,
            head_hidden: 0,
        }
    }

    pub fn channels(&self, block: usize) -> usize {
        self.base_channels << (block - 1)
    }

    /// Spatial side after `block` blocks (block 0 is the input).
    pub fn side(&self, block: usize) -> usize {
        (0..block).fold(self.size, |s, _| (s + 2 - 3) / 2 + 1)
    }

    /// Width of the concatenated per-block global pools.
    pub fn pooled_width(&self) -> usize {
        (1..=self.blocks).map(|b| self.channels(b)).sum()
    }

    pub fn grid(&self) -> usize {
        self.side(self.region_block)
    }

    pub fn regions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.region_block == 0 || self.region_block > self.blocks {
            return Err(Error::Config(format!(
                "region block {} must lie in 1..={}",
                self.region_block, self.blocks
            )));
        }
        if self.size == 0 || self.d == 0 || self.base_channels == 0 {
            return Err(Error::Config("image size, width and channels must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts of the encoder receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainability {
    /// Only the `r` and `v` projections train.
    FrozenBackbone,
    Full,
    /// The first `k` conv blocks are frozen.
    FirstKFrozen(usize),
}

impl Trainability {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen-backbone" | "frozen" => Ok(Trainability::FrozenBackbone),
            "full" => Ok(Trainability::Full),
            other => other
                .strip_prefix("first-")
                .and_then(|r| r.strip_suffix("-frozen"))
                .and_then(|k| k.parse().ok())
                .map(Trainability::FirstKFrozen)
                .ok_or_else(|| Error::Config(format!("unknown trainability profile {other:?}"))),
        }
    }

    pub fn frozen_blocks(self, blocks: usize) -> usize {
        match self {
            Trainability::FrozenBackbone => blocks,
            Trainability::Full => 0,
            Trainability::FirstKFrozen(k) => k,
        }
    }
}

/// Backbone activations computed outside any graph, used to skip frozen blocks.
#[derive(Clone, Debug)]
pub struct Features {
    /// Number of blocks already applied.
    pub after: usize,
    /// `[batch, c, h, w]` output of block `after`.
    pub maps: Tensor,
    /// `[batch*M, c_r]` region rows, present once the region block is passed.
    pub regions: Option<Tensor>,
    /// `[batch, c_b]` global average of each applied block.
    pub pools: Vec<Tensor>,
}

impl Features {
    pub fn batch(&self) -> usize {
        self.maps.shape()[0]
    }

    /// Features of the listed items, in order.
    pub fn select(&self, items: &[usize]) -> Features {
        Features {
            after: self.after,
            maps: select_leading(&self.maps, items),
            regions: self.regions.as_ref().map(|r| {
                let per = r.shape()[0] / self.batch();
                select_leading(&r.clone().reshape(&[self.batch(), per, r.shape()[1]]).expect("divisible"), items)
                    .reshape(&[items.len() * per, r.shape()[1]])
                    .expect("same size")
            }),
            pools: self.pools.iter().map(|p| select_leading(p, items)).collect(),
        }
    }
}

impl Features {
    /// Joins per-chunk features along the batch axis.
    pub fn concat(parts: &[Features]) -> Result<Features> {
        let first = parts.first().ok_or_else(|| Error::DegenerateInput("no feature chunks".into()))?;
        if parts.iter().any(|p| p.after != first.after) {
            return Err(Error::shape("feature concat", "chunks stop at different blocks"));
        }
        let cat = |ts: Vec<&Tensor>| -> Result<Tensor> {
            let mut shape = ts[0].shape().to_vec();
            shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
            Tensor::new(shape, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
        };
        let regions = match first.regions {
            Some(_) => Some(cat(parts.iter().map(|p| p.regions.as_ref().expect("uniform chunks")).collect())?),
            None => None,
        };
        Ok(Features {
            after: first.after,
            maps: cat(parts.iter().map(|p| &p.maps).collect())?,
            regions,
            pools: (0..first.pools.len())
                .map(|b| cat(parts.iter().map(|p| &p.pools[b]).collect()))
                .collect::<Result<_>>()?,
        })
    }
}

fn select_leading(t: &Tensor, items: &[usize]) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(items.len() * per);
    for &i in items {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = items.len();
    Tensor::new(shape, data).expect("shape matches")
}

pub struct EncodedImage {
    /// `[batch*M, d]`, item-major.
    pub r: Var,
    /// `[batch, d]`
    pub v: Var,
    pub regions: usize,
}

impl EncodedImage {
    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.v)[0]
    }
}

/// Output projection: linear, or linear-leaky-linear when a hidden width is set.
#[derive(Clone, Debug)]
pub struct Head {
    pub layers: Vec<Linear>,
}

impl Head {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d: usize, rng: &mut R) -> Result<Self> {
        let layers = if hidden == 0 {
            vec![Linear::new(store, name, d_in, d, true, rng)?]
        } else {
            vec![
                Linear::new(store, &format!("{name}.hidden"), d_in, hidden, true, rng)?,
                Linear::new(store, &format!("{name}.out"), hidden, d, true, rng)?,
            ]
        };
        Ok(Head { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
            x = l.forward(g, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageConfig,
    pub prefix: String,
    pub convs: Vec<Conv>,
    pub proj_r: Head,
    pub proj_v: Head,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: ImageConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.blocks);
        let mut c_in = 3;
        for b in 1..=config.blocks {
            let c_out = config.channels(b);
            convs.push(Conv::new(store, &format!("{prefix}.conv{b}"), c_in, c_out, 3, 2, 1, rng)?);
            c_in = c_out;
        }
        let h = config.head_hidden;
        let proj_r = Head::new(store, &format!("{prefix}.proj_r"), config.channels(config.region_block), h, config.d, rng)?;
        let proj_v = Head::new(store, &format!("{prefix}.proj_v"), config.pooled_width(), h, config.d, rng)?;
        Ok(ImageEncoder {
            config,
            prefix: prefix.to_string(),
            convs,
            proj_r,
            proj_v,
        })
    }

    pub fn set_trainability(&self, store: &mut ParamStore, profile: Trainability) -> Result<()> {
        let frozen = profile.frozen_blocks(self.config.blocks);
        if frozen > self.config.blocks {
            return Err(Error::Config(format!(
                "cannot freeze {frozen} blocks of a {}-block backbone",
                self.config.blocks
            )));
        }
        store.set_trainable(&format!("{}.", self.prefix), true);
        for b in 1..=frozen {
            store.set_trainable(&format!("{}.conv{b}.", self.prefix), false);
        }
        Ok(())
    }

    /// Number of leading blocks with no trainable parameter.
    pub fn frozen_prefix(&self, store: &ParamStore) -> usize {
        self.convs
            .iter()
            .take_while(|c| !store.get(c.w).trainable && !store.get(c.b).trainable)
            .count()
    }

    fn check_pixels(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "image encoder",
                format!("expected [B, 3, {s}, {s}] pixels, got {:?}", shape),
            ));
        }
        Ok(())
    }

    fn block(&self, g: &mut Graph, x: Var, b: usize) -> Result<Var> {
        let y = self.convs[b - 1].forward(g, x)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Runs the first `upto` blocks outside the gradient tape.
    pub fn precompute(&self, store: &ParamStore, pixels: &Tensor, upto: usize) -> Result<Features> {
        self.check_pixels(pixels.shape())?;
        let upto = upto.min(self.config.blocks);
        let mut g = Graph::with_params(store);
        g.freeze_prefix("");
        let mut x = g.constant(pixels.clone());
        let mut regions = None;
        let mut pools = Vec::with_capacity(upto);
        for b in 1..=upto {
            x = self.block(&mut g, x, b)?;
            if b == self.config.region_block {
                let rows = g.nchw_to_rows(x)?;
                regions = Some(g.value(rows).clone());
            }
            let p = g.global_avg_pool(x)?;
            pools.push(g.value(p).clone());
        }
        Ok(Features {
            after: upto,
            maps: g.value(x).clone(),
            regions,
            pools,
        })
    }

    pub fn encode(&self, g: &mut Graph, pixels: Var) -> Result<EncodedImage> {
        self.check_pixels(g.shape(pixels))?;
        self.encode_from(g, pixels, 0, None, Vec::new())
    }

    /// Encodes from cached activations, applying only the remaining blocks.
    pub fn encode_features(&self, g: &mut Graph, feats: &Features) -> Result<EncodedImage> {
        let regions = feats.regions.as_ref().map(|r| g.constant(r.clone()));
        let pools = feats.pools.iter().map(|p| g.constant(p.clone())).collect();
        // The last block's maps are only needed if blocks remain.
        let x = if feats.after < self.config.blocks {
            g.constant(feats.maps.clone())
        } else {
            g.constant(Tensor::zeros(&[0]))
        };
        self.encode_from(g, x, feats.after, regions, pools)
    }

    fn encode_from(
        &self,
        g: &mut Graph,
        mut x: Var,
        after: usize,
        mut regions: Option<Var>,
        mut pools: Vec<Var>,
    ) -> Result<EncodedImage> {
        for b in after + 1..=self.config.blocks {
            x = self.block(g, x, b)?;
            if b == self.config.region_block {
                regions = Some(g.nchw_to_rows(x)?);
            }
            pools.push(g.global_avg_pool(x)?);
        }
        let pooled = g.concat_cols(&pools)?;
        let regions = regions.ok_or_else(|| Error::Contract("region features never produced".into()))?;
        self.project(g, regions, pooled)
    }

    fn project(&self, g: &mut Graph, regions: Var, pooled: Var) -> Result<EncodedImage> {
        let r = self.proj_r.forward(g, regions)?;
        let v = self.proj_v.forward(g, pooled)?;
        Ok(EncodedImage {
            r,
            v,
            regions: self.config.regions(),
        })
    }
}

/// Converts 8-bit RGB rows (`h*w*3`, row-major, interleaved) to planar `[-1, 1]`.
pub fn rgb8_to_planar(rgb: &[u8], side: usize) -> Vec<f64> {
    let plane = side * side;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = rgb[p * 3 + c] as f64 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`rgb8_to_planar`], clamping to the valid range.
pub fn planar_to_rgb8(planar: &[f64], side: usize) -> Vec<u8> {
    let plane = side * side;
    let mut out = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = ((planar[c * plane + p] + 1.0) * 127.5).round().clamp(0.0, 255.0);
            out[p * 3 + c] = v as u8;
        }
    }
    out
}
