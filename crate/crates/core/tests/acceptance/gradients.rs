//! Criterion 1: reverse-mode gradients against central differences, for
//! every differentiable graph operation and for the matching, captioning and
//! adversarial loss graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistext::gradcheck::{check_gradients, check_param_gradients, FD_STEP};
use vistext::image::EncodedImage;
use vistext::itm::{Captioner, CaptionerConfig, TeacherBatch};
use vistext::text::{EncodedText, TextConfig, TextEncoder, TokenBatch, RESERVED};
use vistext::tim::{discriminator_loss, downsample_to, generator_loss, Discriminator, Generator, TimConfig};
use vistext::vta::{matching_loss, Gammas};
use vistext::{Graph, ParamStore, Result, Tensor, Var};

use crate::Verdict;

const SEEDS: u64 = 10;
const TOL: f64 = 1e-4;
/// Parameter elements sampled per tensor in the model-level checks.
const PER_PARAM: usize = 6;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    /// Kept at least 0.05 from zero, for kinked activations.
    OffKink,
    /// Inside (0.2, 0.8), within the log clamp.
    Unit,
}

fn sample(shape: &[usize], dom: Domain, rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    match dom {
        Domain::Any => t,
        Domain::OffKink => t.map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x }),
        Domain::Unit => Tensor::uniform(shape, 0.2, 0.8, rng),
    }
}

/// Random fixed projection to a scalar, so gradients are not all ones.
fn project(g: &mut Graph, x: Var) -> Result<Var> {
    let w = Tensor::uniform(g.shape(x), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn case(shapes: &[&[usize]], dom: Domain, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> (Vec<Vec<usize>>, Domain, OpFn) {
    (shapes.iter().map(|s| s.to_vec()).collect(), dom, Box::new(f))
}

// `detach` is deliberately inconsistent with finite differences; its
// gradient cut is covered by the graph property tests.
fn op_cases() -> Vec<(&'static str, (Vec<Vec<usize>>, Domain, OpFn))> {
    use Domain::*;
    let keep: Vec<bool> = (0..12).map(|i| i % 5 != 3).collect();
    vec![
        ("matmul", case(&[&[3, 4], &[4, 2]], Any, |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y) })),
        ("matmul_nt", case(&[&[3, 4], &[2, 4]], Any, |g, v| { let y = g.matmul_nt(v[0], v[1])?; project(g, y) })),
        ("matmul_tn", case(&[&[4, 3], &[4, 2]], Any, |g, v| { let y = g.matmul_tn(v[0], v[1])?; project(g, y) })),
        ("batch_matmul", case(&[&[2, 3, 4], &[2, 4, 2]], Any, |g, v| { let y = g.batch_matmul(v[0], false, v[1], false)?; project(g, y) })),
        ("batch_matmul_t", case(&[&[2, 4, 3], &[2, 2, 4]], Any, |g, v| { let y = g.batch_matmul(v[0], true, v[1], true)?; project(g, y) })),
        ("transpose", case(&[&[3, 4]], Any, |g, v| { let y = g.transpose(v[0])?; project(g, y) })),
        ("add", case(&[&[3, 2], &[3, 2]], Any, |g, v| { let y = g.add(v[0], v[1])?; project(g, y) })),
        ("sub", case(&[&[3, 2], &[3, 2]], Any, |g, v| { let y = g.sub(v[0], v[1])?; project(g, y) })),
        ("mul", case(&[&[3, 2], &[3, 2]], Any, |g, v| { let y = g.mul(v[0], v[1])?; project(g, y) })),
        ("add_bias", case(&[&[3, 4], &[4]], Any, |g, v| { let y = g.add_bias(v[0], v[1])?; project(g, y) })),
        ("scale", case(&[&[5]], Any, |g, v| { let y = g.scale(v[0], -1.7); project(g, y) })),
        ("add_scalar", case(&[&[5]], Any, |g, v| { let y = g.add_scalar(v[0], 0.3); let y = g.mul(y, y)?; project(g, y) })),
        ("relu", case(&[&[6]], OffKink, |g, v| { let y = g.relu(v[0]); project(g, y) })),
        ("leaky_relu", case(&[&[6]], OffKink, |g, v| { let y = g.leaky_relu(v[0], 0.2); project(g, y) })),
        ("tanh", case(&[&[6]], Any, |g, v| { let y = g.tanh(v[0]); project(g, y) })),
        ("sigmoid", case(&[&[6]], Any, |g, v| { let y = g.sigmoid(v[0]); project(g, y) })),
        ("exp", case(&[&[6]], Any, |g, v| { let y = g.exp(v[0]); project(g, y) })),
        ("ln_clamped", case(&[&[6]], Unit, |g, v| { let y = g.ln_clamped(v[0], 0.1, 0.9); project(g, y) })),
        ("softmax_rows", case(&[&[3, 4]], Any, |g, v| { let y = g.softmax(v[0], 1, None)?; project(g, y) })),
        ("softmax_cols_masked", case(&[&[3, 4]], Any, move |g, v| { let y = g.softmax(v[0], 0, Some(&keep))?; project(g, y) })),
        ("softmax_3d", case(&[&[2, 3, 2]], Any, |g, v| { let y = g.softmax(v[0], 1, None)?; project(g, y) })),
        ("log_softmax", case(&[&[3, 4]], Any, |g, v| { let y = g.log_softmax(v[0], 0)?; project(g, y) })),
        ("layer_norm", case(&[&[3, 5], &[5], &[5]], Any, |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; project(g, y) })),
        ("sum", case(&[&[3, 2]], Any, |g, v| { let y = g.sum(v[0]); g.mul(y, y) })),
        ("mean", case(&[&[3, 2]], Any, |g, v| { let y = g.mean(v[0]); g.mul(y, y) })),
        ("mean_rows", case(&[&[3, 4]], Any, |g, v| { let y = g.mean_rows(v[0])?; project(g, y) })),
        ("logsumexp", case(&[&[5]], Any, |g, v| g.logsumexp(v[0]))),
        ("logsumexp_axis", case(&[&[3, 4]], Any, |g, v| { let y = g.logsumexp_axis(v[0], 1)?; project(g, y) })),
        ("cosine_rows", case(&[&[3, 4], &[3, 4]], Any, |g, v| { let y = g.cosine_rows(v[0], v[1], 1e-8)?; project(g, y) })),
        ("stack", case(&[&[], &[], &[]], Any, |g, v| { let a = g.mul(v[0], v[1])?; let y = g.stack(&[a, v[2], v[0]], &[3])?; project(g, y) })),
        ("pick", case(&[&[3, 4]], Any, |g, v| { let y = g.pick(v[0], &[0, 5, 5, 11])?; project(g, y) })),
        ("reshape", case(&[&[3, 4]], Any, |g, v| { let y = g.reshape(v[0], &[2, 6])?; project(g, y) })),
        ("slice_rows", case(&[&[4, 3]], Any, |g, v| { let y = g.slice_rows(v[0], 1, 2)?; project(g, y) })),
        ("slice_cols", case(&[&[3, 5]], Any, |g, v| { let y = g.slice_cols(v[0], 1, 4)?; project(g, y) })),
        ("concat_rows", case(&[&[2, 3], &[1, 3]], Any, |g, v| { let y = g.concat_rows(&[v[0], v[1], v[0]])?; project(g, y) })),
        ("concat_cols", case(&[&[3, 2], &[3, 1]], Any, |g, v| { let y = g.concat_cols(&[v[0], v[1]])?; project(g, y) })),
        ("gather_rows", case(&[&[4, 3]], Any, |g, v| { let y = g.gather_rows(v[0], &[3, 0, 3, 1])?; project(g, y) })),
        ("conv2d", case(&[&[2, 2, 5, 5], &[3, 18], &[3]], Any, |g, v| { let y = g.conv2d(v[0], v[1], v[2], 3, 1, 1)?; project(g, y) })),
        ("conv2d_stride2", case(&[&[1, 2, 6, 6], &[2, 18], &[2]], Any, |g, v| { let y = g.conv2d(v[0], v[1], v[2], 3, 2, 1)?; project(g, y) })),
        ("conv2d_1x1", case(&[&[2, 3, 2, 2], &[2, 3], &[2]], Any, |g, v| { let y = g.conv2d(v[0], v[1], v[2], 1, 1, 0)?; project(g, y) })),
        ("upsample2", case(&[&[1, 2, 2, 3]], Any, |g, v| { let y = g.upsample2(v[0])?; project(g, y) })),
        ("avg_pool2", case(&[&[2, 1, 4, 4]], Any, |g, v| { let y = g.avg_pool2(v[0])?; project(g, y) })),
        ("global_avg_pool", case(&[&[2, 3, 2, 3]], Any, |g, v| { let y = g.global_avg_pool(v[0])?; project(g, y) })),
        ("nchw_to_rows", case(&[&[2, 3, 2, 2]], Any, |g, v| { let y = g.nchw_to_rows(v[0])?; project(g, y) })),
        ("broadcast_spatial", case(&[&[2, 3]], Any, |g, v| { let y = g.broadcast_spatial(v[0], 2, 3)?; project(g, y) })),
        ("concat_channels", case(&[&[2, 1, 2, 2], &[2, 2, 2, 2]], Any, |g, v| { let y = g.concat_channels(v[0], v[1])?; project(g, y) })),
    ]
}

struct Tally {
    worst: f64,
    worst_name: String,
    checks: usize,
    failures: Vec<String>,
}

impl Tally {
    fn record(&mut self, name: &str, seed: u64, r: Result<vistext::gradcheck::GradReport>) {
        self.checks += 1;
        match r {
            Ok(rep) => {
                if rep.max_rel_err > self.worst {
                    self.worst = rep.max_rel_err;
                    self.worst_name = name.to_string();
                }
                if rep.max_rel_err > TOL || !rep.max_rel_err.is_finite() {
                    self.failures.push(format!("{name}/seed{seed}: {:.2e}", rep.max_rel_err));
                }
            }
            Err(e) => self.failures.push(format!("{name}/seed{seed}: {e}")),
        }
    }
}

/// Random padded token batch: `b` items of 1..=n real words.
fn token_batch(b: usize, n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..rng.random_range(1..=n)).map(|_| rng.random_range(RESERVED..vocab)).collect())
        .collect();
    TokenBatch::from_sequences(&seqs, n)
}

fn random_masks(b: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..b)
        .map(|_| {
            let k = rng.random_range(1..=n);
            (0..n).map(|j| j < k).collect()
        })
        .collect()
}

fn matching_inputs(t: &mut Tally, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n, m, d) = (3, 4, 5, 6);
    let masks = random_masks(b, n, &mut rng);
    let inputs = vec![
        Tensor::randn(&[b * n, d], 1.0, &mut rng),
        Tensor::randn(&[b, d], 1.0, &mut rng),
        Tensor::randn(&[b * m, d], 1.0, &mut rng),
        Tensor::randn(&[b, d], 1.0, &mut rng),
    ];
    let r = check_gradients(&inputs, FD_STEP, |g, v| {
        let text = EncodedText {
            w: v[0],
            s: v[1],
            masks: masks.clone(),
            n,
            attention: Vec::new(),
        };
        let image = EncodedImage {
            r: v[2],
            v: v[3],
            regions: m,
        };
        Ok(matching_loss(g, &image, &text, Gammas::default())?.total)
    });
    t.record("matching loss", seed, r);
}

fn matching_text_params(t: &mut Tally, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, d, vocab) = (3, 4, 8, 12);
    let cfg = TextConfig {
        d,
        heads: 2,
        layers: 1,
        ffn: 16,
        n_max: 4,
    };
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, "text", cfg, vocab, &mut rng).unwrap();
    let tb = token_batch(b, 4, vocab, &mut rng);
    let r = Tensor::randn(&[b * m, d], 1.0, &mut rng);
    let v = Tensor::randn(&[b, d], 1.0, &mut rng);
    let ids = store.ids_with_prefix("text.");
    let rep = check_param_gradients(&mut store, &ids, PER_PARAM, FD_STEP, &mut rng, |g| {
        let et = enc.encode(g, &tb)?;
        let image = EncodedImage {
            r: g.constant(r.clone()),
            v: g.constant(v.clone()),
            regions: m,
        };
        Ok(matching_loss(g, &image, &et, Gammas::default())?.total)
    });
    t.record("matching loss through the text encoder", seed, rep);
}

fn captioner_setup(seed: u64) -> (ParamStore, Captioner, TeacherBatch, Tensor, ChaCha8Rng, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, vocab) = (2, 3, 9);
    let cfg = CaptionerConfig {
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d: 8,
        ffn: 12,
        n_max: 4,
        vocab,
    };
    let mut store = ParamStore::new();
    let cap = Captioner::new(&mut store, "cap", cfg, &mut rng).unwrap();
    let caps: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..rng.random_range(1..=4)).map(|_| rng.random_range(RESERVED..vocab)).collect())
        .collect();
    let tb = TeacherBatch::new(&caps, 4);
    let r = Tensor::randn(&[b * m, 8], 1.0, &mut rng);
    (store, cap, tb, r, rng, b, m)
}

fn captioner(t: &mut Tally, seed: u64) {
    let (mut store, cap, tb, r, mut rng, b, m) = captioner_setup(seed);
    // Region features enter as a stored tensor so they are checked alongside the weights.
    let rid = store.register("regions", r).unwrap();
    let mut ids = store.ids_with_prefix("cap.");
    ids.push(rid);
    let rep = check_param_gradients(&mut store, &ids, PER_PARAM, FD_STEP, &mut rng, |g| {
        let rv = g.param(rid);
        let mem = cap.encode_regions(g, rv, b, m)?;
        cap.captioning_loss(g, &mem, &tb)
    });
    t.record("captioning loss", seed, rep);
}

fn tim_setup(seed: u64) -> (ParamStore, Generator, Vec<Discriminator>, Tensor, Tensor, Tensor, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TimConfig {
        z_dim: 3,
        stages: 2,
        base_res: 8,
        gen_channels: 3,
        disc_channels: 3,
        d: 4,
    };
    let b = 2;
    let mut store = ParamStore::new();
    let gen = Generator::new(&mut store, "gen", cfg.clone(), &mut rng).unwrap();
    let discs: Vec<Discriminator> = (0..cfg.stages)
        .map(|k| Discriminator::new(&mut store, &format!("disc.{k}"), cfg.resolution(k), cfg.disc_channels, cfg.d, &mut rng).unwrap())
        .collect();
    let s = Tensor::randn(&[b, cfg.d], 1.0, &mut rng);
    let z = Tensor::uniform(&[b, cfg.z_dim], -1.0, 1.0, &mut rng);
    let real = Tensor::uniform(&[b, 3, cfg.resolution(cfg.stages - 1), cfg.resolution(cfg.stages - 1)], -1.0, 1.0, &mut rng);
    (store, gen, discs, s, z, real, rng)
}

fn generator_graph(g: &mut Graph, gen: &Generator, discs: &[Discriminator], s: Var, z: Var) -> Result<Var> {
    let fakes = gen.generate(g, s, z)?;
    let mut total = None;
    for (k, f) in fakes.into_iter().enumerate() {
        let (pu, pc) = discs[k].forward(g, f, s)?;
        let l = generator_loss(g, pu, pc)?;
        total = Some(match total {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

fn adversarial(t: &mut Tally, seed: u64) {
    let (mut store, gen, discs, s, z, real, mut rng) = tim_setup(seed);

    let sid = store.register("sentence", s.clone()).unwrap();
    let zid = store.register("noise", z.clone()).unwrap();
    let mut ids = store.ids_with_prefix("gen.");
    ids.extend([sid, zid]);
    let rep = check_param_gradients(&mut store, &ids, PER_PARAM, FD_STEP, &mut rng, |g| {
        let (s, z) = (g.param(sid), g.param(zid));
        generator_graph(g, &gen, &discs, s, z)
    });
    t.record("generator loss", seed, rep);

    let realid = store.register("real", real).unwrap();
    let mut ids = store.ids_with_prefix("disc.");
    ids.push(realid);
    let fakes: Vec<Tensor> = {
        let mut g = Graph::with_params(&store);
        let (sv, zv) = (g.constant(s.clone()), g.constant(z.clone()));
        let out = gen.generate(&mut g, sv, zv).unwrap();
        out.iter().map(|&f| g.value(f).clone()).collect()
    };
    let rep = check_param_gradients(&mut store, &ids, PER_PARAM, FD_STEP, &mut rng, |g| {
        let sv = g.constant(s.clone());
        let realv = g.param(realid);
        let mut total = None;
        for (k, d) in discs.iter().enumerate() {
            let rk = downsample_to(g, realv, d.res)?;
            let fk = g.constant(fakes[k].clone());
            let (ru, rc) = d.forward(g, rk, sv)?;
            let (fu, fc) = d.forward(g, fk, sv)?;
            let l = discriminator_loss(g, ru, fu, rc, fc)?;
            total = Some(match total {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        Ok(total.expect("at least one stage"))
    });
    t.record("discriminator loss", seed, rep);
}

pub fn criterion() -> Verdict {
    let mut t = Tally {
        worst: 0.0,
        worst_name: String::new(),
        checks: 0,
        failures: Vec::new(),
    };
    let cases = op_cases();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (name, (shapes, dom, f)) in &cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| sample(s, *dom, &mut rng)).collect();
            t.record(name, seed, check_gradients(&inputs, FD_STEP, |g, v| f(g, v)));
        }
        matching_inputs(&mut t, seed);
        matching_text_params(&mut t, seed);
        captioner(&mut t, seed);
        adversarial(&mut t, seed);
    }
    let detail = format!(
        "{} checks over {} ops and 4 loss graphs (5 checks) x {SEEDS} seeds, worst rel err {:.2e} ({}), tol {TOL:.0e}",
        t.checks,
        cases.len(),
        t.worst,
        t.worst_name
    );
    if t.failures.is_empty() {
        Verdict::new(true, detail)
    } else {
        Verdict::new(false, format!("{detail}; failing: {}", t.failures.join(", ")))
    }
}
