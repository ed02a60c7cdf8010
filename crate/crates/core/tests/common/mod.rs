#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relora::data::Corpus;
use relora::tensor::{Graph, Var};
use relora::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std).collect()
}

/// An input to a gradient check: shape and initial values.
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        Input {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Input::new(shape, randn(rng, n, 1.0))
    }
}

/// Scalar objective `sum(w * f(inputs))` with fixed random weights `w`, so
/// that outputs with constant sums (softmax rows) still have informative
/// gradients.
fn objective<F>(f: &F, inputs: &[Input], weights_seed: u64, grads: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.variable(&i.shape, i.data.clone()))
        .collect::<Result<_>>()?;
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut wr = rng(weights_seed);
    let w = g.constant(&shape, randn(&mut wr, n, 1.0))?;
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted)?;
    let value = g.value(loss)[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    let gr = g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, i)| gr.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; i.data.len()]))
        .collect();
    Ok((value, grads))
}

/// Largest vector-wise relative error `|a - n| / max(|a|, |n|)` between the
/// analytic gradient of each input and its central finite difference.
pub fn max_rel_error<F>(f: F, mut inputs: Vec<Input>, h: f64, weights_seed: u64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = objective(&f, &inputs, weights_seed, true).expect("forward/backward");
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].data.len()];
        for j in 0..inputs[i].data.len() {
            let x0 = inputs[i].data[j];
            inputs[i].data[j] = x0 + h;
            let (fp, _) = objective(&f, &inputs, weights_seed, false).unwrap();
            inputs[i].data[j] = x0 - h;
            let (fm, _) = objective(&f, &inputs, weights_seed, false).unwrap();
            inputs[i].data[j] = x0;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic[i].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 0.0 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}

/// Synthetic byte corpus with some structure, for fast tests.
pub fn synthetic_corpus(len: usize, seed: u64) -> Corpus {
    let words: [&[u8]; 12] = [
        b"the ", b"king ", b"shall ", b"speak ", b"of ", b"love ", b"and ", b"war. ", b"my ", b"lord, ", b"good ",
        b"night.\n",
    ];
    let mut r = rng(seed);
    let mut bytes = Vec::with_capacity(len);
    while bytes.len() < len {
        bytes.extend_from_slice(words[r.random_range(0..words.len())]);
    }
    bytes.truncate(len);
    Corpus::from_bytes(bytes).unwrap()
}

/// Path of the bundled public-domain corpus.
pub fn shakespeare_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt")
}

use relora::lora::wrap_model;
use relora::model::{ModelConfig, ParamId, Transformer};
use relora::tensor::IGNORE_INDEX;

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-6;

/// Relative gradient error of every differentiable op for one seed.
pub fn op_gradcheck_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: Vec<Input>| {
        out.push((name, max_rel_error(f, inputs, FD_STEP, seed ^ 0x5eed)));
    };

    let i = vec![Input::random(&mut r, &[3, 4]), Input::random(&mut r, &[4, 5])];
    check("matmul", &|g, v| g.matmul(v[0], v[1]), i);
    let i = vec![Input::random(&mut r, &[3, 4]), Input::random(&mut r, &[5, 4])];
    check("matmul_nt", &|g, v| g.matmul_nt(v[0], v[1]), i);
    let i = vec![Input::random(&mut r, &[3, 4]), Input::random(&mut r, &[3, 4])];
    check("add", &|g, v| g.add(v[0], v[1]), i);
    let i = vec![Input::random(&mut r, &[3, 4]), Input::random(&mut r, &[3, 4])];
    check("mul", &|g, v| g.mul(v[0], v[1]), i);
    let i = vec![Input::random(&mut r, &[2, 5])];
    check("scale", &|g, v| g.scale(v[0], -0.7), i);
    let i = vec![Input::random(&mut r, &[4, 6])];
    check("silu", &|g, v| g.silu(v[0]), i);
    let i = vec![Input::random(&mut r, &[4, 7])];
    check("softmax", &|g, v| g.softmax(v[0]), i);
    let i = vec![Input::random(&mut r, &[3, 3])];
    check("sum", &|g, v| g.sum(v[0]), i);
    let i = vec![Input::random(&mut r, &[10, 4])];
    check("embedding", &|g, v| g.embedding(v[0], &[3, 0, 3, 9, 7, 3]), i);
    let i = vec![Input::random(&mut r, &[6, 7])];
    check("cross_entropy", &|g, v| g.cross_entropy(v[0], &[1, 6, IGNORE_INDEX, 0, 3, 3]), i);
    let mut gain = Input::random(&mut r, &[6]);
    gain.data.iter_mut().for_each(|x| *x += 1.0);
    let i = vec![Input::random(&mut r, &[5, 6]), gain];
    check("rms_norm", &|g, v| g.rms_norm(v[0], v[1], 1e-5), i);
    let i = vec![Input::random(&mut r, &[6, 8])];
    check("rope", &|g, v| g.rope(v[0], &[0, 1, 2, 7, 11, 30], 2, 10_000.0), i);
    let i = vec![
        Input::random(&mut r, &[10, 8]),
        Input::random(&mut r, &[10, 8]),
        Input::random(&mut r, &[10, 8]),
    ];
    check("causal_attention", &|g, v| g.causal_attention(v[0], v[1], v[2], 2, 5, 2), i);
    out
}

/// Tiny model with every parameter redrawn at a scale where all paths
/// carry signal; `wrapped` also attaches nonzero low-rank factors.
pub fn gradcheck_model(seed: u64, wrapped: bool) -> Transformer<f64> {
    let mut r = rng(seed);
    let cfg = ModelConfig::new(16, 2, 2, 64, 16);
    let mut model = Transformer::<f64>::new(cfg, &mut r).unwrap();
    if wrapped {
        wrap_model(&mut model, 4, 0.25, &mut r).unwrap();
    }
    for (id, t) in model.params_mut() {
        let n = t.numel();
        let noise = randn(&mut r, n, 0.3);
        let is_gain = matches!(id, ParamId::AttnNorm(_) | ParamId::MlpNorm(_) | ParamId::FinalNorm);
        for (x, e) in t.data_mut().iter_mut().zip(noise) {
            *x = if is_gain { 1.0 + e } else { e };
        }
    }
    model
}

/// Worst element-wise relative error over 20 randomly chosen trainable
/// scalars of the tiny model. Components whose true size is below the
/// difference-quotient noise floor are compared absolutely instead.
pub fn model_gradcheck_error(seed: u64, wrapped: bool) -> f64 {
    let mut model = gradcheck_model(seed, wrapped);
    let mut r = rng(seed + 1000);
    let (batch, seq) = (2, 16);
    let inputs: Vec<usize> = (0..batch * seq).map(|_| r.random_range(0..64)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| r.random_range(0..64)).collect();
    model.loss_and_grad(&inputs, &targets, batch, seq).unwrap();

    let trainable: Vec<(ParamId, usize)> = model
        .params()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(id, t)| (id, t.numel()))
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (id, n) = trainable[r.random_range(0..trainable.len())];
        let j = r.random_range(0..n);
        let analytic = model.param(id).unwrap().grad().unwrap()[j];
        let x0 = model.param(id).unwrap().data()[j];
        model.param_mut(id).unwrap().data_mut()[j] = x0 + h;
        let fp = model.loss(&inputs, &targets, batch, seq).unwrap();
        model.param_mut(id).unwrap().data_mut()[j] = x0 - h;
        let fm = model.loss(&inputs, &targets, batch, seq).unwrap();
        model.param_mut(id).unwrap().data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-6 {
            (analytic - numeric).abs() / 1e-6
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    worst
}

use relora::analysis::{accumulated_update_rank, RankTrajectory};
use relora::checkpoint::save_model;
use relora::lora::{merge_and_reinit_all, LoraLinear};
use relora::model::LinearKind;
use relora::tensor::{singular_values, Tensor};

/// Random wrapped layer with trained-looking (nonzero) factors.
pub fn random_lora(r: &mut ChaCha8Rng) -> LoraLinear<f64> {
    let i = r.random_range(2..48);
    let o = r.random_range(2..48);
    let rank = r.random_range(1..=i.min(o));
    let w = Tensor::from_vec(&[i, o], randn(r, i * o, 1.0 / (i as f64).sqrt())).unwrap();
    let mut lora = LoraLinear::wrap(w, rank, 1.0 / rank as f64, r).unwrap();
    let a = randn(r, i * rank, 1.0);
    let b = randn(r, rank * o, 0.5);
    lora.set_factors(a, b).unwrap();
    lora
}

/// `max |x W' - (x W + s x A B)|` across one merge, on a random batch.
pub fn merge_trial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut lora = random_lora(&mut r);
    let n = r.random_range(1..9);
    let x = Tensor::from_vec(&[n, lora.in_features()], randn(&mut r, n * lora.in_features(), 1.0)).unwrap();
    let before = lora.forward(&x).unwrap();
    lora.merge_and_reinit(&mut r).unwrap();
    assert!(lora.lora_b().data().iter().all(|&v| v == 0.0));
    let after = x.matmul(lora.base()).unwrap();
    before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `(numerical rank of s A B at 1e-10 * sigma_max, r)` for a random layer.
pub fn lora_rank_trial(seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let lora = random_lora(&mut r);
    let sv = singular_values(&lora.delta_f64(), lora.in_features(), lora.out_features());
    let cutoff = 1e-10 * sv[0];
    (sv.iter().filter(|&&s| s > cutoff).count(), lora.rank())
}

/// Writes a three-reset run in which cycle `k` trains only along basis
/// directions `k*r .. (k+1)*r` of every projection, then reads back the
/// accumulated-update ranks.
pub fn orthogonal_subspace_run(dir: &std::path::Path, rank: usize) -> RankTrajectory {
    let mut r = rng(99);
    let mut model = Transformer::<f64>::new(ModelConfig::new(16, 2, 2, 64, 16), &mut r).unwrap();
    wrap_model(&mut model, rank, 1.0 / rank as f64, &mut r).unwrap();
    save_model(&dir.join("warm_start.ckpt"), &model).unwrap();
    for cycle in 0..3 {
        for block in model.blocks_mut() {
            for kind in LinearKind::ALL {
                let lora = block.linear_mut(kind).as_lora_mut().unwrap();
                let (i, o) = (lora.in_features(), lora.out_features());
                let mut a = vec![0.0; i * rank];
                let mut b = vec![0.0; rank * o];
                for j in 0..rank {
                    let d = cycle * rank + j;
                    a[d * rank + j] = 1.0 + 0.1 * j as f64;
                    b[j * o + d] = 0.5 + r.random::<f64>();
                }
                lora.set_factors(a, b).unwrap();
            }
        }
        merge_and_reinit_all(&mut model, &mut r).unwrap();
        save_model(&dir.join(format!("reset_{:03}.ckpt", cycle + 1)), &model).unwrap();
    }
    accumulated_update_rank(dir).unwrap()
}

use relora::optim::JaggedSchedule;

/// Closed-form jagged schedule, written out segment by segment.
pub fn reference_lr(s: &JaggedSchedule, t: usize) -> f64 {
    let peak = s.peak_lr;
    let floor = s.min_lr_ratio * peak;
    let cosine = |u: usize| -> f64 {
        let w0 = s.init_warmup_steps;
        if u <= w0 {
            return peak;
        }
        let progress = (u - w0) as f64 / (s.total_steps - w0) as f64;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    let w = s.restart_warmup_steps;
    if let Some(&ti) = s.restart_steps.iter().rfind(|&&ti| ti <= t) {
        if t - ti < w {
            let target = cosine((ti + w).min(s.total_steps));
            return target * (t - ti) as f64 / w as f64;
        }
    }
    if t < s.init_warmup_steps {
        return peak * t as f64 / s.init_warmup_steps as f64;
    }
    cosine(t)
}

/// Random valid schedule with restarts after the initial warmup.
pub fn random_schedule(r: &mut ChaCha8Rng) -> JaggedSchedule {
    let w0 = r.random_range(1..200);
    let q = r.random_range(20..400);
    let n = r.random_range(0..6);
    let w = r.random_range(1..=q);
    let first = w0 + r.random_range(0..300);
    let restarts: Vec<usize> = (0..n).map(|k| first + k * q).collect();
    let total = restarts.last().copied().unwrap_or(first) + r.random_range(0..500) + 1;
    JaggedSchedule {
        peak_lr: 10f64.powf(r.random_range(-5.0..-1.0)),
        total_steps: total,
        init_warmup_steps: w0,
        restart_steps: restarts,
        restart_warmup_steps: w,
        min_lr_ratio: if r.random_bool(0.5) { 0.0 } else { r.random_range(0.0..0.5) },
    }
}

/// Survivors of magnitude pruning by rank counting: entry `i` survives iff
/// fewer than `n - k` entries outrank it, where larger magnitude outranks
/// and equal magnitudes are ordered by index.
pub fn prune_oracle(values: &[f64], ratio: f64) -> Vec<f64> {
    let n = values.len();
    let k = (ratio * n as f64).floor() as usize;
    let keep = n - k;
    (0..n)
        .map(|i| {
            let outranked_by = (0..n)
                .filter(|&j| {
                    let (a, b) = (values[j].abs(), values[i].abs());
                    a > b || (a == b && j < i)
                })
                .count();
            if outranked_by < keep {
                values[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// Random moment-like tensor; every other seed draws from a handful of
/// values so that ties are common.
pub fn prune_input(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let n = r.random_range(1..400);
    if seed.is_multiple_of(2) {
        randn(&mut r, n, 1.0)
    } else {
        (0..n).map(|_| [0.0, 0.5, -0.5, 1.0, -2.0][r.random_range(0..5)]).collect()
    }
}

use relora::config::{Mode, RunManifest};

/// Small run: warm start 20, three resets every 20 steps, 80 steps total.
pub fn tiny_manifest(mode: Mode, out: &std::path::Path) -> RunManifest {
    let mut m = RunManifest::new(mode, ModelConfig::new(32, 4, 2, 256, 32));
    m.seed = 5;
    m.batch_size = 4;
    m.peak_lr = 3e-3;
    m.init_warmup_steps = 5;
    m.relora.rank = Some(4);
    m.relora.warm_start_steps = 20;
    m.relora.reset_period = 20;
    m.relora.num_resets = 3;
    m.relora.restart_warmup_steps = 5;
    m.eval_windows = 16;
    m.log_every = 1000;
    m.out_dir = Some(out.to_path_buf());
    m
}
