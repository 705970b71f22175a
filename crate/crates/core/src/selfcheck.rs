//! Gradient and invariant checks runnable from the command line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{gelu_scalar, Tape, Tensor, Var};
use crate::data::{generate, temporal_shift_with, GenerateConfig, ShiftConfig};
use crate::error::{Error, Result};
use crate::model::tokens::masked_count;
use crate::model::{ema_update, random_tube_mask, CmaeModel, Ctx, MaskPlan, ModelConfig};
use crate::objectives::{cross_entropy, infonce, recon_loss, total_loss};
use crate::trainer::{lr_schedule, TrainConfig};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

type GradFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn grad_case(name: &str, inputs: Vec<Tensor<f64>>, f: GradFn) -> CheckResult {
    match check_gradients(name, &inputs, GRAD_STEP, f) {
        Ok(r) => CheckResult::new(
            &format!("grad/{name}"),
            r.passes(GRAD_TOLERANCE),
            format!("max relative error {:.3e}", r.max_rel_error),
        ),
        Err(e) => CheckResult::new(&format!("grad/{name}"), false, format!("error: {e}")),
    }
}

/// Central-difference checks for every differentiable primitive and loss.
pub fn gradient_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::normal(shape.to_vec(), 1.0, &mut rng);
    let positive = |t: Tensor<f64>| t.map(|v| v.abs() + 0.5);

    let mut cases: Vec<(&str, Vec<Tensor<f64>>, GradFn)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| Ok(t.matmul(v[0], v[1])?))),
        ("matmul_batched", vec![r(&[2, 3, 4]), r(&[2, 4, 3])], Box::new(|t, v| Ok(t.matmul(v[0], v[1])?))),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| Ok(t.add(v[0], v[1])?))),
        ("add_broadcast", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| Ok(t.add(v[0], v[1])?))),
        ("sub", vec![r(&[2, 5]), r(&[2, 5])], Box::new(|t, v| Ok(t.sub(v[0], v[1])?))),
        ("mul", vec![r(&[2, 5]), r(&[2, 5])], Box::new(|t, v| Ok(t.mul(v[0], v[1])?))),
        ("mul_broadcast", vec![r(&[2, 3, 4]), r(&[3, 4])], Box::new(|t, v| Ok(t.mul(v[0], v[1])?))),
        ("scale", vec![r(&[4])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("sum", vec![r(&[3, 3])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![r(&[3, 3])], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("mean_axis0", vec![r(&[3, 4])], Box::new(|t, v| Ok(t.mean_axis(v[0], 0)?))),
        ("mean_axis1", vec![r(&[2, 3, 4])], Box::new(|t, v| Ok(t.mean_axis(v[0], 1)?))),
        ("gather_rows", vec![r(&[4, 3])], Box::new(|t, v| Ok(t.gather_rows(v[0], &[2, 0, 2, 3])?))),
        ("softmax", vec![r(&[3, 5])], Box::new(|t, v| Ok(t.softmax(v[0], 1)?))),
        ("softmax_axis0", vec![r(&[3, 5])], Box::new(|t, v| Ok(t.softmax(v[0], 0)?))),
        ("log_softmax", vec![r(&[3, 5])], Box::new(|t, v| Ok(t.log_softmax(v[0], 1)?))),
        (
            "layer_norm",
            vec![r(&[3, 6]), r(&[6]), r(&[6])],
            Box::new(|t, v| Ok(t.layer_norm(v[0], v[1], v[2], 1e-5)?)),
        ),
        ("gelu", vec![r(&[10])], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("square", vec![r(&[5])], Box::new(|t, v| Ok(t.square(v[0])))),
        ("log", vec![positive(r(&[5]))], Box::new(|t, v| Ok(t.log(v[0])))),
        ("exp", vec![r(&[5])], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("cosine_similarity", vec![r(&[3, 4]), r(&[2, 4])], Box::new(|t, v| Ok(t.cosine_similarity(v[0], v[1])?))),
        ("concat_axis0", vec![r(&[2, 3]), r(&[1, 3])], Box::new(|t, v| Ok(t.concat(&[v[0], v[1]], 0)?))),
        ("concat_axis1", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| Ok(t.concat(&[v[0], v[1]], 1)?))),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| Ok(t.reshape(v[0], &[3, 4])?))),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|t, v| Ok(t.permute(v[0], &[2, 0, 1])?))),
        ("transpose", vec![r(&[2, 5])], Box::new(|t, v| Ok(t.transpose(v[0])?))),
        (
            "attention",
            vec![r(&[4, 6]), r(&[6, 6]), r(&[6, 6]), r(&[6, 6])],
            Box::new(|t, v| {
                let q = t.matmul(v[0], v[1])?;
                let k = t.matmul(v[0], v[2])?;
                let val = t.matmul(v[0], v[3])?;
                let kt = t.transpose(k)?;
                let s = t.matmul(q, kt)?;
                let s = t.scale(s, 1.0 / 6f64.sqrt());
                let a = t.softmax(s, 1)?;
                Ok(t.matmul(a, val)?)
            }),
        ),
        ("infonce", vec![r(&[5, 4]), r(&[5, 4])], Box::new(|t, v| infonce(t, v[0], v[1], 0.2))),
        ("infonce_low_tau", vec![r(&[4, 3]), r(&[4, 3])], Box::new(|t, v| infonce(t, v[0], v[1], 0.07))),
        ("recon_loss", vec![r(&[6, 8]), r(&[6, 8])], Box::new(|t, v| recon_loss(t, v[0], v[1]))),
        (
            "total_loss",
            vec![r(&[3, 4]), r(&[3, 4]), r(&[3, 2]), r(&[3, 2])],
            Box::new(|t, v| {
                let lr = recon_loss(t, v[0], v[1])?;
                let lc = infonce(t, v[2], v[3], 0.2)?;
                Ok(total_loss(t, lr, lc, 0.5, 0.2)?.0)
            }),
        ),
        ("cross_entropy", vec![r(&[4, 3])], Box::new(|t, v| cross_entropy(t, v[0], &[0, 2, 1, 2]))),
    ];
    cases.drain(..).map(|(name, inputs, f)| grad_case(name, inputs, f)).collect()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        patch: 8,
        d_model: 12,
        depth: 1,
        heads: 2,
        d_proj: 6,
        decoder_width: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        init_seed: 5,
        ..ModelConfig::default()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult::new(name, passed, detail),
        Err(e) => CheckResult::new(name, false, format!("error: {e}")),
    }
}

/// Closed-form loss values and structural properties.
pub fn invariant_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(check("infonce/two_sample_closed_form", || {
        let mut t = Tape::new();
        let y = t.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0])?);
        let l = infonce(&mut t, y, y, 1.0)?;
        let v = t.value(l).item();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        Ok((close(v, expect, 1e-9), format!("{v} vs {expect}")))
    }));
    out.push(check("infonce/chance_level", || {
        let mut t = Tape::new();
        let y = t.constant(Tensor::from_f64(vec![2, 2], &[1.0, 1.0, 1.0, 1.0])?);
        let l = infonce(&mut t, y, y, 0.2)?;
        let v = t.value(l).item();
        Ok((close(v, 2f64.ln(), 1e-9), format!("{v} vs ln 2")))
    }));
    out.push(check("mask/exact_count", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (n, ratio) in [(64, 0.9), (1568, 0.9), (10, 0.5), (64, 0.0)] {
            let plan = random_tube_mask(n, ratio, &mut rng)?;
            if plan.masked.len() != masked_count(n, ratio) || plan.visible.len() + plan.masked.len() != n {
                return Ok((false, format!("N={n} ratio={ratio}: {} masked", plan.masked.len())));
            }
        }
        Ok((masked_count(1568, 0.9) == 1411, "floor(ratio*N) masked".into()))
    }));
    out.push(check("gelu/shape", || {
        let ok = gelu_scalar(0.0f64) == 0.0
            && (-75..300).all(|i| gelu_scalar(i as f64 / 100.0 + 0.01) > gelu_scalar(i as f64 / 100.0));
        Ok((ok, "gelu(0)=0 and increasing above its minimum".into()))
    }));
    out.push(check("ema/formula", || {
        let mut target = Tensor::from_f64(vec![2], &[1.0, -1.0])?;
        let online = Tensor::from_f64(vec![2], &[0.0, 1.0])?;
        ema_update(&mut target, &online, 0.996)?;
        let ok = close(target.data()[0], 0.996, 1e-15) && close(target.data()[1], -0.992, 1e-15);
        Ok((ok, format!("{:?}", target.data())))
    }));
    out.push(check("schedule/continuity", || {
        let cfg = TrainConfig::pretrain();
        let spe = 1000;
        let j = (cfg.warmup_epochs * spe) as u64;
        let eff = cfg.effective_lr();
        let at = lr_schedule(j, spe, &cfg);
        let ok = at == eff && close(lr_schedule(j - 1, spe, &cfg), eff, eff * 1e-3) && close(lr_schedule(j + 1, spe, &cfg), eff, eff * 1e-3);
        Ok((ok, format!("lr at junction {at}, effective {eff}")))
    }));
    out.push(check("shift/zero_shift_identical", || {
        let ds = generate(&GenerateConfig {
            num_videos: 4,
            t_total: 24,
            height: 16,
            width: 16,
            seed: 3,
            ..GenerateConfig::default()
        })?;
        let cfg = ShiftConfig {
            max_shift: 0,
            ..ShiftConfig::default()
        };
        let pair = temporal_shift_with(&ds, 1, 2, &cfg, 0)?;
        Ok((pair.online == pair.target, "p=0 views are pixel-identical".into()))
    }));
    out.push(check("model/masked_pixels_ignored", masked_pixels_ignored));
    out.push(check("model/target_gradient_zero", target_gradient_zero));
    out
}

fn masked_pixels_ignored() -> Result<(bool, String)> {
    let model = CmaeModel::<f64>::new(tiny_model())?;
    let n = model.num_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens = Tensor::normal(vec![n, model.token_dim()], 1.0, &mut rng);
    let plan = random_tube_mask(n, 0.75, &mut rng)?;
    let mut perturbed = tokens.clone();
    let d = model.token_dim();
    for &i in &plan.masked {
        for v in &mut perturbed.data_mut()[i * d..(i + 1) * d] {
            *v += 100.0;
        }
    }
    let encode = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut ctx = Ctx::frozen(&model.params);
        let z = model.encode_online(&mut ctx, std::slice::from_ref(t), std::slice::from_ref(&plan))?;
        Ok(ctx.value(z).clone())
    };
    let same = encode(&tokens)? == encode(&perturbed)?;
    Ok((same, "online encoding unchanged by masked-token perturbation".into()))
}

fn target_gradient_zero() -> Result<(bool, String)> {
    let model = CmaeModel::<f64>::new(tiny_model())?;
    let n = model.num_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch = 3;
    let tokens: Vec<Tensor<f64>> = (0..batch)
        .map(|_| Tensor::normal(vec![n, model.token_dim()], 1.0, &mut rng))
        .collect();
    let plans: Vec<MaskPlan> = (0..batch)
        .map(|_| random_tube_mask(n, 0.75, &mut rng))
        .collect::<Result<_>>()?;
    let all: Vec<_> = model.params.ids().collect();
    let mut ctx = Ctx::new(&model.params, &all);
    let z_vis = model.encode_online(&mut ctx, &tokens, &plans)?;
    let y_s = model.contrastive_feature(&mut ctx, z_vis, &plans)?;
    let y = model.project_online(&mut ctx, y_s)?;
    let z = ctx.constant(model.target_projection(&tokens)?);
    let loss = infonce(&mut ctx.tape, y, z, 0.2)?;
    let mut grads = ctx.tape.backward(loss)?;
    let targets = model.target_params();
    let g = ctx.param_grads(&mut grads, &targets);
    let zero = g.iter().all(|t| t.data().iter().all(|&v| v == 0.0));
    if targets.is_empty() {
        return Err(Error::InvalidConfig("model has no target parameters".into()));
    }
    Ok((zero, format!("{} target tensors receive zero gradient", targets.len())))
}

/// Every check, gradients first.
pub fn run_all() -> Vec<CheckResult> {
    let mut all = gradient_suite(0);
    all.extend(invariant_suite());
    all
}
