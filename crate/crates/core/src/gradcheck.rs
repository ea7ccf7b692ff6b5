//! Finite-difference verification of every hand-written VJP, in `f64`.
//!
//! Each check builds a scalar `L = ⟨u, f(x)⟩` for a random cotangent `u`,
//! takes the analytic gradient from the VJP, and compares it against the
//! central difference `(L(x + h·v) − L(x − h·v)) / 2h` along random unit
//! probe directions `v` (or single coordinates for the composed model).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::encoder::{self, EncoderConfig, WindowFrame};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_points, bilinear_sample_points_vjp, CameraModel, Pose2};
use crate::model::{Model, ModelConfig};
use crate::nncore::attention::PROJ_NAMES;
use crate::nncore::*;
use crate::renderer::{self, RenderHeadConfig};
use crate::training::mse_loss;

/// Relative tolerance for single operators.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Relative tolerance for composed networks.
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
pub const OP_STEP: f64 = 1e-4;
pub const COMPOSED_STEP: f64 = 1e-5;
/// Both derivatives below this magnitude count as agreeing (structural zeros).
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale <= ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

type Inputs = Vec<Tensor<f64>>;

fn perturbed(x: &Inputs, v: &Inputs, s: f64) -> Inputs {
    x.iter()
        .zip(v)
        .map(|(a, b)| a.zip_map(b, |p, q| p + s * q).expect("same shapes"))
        .collect()
}

/// Directional-derivative check of `f` at `x` against the analytic gradient.
pub fn directional_check(
    name: &str,
    x: &Inputs,
    grad: &Inputs,
    f: impl Fn(&Inputs) -> Result<f64>,
    probes: usize,
    step: f64,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    if x.len() != grad.len() || x.iter().zip(grad).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape(format!("{name}: gradient does not match inputs")));
    }
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut v: Inputs = x
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let norm = v.iter().map(|t| t.dot(t).unwrap()).sum::<f64>().sqrt();
        for t in &mut v {
            *t = t.scale(1.0 / norm);
        }
        let analytic: f64 = grad.iter().zip(&v).map(|(g, d)| g.dot(d).unwrap()).sum();
        let numeric = (f(&perturbed(x, &v, step))? - f(&perturbed(x, &v, -step))?) / (2.0 * step);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        probes,
        max_rel_err: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn op_check(
    name: &str,
    x: Inputs,
    grad: Inputs,
    f: impl Fn(&Inputs) -> Result<f64>,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    directional_check(name, &x, &grad, f, 10, OP_STEP, OP_TOLERANCE, rng)
}

fn check_conv(rng: &mut ChaCha8Rng, spec: Conv2dSpec, name: &str) -> Result<CheckResult> {
    let x = vec![
        rand_t(&[2, 4, 5, 5], rng),
        rand_t(&[3, 4, 3, 3], rng),
        rand_t(&[3], rng),
    ];
    let out = conv2d(&x[0], &x[1], &x[2], spec)?;
    let u = rand_t(out.shape(), rng);
    let g = conv2d_vjp(&x[0], &x[1], &x[2], spec, &u)?;
    op_check(
        name,
        x,
        vec![g.input, g.weight, g.bias],
        |t| conv2d(&t[0], &t[1], &t[2], spec)?.dot(&u),
        rng,
    )
}

fn check_bn(rng: &mut ChaCha8Rng, mode: BnMode, name: &str) -> Result<CheckResult> {
    let x = vec![rand_t(&[2, 3, 4, 4], rng), rand_t(&[3], rng), rand_t(&[3], rng)];
    let running = RunningStats {
        mean: rand_t(&[3], rng).scale(0.1),
        var: Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5)),
    };
    let fwd = |t: &Inputs| batchnorm2d(&t[0], &t[1], &t[2], &mut running.clone(), mode);
    let u = rand_t(x[0].shape(), rng);
    let g = batchnorm2d_vjp(&x[0], &x[1], &x[2], &running, mode, &u)?;
    op_check(name, x, vec![g.input, g.gamma, g.beta], |t| fwd(t)?.dot(&u), rng)
}

fn check_elementwise(
    rng: &mut ChaCha8Rng,
    name: &str,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    vjp: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<CheckResult> {
    // keep relu probes away from its kink
    let x = Tensor::from_fn(&[10], |_| {
        let m = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let u = rand_t(&[10], rng);
    let g = vjp(&x, &u)?;
    op_check(name, vec![x], vec![g], |t| f(&t[0])?.dot(&u), rng)
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = vec![rand_t(&[4, 5], rng), rand_t(&[3, 5], rng), rand_t(&[3], rng)];
    let u = rand_t(&[4, 3], rng);
    let g = linear_vjp(&x[0], &x[1], &u)?;
    op_check(
        "linear",
        x,
        vec![g.input, g.weight, g.bias],
        |t| linear(&t[0], &t[1], &t[2])?.dot(&u),
        rng,
    )
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = rand_t(&[2, 5], rng).scale(2.0);
    let u = rand_t(&[2, 5], rng);
    let g = softmax_vjp(&softmax(&x, 1)?, 1, &u)?;
    op_check("softmax", vec![x], vec![g], |t| softmax(&t[0], 1)?.dot(&u), rng)
}

fn check_upsample(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = rand_t(&[2, 3, 3], rng);
    let u = rand_t(&[2, 6, 6], rng);
    let g = upsample_nearest2x_vjp(x.shape(), &u)?;
    op_check(
        "upsample_nearest2x",
        vec![x],
        vec![g],
        |t| upsample_nearest2x(&t[0])?.dot(&u),
        rng,
    )
}

fn proj_tensors(d: usize, rng: &mut ChaCha8Rng) -> Inputs {
    PROJ_NAMES
        .iter()
        .map(|n| {
            let shape: &[usize] = if n.starts_with('w') { &[d, d] } else { &[d] };
            rand_t(shape, rng).scale(0.7)
        })
        .collect()
}

fn proj_of(t: &[Tensor<f64>]) -> AttnProj<'_, f64> {
    AttnProj {
        wq: &t[0],
        bq: &t[1],
        wk: &t[2],
        bk: &t[3],
        wv: &t[4],
        bv: &t[5],
        wo: &t[6],
        bo: &t[7],
    }
}

fn check_mha(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (nq, nk, d, heads) = (4, 6, 8, 2);
    let mut x = vec![
        rand_t(&[nq, d], rng),
        rand_t(&[nk, d], rng),
        rand_t(&[nk, d], rng),
        rand_t(&[heads, nq, nk], rng),
    ];
    x.extend(proj_tensors(d, rng));
    let u = rand_t(&[nq, d], rng);
    let fwd =
        |t: &Inputs| multi_head_attention(&t[0], &t[1], &t[2], ScoreBias::PerHead(&t[3]), heads, proj_of(&t[4..]));
    let (_, cache) = fwd(&x)?;
    let g = multi_head_attention_vjp(
        &x[0],
        &x[1],
        &x[2],
        ScoreBias::PerHead(&x[3]),
        heads,
        proj_of(&x[4..]),
        &cache,
        &u,
    )?;
    let mut grad = vec![g.q, g.k, g.v, g.bias.expect("bias gradient")];
    grad.extend(g.proj.tensors);
    op_check("multi_head_attention", x, grad, |t| fwd(t)?.0.dot(&u), rng)
}

fn check_local(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (n, p, d, heads) = (5, 3, 8, 2);
    let mut x = vec![
        rand_t(&[n, d], rng),
        rand_t(&[n, p, d], rng),
        rand_t(&[n, p, d], rng),
        rand_t(&[heads, p], rng),
    ];
    x.extend(proj_tensors(d, rng));
    // one fully masked query and a few masked keys
    let mask: Vec<bool> = (0..n * p).map(|i| i / p != 2 && i % 4 != 1).collect();
    let u = rand_t(&[n, d], rng);
    let fwd = |t: &Inputs| local_attention(&t[0], &t[1], &t[2], &mask, &t[3], heads, proj_of(&t[4..]));
    let (_, cache) = fwd(&x)?;
    let g = local_attention_vjp(&x[0], &x[1], &x[2], heads, proj_of(&x[4..]), &cache, &u)?;
    let mut grad = vec![g.q, g.k, g.v, g.level_bias];
    grad.extend(g.proj.tensors);
    op_check("local_attention", x, grad, |t| fwd(t)?.0.dot(&u), rng)
}

fn check_bilinear(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let f = rand_t(&[2, 6, 7], rng);
    // points straddle the border so zero padding is exercised; fractional
    // parts stay away from the piecewise-linear kinks at integers
    let coord = |rng: &mut ChaCha8Rng, hi: i32| rng.random_range(-1..hi) as f64 + rng.random_range(0.05..0.95);
    let xs = Tensor::from_fn(&[12], |_| coord(rng, 7));
    let ys = Tensor::from_fn(&[12], |_| coord(rng, 6));
    let u = rand_t(&[2, 12], rng);
    let g = bilinear_sample_points_vjp(&f, xs.data(), ys.data(), &u)?;
    op_check(
        "bilinear_sample",
        vec![f, xs, ys],
        vec![
            g.feature,
            Tensor::from_vec(&[12], g.xs)?,
            Tensor::from_vec(&[12], g.ys)?,
        ],
        |t| bilinear_sample_points(&t[0], t[1].data(), t[2].data())?.dot(&u),
        rng,
    )
}

fn check_mse(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let r = rand_t(&[3, 4, 4], rng);
    let l = rand_t(&[3, 4, 4], rng);
    let (_, g) = mse_loss(&r, &l)?;
    directional_check(
        "mse_loss",
        &vec![r],
        &vec![g],
        |t| Ok(mse_loss(&t[0], &l)?.0),
        10,
        OP_STEP,
        1e-6,
        rng,
    )
}

/// Miniature model with every zero-initialized tensor randomized so that no
/// sample point sits on an integer coordinate.
pub fn randomized_miniature(seed: u64) -> Result<Model<f64>> {
    let mut m = Model::<f64>::new(ModelConfig::miniature(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = m.params.param_names().map(str::to_string).collect();
    for name in names {
        let t = m.params.get(&name)?;
        let scale =
            if encoder::offset_param_names().contains(&name) || name.ends_with("rpb") || name.ends_with("level_bias") {
                0.5
            } else if t.max_abs() == 0.0 {
                0.1
            } else {
                continue;
            };
        let shape = t.shape().to_vec();
        m.params.set(&name, rand_t(&shape, &mut rng).scale(scale))?;
    }
    Ok(m)
}

/// A short synthetic window for the miniature model: random images and a
/// slowly turning, moving vehicle.
pub fn miniature_window(cfg: &EncoderConfig, frames: usize, seed: u64) -> Vec<WindowFrame<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|i| WindowFrame {
            images: Tensor::from_fn(&[3, 3, cfg.image_h, cfg.image_w], |_| rng.random_range(0.0..1.0)),
            pose: Pose2::new(100.0 + 1.37 * i as f64, 200.0 + 0.61 * i as f64, 0.3 + 0.07 * i as f64),
            timestamp: i as f64,
        })
        .collect()
}

fn params_as_inputs(model: &Model<f64>) -> (Vec<String>, Inputs) {
    model.params.params().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

fn with_params(model: &Model<f64>, names: &[String], t: &Inputs) -> Result<Model<f64>> {
    let mut m = model.clone();
    for (n, v) in names.iter().zip(t) {
        m.params.set(n, v.clone())?;
    }
    Ok(m)
}

/// Coordinate probes: `probes` single parameter entries, each chosen by first
/// picking a tensor uniformly, then an entry in it.
fn coordinate_check(
    name: &str,
    x: &Inputs,
    grad: &Inputs,
    f: impl Fn(&Inputs) -> Result<f64>,
    probes: usize,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let ti = rng.random_range(0..x.len());
        let ei = rng.random_range(0..x[ti].len());
        let bump = |s: f64| {
            let mut y = x.clone();
            y[ti].data_mut()[ei] += s;
            y
        };
        let numeric = (f(&bump(COMPOSED_STEP))? - f(&bump(-COMPOSED_STEP))?) / (2.0 * COMPOSED_STEP);
        worst = worst.max(rel_err(grad[ti].data()[ei], numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        probes,
        max_rel_err: worst,
        tolerance: COMPOSED_TOLERANCE,
        passed: worst <= COMPOSED_TOLERANCE,
    })
}

fn grads_as_inputs(names: &[String], x: &Inputs, grads: &Gradients<f64>) -> Inputs {
    names
        .iter()
        .zip(x)
        .map(|(n, t)| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn check_render_head(rng: &mut ChaCha8Rng, mode: BnMode) -> Result<CheckResult> {
    let cfg = RenderHeadConfig::miniature();
    let model = randomized_miniature(11)?;
    let feat = rand_t(&[8, 8, 8], rng);
    let (out, cache) = renderer::render(&model.params, &cfg, &feat, mode)?;
    let u = rand_t(out.shape(), rng);
    let mut grads = Gradients::new();
    let g_feat = renderer::render_backward(&model.params, &cfg, &cache, &u, &mut grads)?;
    let (mut names, mut x) = params_as_inputs(&model);
    let mut grad = grads_as_inputs(&names, &x, &grads);
    names.push("input".into());
    x.push(feat);
    grad.push(g_feat);
    let f = |t: &Inputs| {
        let m = with_params(&model, &names[..names.len() - 1], t)?;
        renderer::render(&m.params, &cfg, &t[t.len() - 1], mode)?.0.dot(&u)
    };
    let label = match mode {
        BnMode::Train => "render_head_train",
        BnMode::Eval => "render_head_eval",
    };
    directional_check(label, &x, &grad, f, 10, COMPOSED_STEP, COMPOSED_TOLERANCE, rng)
}

fn check_encoder_window(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let model = randomized_miniature(5)?;
    let cfg = model.cfg.encoder;
    let views = encoder::view_geometry(&cfg, &CameraModel::trinocular_rig(cfg.image_w, cfg.image_h))?;
    let frames = miniature_window(&cfg, 3, 9);
    let (_, cache) = encoder::encode_window(&model.params, &cfg, &views, &frames)?;
    // loss = sum of the output feature
    let ones = Tensor::full(&[cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w], 1.0);
    let mut grads = Gradients::new();
    encoder::encode_window_backward(&model.params, &cfg, &cache, &ones, &mut grads)?;
    let (names, x) = params_as_inputs(&model);
    let grad = grads_as_inputs(&names, &x, &grads);
    let f = |t: &Inputs| {
        let m = with_params(&model, &names, t)?;
        Ok(encoder::encode_window(&m.params, &cfg, &views, &frames)?.0.data.sum())
    };
    directional_check(
        "encoder_window",
        &x,
        &grad,
        f,
        10,
        COMPOSED_STEP,
        COMPOSED_TOLERANCE,
        rng,
    )
}

/// Whole model, train-mode BN, MSE loss; 20 coordinate probes.
pub fn check_full_model(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = randomized_miniature(seed)?;
    let cfg = model.cfg.encoder;
    let views = model.view_geometry(&CameraModel::trinocular_rig(cfg.image_w, cfg.image_h))?;
    let frames = miniature_window(&cfg, 3, seed + 1);
    let s = model.cfg.render_size();
    let label = Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..1.0));
    let (img, cache) = model.forward(&views, &frames, BnMode::Train)?;
    let (_, g_img) = mse_loss(&img, &label)?;
    let grads = model.backward(&cache, &g_img)?;
    let (names, x) = params_as_inputs(&model);
    let grad = grads_as_inputs(&names, &x, &grads);
    let f = |t: &Inputs| {
        let m = with_params(&model, &names, t)?;
        Ok(mse_loss(&m.forward(&views, &frames, BnMode::Train)?.0, &label)?.0)
    };
    coordinate_check("full_model", &x, &grad, f, 20, &mut rng)
}

/// Runs every operator check and the composed checks.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let limit = 1.5;
    Ok(vec![
        check_conv(r, Conv2dSpec::new(1, 1), "conv2d")?,
        check_conv(r, Conv2dSpec::new(2, 1), "conv2d_stride2")?,
        check_bn(r, BnMode::Train, "batchnorm2d_train")?,
        check_bn(r, BnMode::Eval, "batchnorm2d_eval")?,
        check_elementwise(r, "relu", |x| Ok(relu(x)), relu_vjp)?,
        check_elementwise(r, "sigmoid", |x| Ok(sigmoid(x)), |x, g| sigmoid_vjp(&sigmoid(x), g))?,
        check_elementwise(
            r,
            "soft_clamp",
            |x| Ok(soft_clamp(x, limit)),
            |x, g| soft_clamp_vjp(x, limit, g),
        )?,
        check_upsample(r)?,
        check_linear(r)?,
        check_softmax(r)?,
        check_mha(r)?,
        check_local(r)?,
        check_bilinear(r)?,
        check_mse(r)?,
        check_render_head(r, BnMode::Eval)?,
        check_render_head(r, BnMode::Train)?,
        check_encoder_window(r)?,
        check_full_model(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()];
        let wrong = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 4.1]).unwrap()];
        let r = directional_check("square", &x, &wrong, |t| t[0].dot(&t[0]), 5, 1e-4, 1e-5, &mut rng).unwrap();
        assert!(!r.passed);
        let right = vec![x[0].scale(2.0)];
        let r = directional_check("square", &x, &right, |t| t[0].dot(&t[0]), 5, 1e-4, 1e-5, &mut rng).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
