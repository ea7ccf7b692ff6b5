use approx::assert_abs_diff_eq;
use bevlocate::geometry::bilinear_sample_points;
use bevlocate::nncore::{conv2d, local_attention, multi_head_attention, AttnProj, Conv2dSpec, ScoreBias, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f64], wt: &[f64], b: &[f64], dims: [usize; 6], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, w, o, k] = dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += wt[((oc * c + ic) * k + ky) * k + kx]
                                    * x[((bn * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((bn * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_scalar_loops_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let (stride, pad) = (rng.random_range(1..4), rng.random_range(0..3));
        let k = rng.random_range(1..=(h.min(w) + 2 * pad).min(4));
        let x = random(&[n, c, h, w], &mut rng);
        let wt = random(&[o, c, k, k], &mut rng);
        let b = random(&[o], &mut rng);
        let y = conv2d(&x, &wt, &b, Conv2dSpec::new(stride, pad)).unwrap();
        let expect = conv_oracle(x.data(), wt.data(), b.data(), [n, c, h, w, o, k], stride, pad);
        assert_eq!(y.len(), expect.len());
        for (a, e) in y.data().iter().zip(&expect) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-10);
        }
    }
}

struct Proj {
    t: Vec<Tensor<f64>>,
}

impl Proj {
    fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let t = (0..8)
            .map(|i| {
                if i % 2 == 0 {
                    random(&[d, d], rng)
                } else {
                    random(&[d], rng)
                }
            })
            .collect();
        Self { t }
    }

    fn view(&self) -> AttnProj<'_, f64> {
        let t = &self.t;
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

    fn apply(&self, which: usize, x: &[f64]) -> Vec<f64> {
        let (w, b) = (self.t[2 * which].data(), self.t[2 * which + 1].data());
        let d = b.len();
        (0..d)
            .map(|r| b[r] + (0..d).map(|c| w[r * d + c] * x[c]).sum::<f64>())
            .collect()
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn one_head_one_hot_keys_give_softmax_of_query() {
    let d = 4;
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let zero = Tensor::zeros(&[d]);
    let proj = AttnProj {
        wq: &eye,
        bq: &zero,
        wk: &eye,
        bk: &zero,
        wv: &eye,
        bv: &zero,
        wo: &eye,
        bo: &zero,
    };
    let q = Tensor::from_vec(&[2, d], vec![0.3, -1.2, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let (out, _) = multi_head_attention(&q, &eye, &eye, ScoreBias::None, 1, proj).unwrap();
    for i in 0..2 {
        let scaled: Vec<f64> = q.data()[i * d..][..d].iter().map(|v| v / 2.0).collect();
        let expect = softmax(&scaled);
        for j in 0..d {
            assert_abs_diff_eq!(out.data()[i * d + j], expect[j], epsilon = 1e-12);
        }
    }
}

#[test]
fn multi_head_attention_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, heads, nq, nk) = (6, 2, 5, 7);
    let dh = d / heads;
    let proj = Proj::random(d, &mut rng);
    let q = random(&[nq, d], &mut rng);
    let k = random(&[nk, d], &mut rng);
    let v = random(&[nk, d], &mut rng);
    let bias = random(&[heads, nq, nk], &mut rng);
    let (out, _) = multi_head_attention(&q, &k, &v, ScoreBias::PerHead(&bias), heads, proj.view()).unwrap();

    let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..][..d].to_vec();
    let kp: Vec<Vec<f64>> = (0..nk).map(|j| proj.apply(1, &row(&k, j))).collect();
    let vp: Vec<Vec<f64>> = (0..nk).map(|j| proj.apply(2, &row(&v, j))).collect();
    for i in 0..nq {
        let qp = proj.apply(0, &row(&q, i));
        let mut z = vec![0.0; d];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let s: Vec<f64> = (0..nk)
                .map(|j| {
                    let dot: f64 = r.clone().map(|c| qp[c] * kp[j][c]).sum();
                    dot / (dh as f64).sqrt() + bias.data()[(h * nq + i) * nk + j]
                })
                .collect();
            let p = softmax(&s);
            for c in r {
                z[c] = (0..nk).map(|j| p[j] * vp[j][c]).sum();
            }
        }
        let expect = proj.apply(3, &z);
        for c in 0..d {
            assert_abs_diff_eq!(out.data()[i * d + c], expect[c], epsilon = 1e-12);
        }
    }
}

#[test]
fn local_attention_matches_scalar_oracle_and_zeroes_dead_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, heads, n, p) = (4, 2, 6, 3);
    let dh = d / heads;
    let proj = Proj::random(d, &mut rng);
    let q = random(&[n, d], &mut rng);
    let k = random(&[n, p, d], &mut rng);
    let v = random(&[n, p, d], &mut rng);
    let lb = random(&[heads, p], &mut rng);
    let mut mask: Vec<bool> = (0..n * p).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    mask[p..2 * p].fill(false);
    let (out, _) = local_attention(&q, &k, &v, &mask, &lb, heads, proj.view()).unwrap();

    for i in 0..n {
        let got = &out.data()[i * d..][..d];
        let keys: Vec<usize> = (0..p).filter(|&j| mask[i * p + j]).collect();
        if keys.is_empty() {
            assert!(got.iter().all(|&x| x == 0.0));
            continue;
        }
        let qp = proj.apply(0, &q.data()[i * d..][..d]);
        let kp: Vec<Vec<f64>> = keys
            .iter()
            .map(|&j| proj.apply(1, &k.data()[(i * p + j) * d..][..d]))
            .collect();
        let vp: Vec<Vec<f64>> = keys
            .iter()
            .map(|&j| proj.apply(2, &v.data()[(i * p + j) * d..][..d]))
            .collect();
        let mut z = vec![0.0; d];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let s: Vec<f64> = keys
                .iter()
                .enumerate()
                .map(|(a, &j)| {
                    r.clone().map(|c| qp[c] * kp[a][c]).sum::<f64>() / (dh as f64).sqrt() + lb.data()[h * p + j]
                })
                .collect();
            let w = softmax(&s);
            for c in r {
                z[c] = w.iter().zip(&vp).map(|(wa, va)| wa * va[c]).sum();
            }
        }
        let expect = proj.apply(3, &z);
        for c in 0..d {
            assert_abs_diff_eq!(got[c], expect[c], epsilon = 1e-12);
        }
    }
}

#[test]
fn bilinear_sampling_is_linear_in_the_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = random(&[3, 8, 8], &mut rng);
    let g = random(&[3, 8, 8], &mut rng);
    let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-1.5..8.5)).collect();
    let ys: Vec<f64> = (0..50).map(|_| rng.random_range(-1.5..8.5)).collect();
    let (a, b) = (0.7, -2.3);
    let mix = f.scale(a).add(&g.scale(b)).unwrap();
    let lhs = bilinear_sample_points(&mix, &xs, &ys).unwrap();
    let rhs = bilinear_sample_points(&f, &xs, &ys)
        .unwrap()
        .scale(a)
        .add(&bilinear_sample_points(&g, &xs, &ys).unwrap().scale(b))
        .unwrap();
    for (l, r) in lhs.data().iter().zip(rhs.data()) {
        assert_abs_diff_eq!(l, r, epsilon = 1e-12);
    }
}
