mod common;

use common::{rel_diff, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vprior_core::distiller::{
    connector_transform, distill_loss, distill_loss_with_grad, freeze_teacher, Connector, FeatureMap, FeatureMapSet,
    StagePair,
};
use vprior_core::nn::{BackboneConfig, ClassifierNet, Tensor};

fn random_map(c: usize, n: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> FeatureMap<f64> {
    FeatureMap::new(c, n, h, w, (0..c * n * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_connector(cs: usize, ct: usize, normalize: bool, r: &mut ChaCha8Rng) -> Connector<f64> {
    let weight = (0..cs * ct).map(|_| r.gen_range(-1.0..1.0)).collect();
    let conn = Connector::from_weight(cs, ct, weight).unwrap();
    if normalize {
        let gamma = (0..ct).map(|_| r.gen_range(0.5..1.5)).collect();
        let beta = (0..ct).map(|_| r.gen_range(-0.5..0.5)).collect();
        conn.with_normalization(gamma, beta).unwrap()
    } else {
        conn
    }
}

/// Nested-loop projection and per-channel normalization over (n, y, x).
fn connector_oracle(s: &FeatureMap<f64>, weight: &[f64], norm: Option<(&[f64], &[f64])>, ct: usize) -> Vec<f64> {
    let (cs, nb, h, w) = (s.channels, s.batch, s.height, s.width);
    let at = |c: usize, n: usize, y: usize, x: usize| ((c * nb + n) * h + y) * w + x;
    let mut out = vec![0.0; ct * nb * h * w];
    for t in 0..ct {
        for n in 0..nb {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..cs {
                        acc += weight[t * cs + c] * s.data[at(c, n, y, x)];
                    }
                    out[at(t, n, y, x)] = acc;
                }
            }
        }
    }
    if let Some((gamma, beta)) = norm {
        let count = (nb * h * w) as f64;
        for t in 0..ct {
            let ch = &mut out[t * nb * h * w..(t + 1) * nb * h * w];
            let mean = ch.iter().sum::<f64>() / count;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            for v in ch.iter_mut() {
                *v = gamma[t] * (*v - mean) / (var + 1e-5).sqrt() + beta[t];
            }
        }
    }
    out
}

fn stage_set(
    r: &mut ChaCha8Rng,
    stages: usize,
    normalize: bool,
) -> (FeatureMapSet<f64>, Vec<Connector<f64>>) {
    let n = r.gen_range(1..3);
    let mut pairs = Vec::new();
    let mut conns = Vec::new();
    for _ in 0..stages {
        let (cs, ct, h, w) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        pairs.push(StagePair {
            teacher: random_map(ct, n, h, w, r),
            student: random_map(cs, n, h, w, r),
        });
        conns.push(random_connector(cs, ct, normalize, r));
    }
    (FeatureMapSet::new(pairs).unwrap(), conns)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn connector_matches_nested_loops(seed in any::<u64>(), normalize in any::<bool>()) {
        let mut r = rng(seed);
        let (cs, ct) = (r.gen_range(1..5), r.gen_range(1..5));
        let s = random_map(cs, r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), &mut r);
        let conn = random_connector(cs, ct, normalize, &mut r);
        let got = connector_transform(&s, &conn).unwrap();
        let p = conn.params();
        let norm = normalize.then(|| (&p[cs * ct..cs * ct + ct], &p[cs * ct + ct..]));
        let expect = connector_oracle(&s, &p[..cs * ct], norm, ct);
        for (a, b) in got.data.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn loss_is_sum_of_stage_mse(seed in any::<u64>(), stages in 1usize..4, normalize in any::<bool>()) {
        let mut r = rng(seed);
        let (set, conns) = stage_set(&mut r, stages, normalize);
        let mut expect = 0.0;
        for (pair, conn) in set.stages().iter().zip(&conns) {
            let (cs, ct) = (conn.student_channels(), conn.teacher_channels());
            let p = conn.params();
            let norm = normalize.then(|| (&p[cs * ct..cs * ct + ct], &p[cs * ct + ct..]));
            let proj = connector_oracle(&pair.student, &p[..cs * ct], norm, ct);
            expect += proj.iter().zip(&pair.teacher.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / proj.len() as f64;
        }
        prop_assert!(rel_diff(distill_loss(&set, &conns).unwrap(), expect) <= 1e-10);
    }

    #[test]
    fn matched_stage_adds_nothing(seed in any::<u64>(), stages in 1usize..3) {
        let mut r = rng(seed);
        let (set, mut conns) = stage_set(&mut r, stages, false);
        let base = distill_loss(&set, &conns).unwrap();
        let mut pairs = set.stages().to_vec();
        let n = pairs[0].student.batch;
        let f = random_map(3, n, 2, 2, &mut r);
        pairs.push(StagePair { teacher: f.clone(), student: f });
        conns.push(Connector::identity(3));
        let extended = FeatureMapSet::new(pairs).unwrap();
        prop_assert!(rel_diff(distill_loss(&extended, &conns).unwrap(), base) <= 1e-14 || base == 0.0);
    }

    #[test]
    fn loss_vanishes_exactly_when_maps_agree(seed in any::<u64>(), bump in 1e-3f64..1.0) {
        let mut r = rng(seed);
        let (cs, ct) = (r.gen_range(1..4), r.gen_range(1..4));
        let s = random_map(cs, 2, 2, 3, &mut r);
        let conn = random_connector(cs, ct, false, &mut r);
        let target = connector_transform(&s, &conn).unwrap();
        let matched = FeatureMapSet::new(vec![StagePair { teacher: target.clone(), student: s.clone() }]).unwrap();
        prop_assert_eq!(distill_loss(&matched, std::slice::from_ref(&conn)).unwrap(), 0.0);
        let mut off = target;
        let i = r.gen_range(0..off.data.len());
        off.data[i] += bump;
        let unmatched = FeatureMapSet::new(vec![StagePair { teacher: off, student: s }]).unwrap();
        prop_assert!(distill_loss(&unmatched, &[conn]).unwrap() > 0.0);
    }
}

#[test]
fn student_and_connector_gradients_match_central_differences() {
    let h = 1e-6;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let normalize = seed % 2 == 0;
        let (set, conns) = stage_set(&mut r, 2, normalize);
        let out = distill_loss_with_grad(&set, &conns).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (si, pair) in set.stages().iter().enumerate() {
            for i in 0..pair.student.data.len() {
                let eval = |delta: f64| {
                    let mut pairs = set.stages().to_vec();
                    pairs[si].student.data[i] += delta;
                    distill_loss(&FeatureMapSet::new(pairs).unwrap(), &conns).unwrap()
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
                analytic.push(out.student_grads[si].data[i]);
            }
            for j in 0..conns[si].params().len() {
                let eval = |delta: f64| {
                    let mut cs = conns.clone();
                    cs[si].params_mut()[j] += delta;
                    distill_loss(&set, &cs).unwrap()
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
                analytic.push(out.connector_grads[si][j]);
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-5, "seed {seed}: relative error {}", diff / scale);
    }
}

#[test]
fn teacher_is_untouched_by_distillation() {
    let cfg = BackboneConfig {
        widths: vec![4, 8],
        blocks: vec![1, 1],
        stem_stride: 1,
        in_channels: 3,
    };
    let (net, state) = ClassifierNet::build(&cfg, 2, 5).unwrap();
    let teacher = freeze_teacher(net.backbone.clone(), state.clone());
    let before = teacher.digest();
    assert_eq!(before, state.digest());
    let mut r = rng(1);
    let x = Tensor {
        channels: 3,
        batch: 2,
        height: 8,
        width: 8,
        data: (0..3 * 2 * 64).map(|_| r.gen_range(-1.0..1.0)).collect(),
    };
    let (_, out, _) = net.forward(&state.params, &mut vprior_core::nn::NormMode::Running(&state.buffers), &x);
    for _ in 0..3 {
        let t = teacher.stage_features(&x);
        let pairs = t
            .into_iter()
            .zip(&out.stages)
            .map(|(t, s)| StagePair {
                teacher: FeatureMap::<f32>::from(t),
                student: FeatureMap::<f32>::from(s.clone()),
            })
            .collect();
        let set = FeatureMapSet::new(pairs).unwrap();
        let conns: Vec<Connector<f32>> = cfg.widths.iter().map(|&c| Connector::random(c, c, true, &mut r)).collect();
        let grads = distill_loss_with_grad(&set, &conns).unwrap();
        assert_eq!(grads.student_grads.len(), 2);
    }
    assert_eq!(teacher.digest(), before);
}
