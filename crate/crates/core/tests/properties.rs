//! Invariants against independent oracles: repeat structure, low rank,
//! reduction identities, AUC and t-test references, synthetic data quality.

mod common;

use common::{brute_force_auc, oracle_dnn, random_samples};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use midpg::data::{generate_synthetic, split, Sample, SyntheticSpec};
use midpg::mir::{model_mi_loss, mi_loss_from_scores};
use midpg::model::dwm::{dwm_c, dwm_r};
use midpg::model::{psi_repeat, BoundMlp};
use midpg::train::bce_loss;
use midpg::{
    auc, paired_t_test, DwmVariant, LowRank, Model, ModelConfig, RepeatMode, Rng, Schema, Tape, Tensor, Weighting,
};

#[test]
fn auc_equals_brute_force_on_200_instances() {
    let mut rng = Rng::new(2024);
    for case in 0..200 {
        let n = 2 + rng.below(60);
        // Coarse scores force many ties.
        let levels = 1 + rng.below(8);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels), "case {case}");
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_maps(
        raw in proptest::collection::vec((-3.0f64..3.0, any::<bool>()), 2..80),
        a in 0.01f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let mut labels: Vec<u8> = raw.iter().map(|&(_, l)| l as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| (s * 4.0).round() / 4.0).collect();
        let base = auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let aff: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(auc(&exp, &labels).unwrap(), base);
        prop_assert_eq!(auc(&aff, &labels).unwrap(), base);
    }

    #[test]
    fn psi_matches_index_formulas(
        d_r in 1usize..5, d_c in 1usize..5, rep_r in 1usize..4, rep_c in 1usize..4, block in any::<bool>(), seed in any::<u64>()
    ) {
        let (d_m, d_n) = (d_r * rep_r, d_c * rep_c);
        let mut rng = Rng::new(seed);
        let vals: Vec<f64> = (0..d_r * d_c).map(|_| rng.uniform01()).collect();
        let mode = if block { RepeatMode::Block } else { RepeatMode::Tile };
        let compact = Tensor::new(vec![d_r, d_c], vals.clone()).unwrap();
        let out = psi_repeat(&compact, d_m, d_n, mode).unwrap();
        prop_assert_eq!(out.shape(), &[d_m, d_n][..]);
        for r in 0..d_m {
            for c in 0..d_n {
                let (sr, sc) = if block { (r * d_r / d_m, c * d_c / d_n) } else { (r % d_r, c % d_c) };
                prop_assert_eq!(out.values()[r * d_n + c], vals[sr * d_c + sc]);
            }
        }
    }

    #[test]
    fn size_fraction_is_product(dr in 0u32..4, dc in 0u32..4, dk in 0u32..3) {
        let (d_m, d_n) = (64usize, 32usize);
        let size = LowRank { d_r: d_m >> dr, d_c: d_n >> dc, d_k: 1 << dk };
        let f = midpg::model::low_rank_size_fraction(&size, d_m, d_n).unwrap();
        prop_assert_eq!(f, (1 << dk) as f64 / (1u32 << (dr + dc)) as f64);
    }
}

#[test]
fn psi_rejects_non_divisible() {
    let t = Tensor::full(vec![2, 3], 0.5).unwrap();
    let err = psi_repeat(&t, 5, 6, RepeatMode::Tile).unwrap_err().to_string();
    assert!(err.contains('2') && err.contains('5'), "{err}");
}

fn t_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

#[test]
fn t_test_matches_reference_distribution() {
    let mut rng = Rng::new(77);
    let b: Vec<f64> = (0..10).map(|_| 0.7 + 0.05 * rng.normal()).collect();
    let a: Vec<f64> = b.iter().map(|x| x + 0.01 + 0.001 * rng.normal()).collect();
    let got = paired_t_test(&a, &b).unwrap();
    let (t, p) = t_oracle(&a, &b);
    assert!((got.t - t).abs() < 1e-9 * t.abs());
    assert!((got.p - p).abs() < 1e-10, "{} vs {p}", got.p);
    assert_eq!(got.df, 9.0);
    for n in [2usize, 3, 5, 30] {
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.normal() * 0.5 + 0.2).collect();
            let got = paired_t_test(&x, &y).unwrap();
            let (t, p) = t_oracle(&x, &y);
            assert!((got.t - t).abs() <= 1e-9 * t.abs().max(1.0));
            assert!((got.p - p).abs() < 1e-9, "n={n} t={t}: {} vs {p}", got.p);
        }
    }
}

fn small_schema() -> Schema {
    Schema::uniform(3, 1, 2, 5).unwrap()
}

#[test]
fn ones_weighting_reproduces_plain_dnn() {
    let schema = small_schema();
    let mut rng = Rng::new(3);
    let samples = random_samples(&schema, 100, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = ModelConfig {
        hidden_dims: vec![16, 8, 4],
        ..ModelConfig::plain()
    };
    let model = Model::new(cfg, &schema, 9).unwrap();
    let preds = model.predict(&refs).unwrap();
    for (s, p) in samples.iter().zip(preds) {
        assert!((p - oracle_dnn(&model, s, 1.0)).abs() < 1e-12);
    }
}

#[test]
fn zero_generators_halve_the_backbone() {
    let schema = small_schema();
    let mut rng = Rng::new(4);
    let samples = random_samples(&schema, 50, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    for variant in DwmVariant::ALL {
        let mut cfg = ModelConfig {
            hidden_dims: vec![16, 8],
            ..ModelConfig::default()
        };
        cfg.dwm.variant = variant;
        let mut model = Model::new(cfg, &schema, 5).unwrap();
        model.zero_generators();
        for f in model.weighting_factors(&refs).unwrap() {
            assert!(f.compact.values().iter().all(|&v| v == 0.5), "{variant}");
        }
        let preds = model.predict(&refs).unwrap();
        for (s, p) in samples.iter().zip(preds) {
            assert!((p - oracle_dnn(&model, s, 0.5)).abs() < 1e-12, "{variant}");
        }
    }
}

#[test]
fn zero_shared_factor_gives_half_regardless_of_input() {
    let schema = small_schema();
    let mut rng = Rng::new(6);
    let samples = random_samples(&schema, 20, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    for (variant, name) in [(DwmVariant::R, "share.0.col"), (DwmVariant::C, "share.0.row")] {
        let mut cfg = ModelConfig {
            hidden_dims: vec![8, 4],
            ..ModelConfig::default()
        };
        cfg.dwm.variant = variant;
        let mut model = Model::new(cfg, &schema, 1).unwrap();
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).values_mut().fill(0.0);
        let f = &model.weighting_factors(&refs).unwrap()[0];
        assert!(f.compact.values().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn gating_regime_has_identical_rows() {
    let schema = small_schema();
    let mut rng = Rng::new(8);
    let samples = random_samples(&schema, 10, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut cfg = ModelConfig {
        hidden_dims: vec![16, 8],
        ..ModelConfig::default()
    };
    cfg.dwm.variant = DwmVariant::Rc;
    cfg.dwm.layers = Some(vec![LowRank { d_r: 1, d_c: 16, d_k: 1 }, LowRank { d_r: 1, d_c: 8, d_k: 1 }]);
    let model = Model::new(cfg, &schema, 2).unwrap();
    for f in model.weighting_factors(&refs).unwrap() {
        let s = f.expanded().unwrap();
        let (b, m, n) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        let v = s.values();
        for i in 0..b {
            let first = &v[i * m * n..i * m * n + n];
            assert!(first.windows(2).any(|w| w[0] != w[1]), "columns vary");
            for r in 1..m {
                assert_eq!(&v[i * m * n + r * n..i * m * n + (r + 1) * n], first);
            }
        }
    }
}

#[test]
fn weighting_structure_over_random_configs() {
    common::weighting_structure(300, 31337).unwrap();
}

#[test]
fn column_variant_is_transpose_of_row_variant() {
    let (d_r, d_c, d_k, hidden, input) = (3usize, 4usize, 2usize, 5usize, 6usize);
    let batch = 3;
    let mut rng = Rng::new(12);
    let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect() };
    let x = Tensor::new(vec![batch, input], rand(batch * input)).unwrap();
    let w1 = Tensor::new(vec![input, hidden], rand(input * hidden)).unwrap();
    let b1 = Tensor::new(vec![hidden], rand(hidden)).unwrap();
    let w2 = rand(hidden * d_k * d_c);
    let b2 = rand(d_k * d_c);
    let r_share = rand(d_r * d_k);

    // Generator for the transposed problem emits G_C(x)^T: output (c, k)
    // reads original output (k, c).
    let perm: Vec<usize> = (0..d_c * d_k).map(|j| (j % d_k) * d_c + j / d_k).collect();
    let w2_t: Vec<f64> = (0..hidden)
        .flat_map(|h| perm.iter().map(move |&src| (h, src)))
        .map(|(h, src)| w2[h * d_k * d_c + src])
        .collect();
    let b2_t: Vec<f64> = perm.iter().map(|&src| b2[src]).collect();
    let c_share_t: Vec<f64> = (0..d_k * d_r).map(|j| r_share[(j % d_r) * d_k + j / d_r]).collect();

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let w1v = tape.leaf(&w1);
    let b1v = tape.leaf(&b1);
    let gen_c = BoundMlp {
        w1: w1v,
        b1: b1v,
        w2: tape.constant(vec![hidden, d_k * d_c], w2).unwrap(),
        b2: tape.constant(vec![d_k * d_c], b2).unwrap(),
    };
    let gen_r = BoundMlp {
        w1: w1v,
        b1: b1v,
        w2: tape.constant(vec![hidden, d_c * d_k], w2_t).unwrap(),
        b2: tape.constant(vec![d_c * d_k], b2_t).unwrap(),
    };
    let r = tape.constant(vec![d_r, d_k], r_share).unwrap();
    let c = tape.constant(vec![d_k, d_r], c_share_t).unwrap();
    let col = dwm_c(&mut tape, r, &gen_c, xv, LowRank { d_r, d_c, d_k }).unwrap();
    let row = dwm_r(&mut tape, &gen_r, c, xv, LowRank { d_r: d_c, d_c: d_r, d_k }).unwrap();
    let a = tape.value(col.compact).to_vec();
    let b = tape.value(row.compact).to_vec();
    for i in 0..batch {
        for p in 0..d_r {
            for q in 0..d_c {
                let lhs = a[i * d_r * d_c + p * d_c + q];
                let rhs = b[i * d_r * d_c + q * d_r + p];
                assert!((lhs - rhs).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn generator_counts_follow_closed_form() {
    let schema = small_schema();
    let mut non = ModelConfig {
        hidden_dims: vec![128, 64],
        ..ModelConfig::default()
    };
    non.dwm.variant = DwmVariant::Non;
    let model = Model::new(non.clone(), &schema, 0).unwrap();
    let aw = model.aware_width();
    let hidden = non.dwm.generator_hidden;
    let expected: usize = model
        .layer_shapes()
        .iter()
        .map(|&(m, n)| hidden * (aw + m + 1) + m * n * (hidden + 1))
        .sum();
    assert_eq!(model.count_parameters().generators, expected);

    let mut rc = non.clone();
    rc.dwm.variant = DwmVariant::Rc;
    rc.dwm.layers = Some(vec![LowRank { d_r: 4, d_c: 16, d_k: 1 }, LowRank { d_r: 16, d_c: 8, d_k: 1 }]);
    let rc_model = Model::new(rc, &schema, 0).unwrap();
    let non_count = model.count_parameters().generators;
    assert!(non_count > rc_model.count_parameters().generators);
    let other = Model::new(non, &schema, 77).unwrap();
    assert_eq!(other.count_parameters(), model.count_parameters());
}

#[test]
fn zero_discriminator_passes_no_mi_gradient_to_generators() {
    let schema = small_schema();
    let mut rng = Rng::new(10);
    let samples = random_samples(&schema, 8, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = ModelConfig {
        hidden_dims: vec![8, 4],
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, &schema, 3).unwrap();
    let mut tape = Tape::new();
    let binding = model.params().bind(&mut tape);
    let fwd = model.forward_batch(&mut tape, &binding, &refs).unwrap();
    let perm = midpg::mir::shuffle_negatives(refs.len(), &mut rng).unwrap();
    let mi = model_mi_loss(&mut tape, &model, &binding, &fwd, perm).unwrap();
    assert!((tape.value(mi)[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let grads = tape.backward(mi).unwrap();
    for (id, name, _) in model.params().iter() {
        let g = grads.get(binding.var(id));
        if !name.starts_with("disc") {
            assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{name}");
        }
    }
    let w2 = model.params().find("disc.0.w2").unwrap();
    assert!(grads.get(binding.var(w2)).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn mi_loss_is_asymmetric_in_roles() {
    // Swapping which pairing counts as positive changes the loss.
    let pos = [0.9, 0.6, 0.7];
    let neg = [0.2, 0.5, 0.4];
    let a = mi_loss_from_scores(&pos, &neg).unwrap();
    let b = mi_loss_from_scores(&neg, &pos).unwrap();
    assert!((a - b).abs() > 0.1);
    assert!(a > 0.0 && b > 0.0);
}

#[test]
fn embedding_rows_get_gradient_only_when_touched() {
    let schema = small_schema();
    let samples = [Sample {
        scenario_id: 1,
        aware_features: vec![1, 2],
        agnostic_features: vec![0, 4],
        label: 1,
    }];
    let refs: Vec<&Sample> = samples.iter().collect();
    let model = Model::new(ModelConfig { hidden_dims: vec![8], ..ModelConfig::default() }, &schema, 4).unwrap();
    let mut tape = Tape::new();
    let binding = model.params().bind(&mut tape);
    let fwd = model.forward_batch(&mut tape, &binding, &refs).unwrap();
    let loss = bce_loss(&mut tape, fwd.prob, &[1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let id = model.params().find("embed.scenario").unwrap();
    let g = grads.get(binding.var(id)).unwrap();
    let e = model.config().embed_dim;
    for row in 0..3 {
        let nz = g[row * e..(row + 1) * e].iter().any(|&v| v != 0.0);
        assert_eq!(nz, row == 1, "row {row}");
    }
}

#[test]
fn synthetic_bayes_auc_exceeds_095() {
    let spec = SyntheticSpec {
        label_noise: 0.0,
        samples_per_scenario: 2500,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    assert_eq!(data.dataset.len(), 10_000);
    let scores: Vec<f64> = data.dataset.samples.iter().map(|s| data.true_logit(s)).collect();
    let labels: Vec<u8> = data.dataset.samples.iter().map(|s| s.label).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(a > 0.95, "Bayes AUC {a}");
}

#[test]
fn synthetic_zero_weights_give_balanced_labels() {
    let spec = SyntheticSpec {
        num_scenarios: 1,
        samples_per_scenario: 10_000,
        label_noise: 0.0,
        weight_scale: 0.0,
        ..SyntheticSpec::default()
    };
    let rate = generate_synthetic(&spec).unwrap().dataset.positive_rate();
    assert!((0.45..=0.55).contains(&rate), "{rate}");
}

/// Full-batch L2-regularised logistic regression on one-hot features.
fn logistic_fit(x: &[Vec<usize>], y: &[u8], width: usize) -> Vec<f64> {
    let mut w = vec![0.0; width + 1];
    let n = x.len() as f64;
    let (mut m, mut v) = (vec![0.0; width + 1], vec![0.0; width + 1]);
    for t in 1..=400 {
        let mut g = vec![0.0; width + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = w[width] + xi.iter().map(|&j| w[j]).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            for &j in xi {
                g[j] += r / n;
            }
            g[width] += r / n;
        }
        for j in 0..width {
            g[j] += 1e-4 * w[j];
        }
        for j in 0..=width {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            w[j] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
    }
    w
}

fn logistic_score(w: &[f64], x: &[usize]) -> f64 {
    w[w.len() - 1] + x.iter().map(|&j| w[j]).sum::<f64>()
}

#[test]
fn per_scenario_logistic_beats_pooled() {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, eval) = split(&data.dataset, 0.8, 42).unwrap();
    let width = data.one_hot_width();
    let enc = |ds: &midpg::Dataset| -> Vec<Vec<usize>> { ds.samples.iter().map(|s| data.active_slots(s)).collect() };
    let (xt, xe) = (enc(&train), enc(&eval));
    let yt: Vec<u8> = train.samples.iter().map(|s| s.label).collect();
    let ye: Vec<u8> = eval.samples.iter().map(|s| s.label).collect();

    let pooled = logistic_fit(&xt, &yt, width);
    let pooled_scores: Vec<f64> = xe.iter().map(|x| logistic_score(&pooled, x)).collect();

    let mut per_scores = vec![0.0; xe.len()];
    for d in 0..train.num_scenarios() {
        let idx: Vec<usize> = (0..xt.len()).filter(|&i| train.samples[i].scenario_id == d).collect();
        let xs: Vec<Vec<usize>> = idx.iter().map(|&i| xt[i].clone()).collect();
        let ys: Vec<u8> = idx.iter().map(|&i| yt[i]).collect();
        let w = logistic_fit(&xs, &ys, width);
        for (i, s) in eval.samples.iter().enumerate() {
            if s.scenario_id == d {
                per_scores[i] = logistic_score(&w, &xe[i]);
            }
        }
    }
    let pooled_auc = auc(&pooled_scores, &ye).unwrap();
    let per_auc = auc(&per_scores, &ye).unwrap();
    assert!(per_auc >= pooled_auc + 0.01, "per-scenario {per_auc} vs pooled {pooled_auc}");
}

#[test]
fn csv_roundtrip_is_identity() {
    let spec = SyntheticSpec {
        samples_per_scenario: 50,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    midpg::write_csv(&ds, &path).unwrap();
    let back = midpg::load_csv(&path, &ds.schema, Some(&ds.vocab)).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn ones_weighting_has_no_generators() {
    let model = Model::new(ModelConfig::plain(), &small_schema(), 0).unwrap();
    assert!(!model.is_modulated());
    assert_eq!(model.config().weighting, Weighting::Ones);
    assert!(model.discriminators().is_empty());
}
