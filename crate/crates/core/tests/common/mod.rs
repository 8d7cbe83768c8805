//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use midpg::data::Sample;
use midpg::mir::{model_mi_loss, shuffle_negatives};
use midpg::train::bce_loss;
use midpg::{DwmVariant, Model, ModelConfig, RepeatMode, Rng, Schema, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
}

/// Largest relative error between `d sum(w * f(inputs)) / d inputs` and
/// central differences, where `w` is a fixed weighting of the output.
pub fn max_gradient_error<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], weights: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().trainable())).collect();
        let out = f(&mut tape, &vars);
        let n = tape.value(out).len();
        let w: Vec<f64> = match weights {
            Some(w) => w.to_vec(),
            None => (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect(),
        };
        let wv = tape.constant(tape.shape(out).to_vec(), w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .map(|&v| grads.get(v).map_or(vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        (tape.value(loss)[0], g, w)
    };
    let (_, analytic, w) = eval(&inputs, None);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].values_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].values_mut()[i] -= STEP;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

/// Worst finite-difference error of every differentiable primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let pos = Tensor::new(vec![3, 4], a.values().iter().map(|x| x.abs() + 0.1).collect()).unwrap();
    let bias = random(&[4], &mut rng);
    let m = random(&[4, 5], &mut rng);
    let x = random(&[2, 3, 2], &mut rng);
    let y = random(&[2, 2, 4], &mut rng);
    let c = random(&[3, 2], &mut rng);
    let h = random(&[3, 8], &mut rng);
    let s = random(&[3, 2, 3], &mut rng);
    let w = random(&[8, 6], &mut rng);
    let ab = || vec![a.clone(), b.clone()];
    let only_a = || vec![a.clone()];
    let mut out = vec![
        ("add", max_gradient_error(ab(), |t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", max_gradient_error(ab(), |t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", max_gradient_error(ab(), |t, v| t.mul(v[0], v[1]).unwrap())),
        ("affine", max_gradient_error(only_a(), |t, v| t.affine(v[0], -1.5, 0.3))),
        ("scale", max_gradient_error(only_a(), |t, v| t.scale(v[0], 2.5))),
        ("sigmoid", max_gradient_error(only_a(), |t, v| t.sigmoid(v[0]))),
        ("relu", max_gradient_error(only_a(), |t, v| t.relu(v[0]))),
        ("clamp", max_gradient_error(only_a(), |t, v| t.clamp(v[0], -1.0, 1.0))),
        ("ln", max_gradient_error(vec![pos], |t, v| t.ln(v[0]))),
        ("sum", max_gradient_error(only_a(), |t, v| t.sum(v[0]))),
        ("mean", max_gradient_error(only_a(), |t, v| t.mean(v[0]))),
        ("add_row", max_gradient_error(vec![a.clone(), bias], |t, v| t.add_row(v[0], v[1]).unwrap())),
        ("matmul", max_gradient_error(vec![a.clone(), m], |t, v| t.matmul(v[0], v[1]).unwrap())),
        ("batch_matmul", max_gradient_error(vec![x.clone(), y], |t, v| t.batch_matmul(v[0], v[1]).unwrap())),
        ("broadcast_batch", max_gradient_error(only_a(), |t, v| t.broadcast_batch(v[0], 3).unwrap())),
        ("concat", max_gradient_error(vec![a.clone(), c], |t, v| t.concat(&[v[0], v[1], v[0]]).unwrap())),
        ("reshape", max_gradient_error(only_a(), |t, v| t.reshape(v[0], vec![2, 6]).unwrap())),
        ("gather_rows", max_gradient_error(only_a(), |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap())),
    ];
    for mode in [RepeatMode::Tile, RepeatMode::Block] {
        out.push(("repeat", max_gradient_error(vec![x.clone()], move |t, v| t.repeat(v[0], 6, 4, mode).unwrap())));
        out.push((
            "modulated_linear",
            max_gradient_error(vec![h.clone(), s.clone(), w.clone()], move |t, v| {
                t.modulated_linear(v[0], v[1], v[2], mode).unwrap()
            }),
        ));
    }
    out
}

pub fn tiny_samples() -> (Schema, Vec<Sample>) {
    let schema = Schema::uniform(3, 1, 1, 4).unwrap();
    let sample = |scenario_id, aware_features, agnostic_features, label| Sample {
        scenario_id,
        aware_features,
        agnostic_features,
        label,
    };
    let samples = vec![
        sample(0, vec![0, 1], vec![3], 1),
        sample(2, vec![2, 0], vec![1], 0),
        sample(1, vec![1, 3], vec![1], 1),
    ];
    (schema, samples)
}

/// Objective `BCE + L_mi` with a fixed negative permutation, and its gradient
/// per parameter.
pub fn objective(model: &Model, samples: &[&Sample], perm: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let binding = model.params().bind(&mut tape);
    let fwd = model.forward_batch(&mut tape, &binding, samples).unwrap();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let cvr = bce_loss(&mut tape, fwd.prob, &labels).unwrap();
    let mi = model_mi_loss(&mut tape, model, &binding, &fwd, perm.to_vec()).unwrap();
    let loss = tape.add(cvr, mi).unwrap();
    let grads = tape.backward(loss).unwrap();
    let per_param = model
        .params()
        .iter()
        .map(|(id, _, t)| grads.get(binding.var(id)).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (tape.value(loss)[0], per_param)
}

pub fn randomize_all(model: &mut Model, seed: u64) {
    // Non-zero discriminator output layers, so MI gradients reach everything.
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = model.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).values_mut() {
            *v = rng.uniform(-0.8, 0.8);
        }
    }
}

pub struct PipelineCheck {
    pub max_rel_err: f64,
    pub worst: String,
    /// Parameter-name prefixes that received a non-zero gradient.
    pub groups: Vec<String>,
}

/// Full-objective gradient of a tiny model of `variant` against central
/// differences over every parameter.
pub fn pipeline_check(variant: DwmVariant) -> PipelineCheck {
    let (schema, samples) = tiny_samples();
    let refs: Vec<&Sample> = samples.iter().collect();
    let perm = shuffle_negatives(3, &mut Rng::new(5)).unwrap();
    let mut cfg = ModelConfig {
        embed_dim: 2,
        hidden_dims: vec![4, 2],
        discriminator_hidden: 3,
        ..ModelConfig::default()
    };
    cfg.dwm.variant = variant;
    cfg.dwm.generator_hidden = 3;
    cfg.dwm.row_divisor = 2;
    cfg.dwm.col_divisor = 2;
    let mut model = Model::new(cfg, &schema, 8).unwrap();
    randomize_all(&mut model, 17);
    let (_, analytic) = objective(&model, &refs, &perm);
    let ids: Vec<_> = model.params().iter().map(|(id, n, _)| (id, n.to_string())).collect();
    let mut groups = BTreeSet::new();
    let (mut max_rel_err, mut worst) = (0.0f64, String::new());
    for (p, (id, name)) in ids.iter().enumerate() {
        for i in 0..model.params().get(*id).numel() {
            let orig = model.params().get(*id).values()[i];
            model.params_mut().get_mut(*id).values_mut()[i] = orig + STEP;
            let up = objective(&model, &refs, &perm).0;
            model.params_mut().get_mut(*id).values_mut()[i] = orig - STEP;
            let down = objective(&model, &refs, &perm).0;
            model.params_mut().get_mut(*id).values_mut()[i] = orig;
            let a = analytic[p][i];
            let err = rel_err(a, (up - down) / (2.0 * STEP));
            if err > max_rel_err {
                max_rel_err = err;
                worst = format!("{name}[{i}]");
            }
            if a != 0.0 {
                groups.insert(name.split('.').next().unwrap().to_string());
            }
        }
    }
    PipelineCheck {
        max_rel_err,
        worst,
        groups: groups.into_iter().collect(),
    }
}

pub fn expected_groups(variant: DwmVariant) -> Vec<String> {
    let names: &[&str] = match variant {
        DwmVariant::Non | DwmVariant::Rc => &["backbone", "disc", "embed", "gen"],
        _ => &["backbone", "disc", "embed", "gen", "share"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

pub fn random_samples(schema: &Schema, n: usize, rng: &mut Rng) -> Vec<Sample> {
    let aware: Vec<usize> = schema.aware_fields().map(|f| f.vocab_size).collect();
    let agnostic: Vec<usize> = schema.agnostic_fields().map(|f| f.vocab_size).collect();
    (0..n)
        .map(|_| {
            let aw: Vec<usize> = aware.iter().map(|&v| rng.below(v)).collect();
            Sample {
                scenario_id: aw[0],
                aware_features: aw,
                agnostic_features: agnostic.iter().map(|&v| rng.below(v)).collect(),
                label: rng.bernoulli(0.5) as u8,
            }
        })
        .collect()
}

/// Plain-Rust backbone forward, with every hidden weight multiplied by
/// `weight_scale`.
pub fn oracle_dnn(model: &Model, sample: &Sample, weight_scale: f64) -> f64 {
    let p = model.params();
    let get = |name: &str| p.get(p.find(name).unwrap());
    let schema = model.schema();
    let mut h = Vec::new();
    let ids = sample.aware_features.iter().chain(&sample.agnostic_features);
    for (f, &id) in schema.aware_fields().chain(schema.agnostic_fields()).zip(ids) {
        let t = get(&format!("embed.{}", f.name));
        let e = t.shape()[1];
        h.extend_from_slice(&t.values()[id * e..(id + 1) * e]);
    }
    for l in 0..model.num_layers() {
        let w = get(&format!("backbone.{l}.weight"));
        let b = get(&format!("backbone.{l}.bias"));
        let (dm, dn) = (w.shape()[0], w.shape()[1]);
        h = (0..dn)
            .map(|n| {
                let z: f64 = (0..dm).map(|m| h[m] * w.values()[m * dn + n] * weight_scale).sum::<f64>() + b.values()[n];
                z.max(0.0)
            })
            .collect();
    }
    let w = get("backbone.out.weight");
    let b = get("backbone.out.bias");
    let z: f64 = h.iter().zip(w.values()).map(|(a, b)| a * b).sum::<f64>() + b.values()[0];
    1.0 / (1.0 + (-z).exp())
}

/// Pairwise AUC with ties counted as one half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            num += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    num as f64 / (2 * pairs) as f64
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Checks `cases` random configurations whose factor sizes divide the layer
/// shapes: expanded weighting entries in (0, 1), at most `d_r * d_c` distinct
/// values, pre-sigmoid compact rank at most `d_k`. Returns the first
/// violation found.
pub fn weighting_structure(cases: u64, seed: u64) -> Result<(), String> {
    use midpg::LowRank;
    let mut rng = Rng::new(seed);
    let schema = Schema::uniform(2, 1, 1, 4).unwrap();
    let samples = random_samples(&schema, 2, &mut rng);
    let refs: Vec<&Sample> = samples.iter().collect();
    for case in 0..cases {
        let embed = 1 + rng.below(3);
        let hidden = vec![1 + rng.below(12), 1 + rng.below(12)];
        let shapes = [(3 * embed, hidden[0]), (hidden[0], hidden[1])];
        let variant = DwmVariant::ALL[1 + rng.below(3)];
        let layers: Vec<LowRank> = shapes
            .iter()
            .map(|&(m, n)| {
                let dr = divisors(m);
                let dc = divisors(n);
                LowRank {
                    d_r: dr[rng.below(dr.len())],
                    d_c: dc[rng.below(dc.len())],
                    d_k: 1 + rng.below(m.min(n)),
                }
            })
            .collect();
        let mut cfg = ModelConfig {
            embed_dim: embed,
            hidden_dims: hidden,
            ..ModelConfig::default()
        };
        cfg.dwm.variant = variant;
        cfg.dwm.repeat_mode = if rng.bernoulli(0.5) { RepeatMode::Block } else { RepeatMode::Tile };
        cfg.dwm.layers = Some(layers.clone());
        let model = Model::new(cfg, &schema, case).map_err(|e| format!("case {case}: {e}"))?;
        let factors = model.weighting_factors(&refs).map_err(|e| format!("case {case}: {e}"))?;
        for (f, size) in factors.iter().zip(&layers) {
            let s = f.expanded().unwrap();
            let per = f.d_m * f.d_n;
            for i in 0..f.batch() {
                let vals = &s.values()[i * per..(i + 1) * per];
                if !vals.iter().all(|&v| v > 0.0 && v < 1.0) {
                    return Err(format!("case {case}: entry outside (0, 1)"));
                }
                let distinct: BTreeSet<u64> = vals.iter().map(|v| v.to_bits()).collect();
                if distinct.len() > size.d_r * size.d_c {
                    return Err(format!("case {case}: {} distinct values", distinct.len()));
                }
                let k = size.d_r * size.d_c;
                let logits = &f.logits.values()[i * k..(i + 1) * k];
                let mut sv: Vec<f64> = nalgebra::DMatrix::from_row_slice(size.d_r, size.d_c, logits)
                    .singular_values()
                    .iter()
                    .copied()
                    .collect();
                sv.sort_by(|a, b| b.total_cmp(a));
                if let Some(&x) = sv.iter().skip(size.d_k).find(|&&x| x >= 1e-9) {
                    return Err(format!("case {case}: singular value {x} beyond d_k = {}", size.d_k));
                }
            }
        }
    }
    Ok(())
}
