use b3d_core::backbone::{BackboneConfig, Model};
use b3d_core::layout::{prediction_row, TripletSample, Vocab};
use b3d_core::numerics::{Tape, Tensor};
use b3d_core::train::{loss_cap, loss_ce, objective_gradcheck, supervised_terms, BatchSource, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 32;

fn small() -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 16,
        vocab_size: V,
        ..Default::default()
    }
}

fn vocab() -> Vocab {
    Vocab::with_size(V).unwrap()
}

/// A random sample over content ids `1..V-2` with the EOS in the last block.
fn random_sample(rng: &mut ChaCha8Rng, b: usize, n: usize) -> TripletSample {
    let v = vocab();
    let total = b * n;
    let len = rng.random_range(total - b..total);
    let mut gold: Vec<u32> = (0..len).map(|_| rng.random_range(1..v.pad())).collect();
    gold.push(v.eos());
    gold.resize(total, v.pad());
    let lossable: Vec<bool> = gold.iter().map(|&t| t != v.pad()).collect();
    let mut mask: Vec<bool> = (0..total).map(|_| rng.random_bool(0.5)).collect();
    for (m, &t) in mask.iter_mut().zip(&gold).skip(len) {
        *m = *m || t == v.eos() || t == v.pad();
    }
    TripletSample::from_parts(b, n, gold, mask, lossable, Some(n - 1), &v).unwrap()
}

/// Hand-chosen logits for `sample`: row values come from `f(row, class)`.
fn crafted(sample: &TripletSample, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    let rows = sample.physical().len();
    let data: Vec<f64> = (0..rows * V).map(|k| f(k / V, k % V)).collect();
    Tensor::new(&[rows, V], data).unwrap()
}

fn log_softmax(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

fn entropy(row: &[f64]) -> f64 {
    (0..row.len())
        .map(|k| {
            let lp = log_softmax(row, k);
            -lp.exp() * lp
        })
        .sum()
}

fn scalar(tape: &Tape<f64>, v: b3d_core::numerics::Var) -> f64 {
    tape.value(v).data()[0]
}

#[test]
fn uniform_logits_give_log_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_sample(&mut rng, 4, 3);
    let mut tape = Tape::new();
    let x = tape.constant(crafted(&s, |_, _| 0.0));
    let (ce, n) = loss_ce(&mut tape, x, &s).unwrap();
    assert_eq!(n, s.supervised().len());
    assert!((scalar(&tape, ce) - (V as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_gold_logits_drive_ce_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_sample(&mut rng, 4, 3);
    let (rows, targets) = s.supervised_rows();
    let hit = |r: usize, c: usize| rows.iter().zip(&targets).any(|(&rr, &t)| rr == r && t as usize == c);
    let logits = crafted(&s, |r, c| if hit(r, c) { 1e4 } else { 0.0 });
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let (ce, _) = loss_ce(&mut tape, x, &s).unwrap();
    assert!(scalar(&tape, ce) < 1e-12);
}

#[test]
fn cap_is_zero_when_every_prediction_is_wrong() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_sample(&mut rng, 4, 3);
    let (rows, targets) = s.supervised_rows();
    let wrong: Vec<(usize, usize)> = rows
        .iter()
        .zip(&targets)
        .map(|(&r, &t)| (r, (t as usize + 1) % V))
        .collect();
    let logits = crafted(&s, |r, c| {
        if wrong.iter().any(|&(wr, wc)| wr == r && wc == c) {
            3.0
        } else {
            0.0
        }
    });
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let (cap, n) = loss_cap(&mut tape, x, &s).unwrap();
    assert_eq!(n, 0);
    assert_eq!(scalar(&tape, cap), 0.0);
}

#[test]
fn cap_averages_entropy_over_correct_positions_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_sample(&mut rng, 4, 3);
    let (rows, targets) = s.supervised_rows();
    // alternate correct and wrong argmax, with a row-dependent spread
    let pick: Vec<(usize, usize, bool)> = rows
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(k, (&r, &t))| {
            (
                r,
                if k % 2 == 0 { t as usize } else { (t as usize + 3) % V },
                k % 2 == 0,
            )
        })
        .collect();
    let logits = crafted(&s, |r, c| {
        let base = 0.01 * ((r * 7 + c * 3) % 11) as f64;
        match pick.iter().find(|p| p.0 == r) {
            Some(&(_, cls, _)) if cls == c => 2.0 + 0.1 * r as f64,
            _ => base,
        }
    });
    let mut want = 0.0;
    let mut n = 0;
    for &(r, _, ok) in &pick {
        if ok {
            want += entropy(logits.row(r));
            n += 1;
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let (cap, got_n) = loss_cap(&mut tape, x, &s).unwrap();
    assert_eq!(got_n, n);
    assert!((scalar(&tape, cap) - want / n as f64).abs() < 1e-12);
}

#[test]
fn cap_gradient_matches_finite_differences_with_frozen_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_sample(&mut rng, 4, 2);
    let base: Vec<f64> = (0..s.physical().len() * V)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let t = |d: &[f64]| Tensor::new(&[s.physical().len(), V], d.to_vec()).unwrap();
    let gate = {
        let mut tape = Tape::new();
        let x = tape.constant(t(&base));
        supervised_terms(&mut tape, x, &s, None).unwrap().gate
    };
    // force at least one gated row
    let gate: Vec<bool> = gate.iter().enumerate().map(|(k, &g)| g || k == 0).collect();
    let value = |d: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.constant(t(d));
        let terms = supervised_terms(&mut tape, x, &s, Some(&gate)).unwrap();
        scalar(&tape, terms.cap_sum.unwrap())
    };
    let mut tape = Tape::new();
    let x = tape.input(t(&base));
    let terms = supervised_terms(&mut tape, x, &s, Some(&gate)).unwrap();
    let grads = tape.backward(terms.cap_sum.unwrap()).unwrap();
    let g = grads.wrt(x).unwrap().data().to_vec();
    let h = 1e-5;
    let mut work = base.clone();
    for e in 0..base.len() {
        work[e] = base[e] + h;
        let plus = value(&work);
        work[e] = base[e] - h;
        let minus = value(&work);
        work[e] = base[e];
        let num = (plus - minus) / (2.0 * h);
        assert!(
            (num - g[e]).abs() <= 1e-6 * (1.0 + num.abs()),
            "element {e}: {num} vs {}",
            g[e]
        );
    }
}

#[test]
fn ce_matches_an_enumeration_oracle_on_a_real_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::<f64>::init(&small(), 3).unwrap();
    let s = random_sample(&mut rng, 4, 3);
    let logits = model.logits_full(s.physical()).unwrap();
    let mut want = 0.0;
    for &(i, j) in s.supervised() {
        let gold = s.gold_block(i)[j] as usize;
        want -= log_softmax(logits.row(prediction_row(i, j, 4)), gold);
    }
    want /= s.supervised().len() as f64;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = model.forward_full(&mut tape, &bound, s.physical()).unwrap();
    let (ce, _) = loss_ce(&mut tape, x, &s).unwrap();
    assert!((scalar(&tape, ce) - want).abs() < 1e-12);
}

fn train_config(lambda: f64) -> TrainConfig {
    TrainConfig {
        lambda_cap: lambda,
        lr: 1e-2,
        warmup_steps: 0,
        batch_size: 2,
        ..Default::default()
    }
}

#[test]
fn total_is_ce_plus_weighted_cap_and_lambda_zero_is_plain_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch: Vec<_> = (0..3).map(|_| random_sample(&mut rng, 4, 2)).collect();
    let model = Model::<f64>::init(&small(), 1).unwrap();
    let with = Trainer::new(model.clone(), train_config(0.5))
        .unwrap()
        .evaluate(&batch)
        .unwrap();
    let without = Trainer::new(model, train_config(0.0))
        .unwrap()
        .evaluate(&batch)
        .unwrap();
    assert!((with.total - (with.ce + 0.5 * with.cap)).abs() < 1e-12);
    assert_eq!(without.total, without.ce);
    assert_eq!(with.ce, without.ce);
    assert_eq!(with.masked_top1_acc, with.n_gated as f64 / with.n_supervised as f64);
}

#[test]
fn pooling_ignores_order_and_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_sample(&mut rng, 4, 2);
    let b = random_sample(&mut rng, 4, 2);
    let t = Trainer::new(Model::<f64>::init(&small(), 2).unwrap(), train_config(0.5)).unwrap();
    let ab = t.evaluate(&[a.clone(), b.clone()]).unwrap();
    let ba = t.evaluate(&[b, a.clone()]).unwrap();
    assert!((ab.total - ba.total).abs() <= 1e-12);
    let one = t.evaluate(std::slice::from_ref(&a)).unwrap();
    let two = t.evaluate(&[a.clone(), a]).unwrap();
    assert!((one.total - two.total).abs() <= 1e-12);
    assert_eq!(two.n_supervised, 2 * one.n_supervised);
}

#[test]
fn degenerate_batch_is_counted_and_still_steps() {
    let v = vocab();
    let gold = vec![5u32; 8];
    let s = TripletSample::from_parts(4, 2, gold, vec![false; 8], vec![true; 8], None, &v).unwrap();
    assert!(s.supervised().is_empty());
    let mut t = Trainer::new(Model::<f64>::init(&small(), 0).unwrap(), train_config(0.5)).unwrap();
    let before = t.model.clone();
    let rep = t.train_step(&[s]).unwrap();
    assert_eq!(rep.total, 0.0);
    assert_eq!(rep.n_supervised, 0);
    assert_eq!(t.degenerate_batches, 1);
    assert_eq!(t.step(), 1);
    // zero gradient: Adam moments stay zero, so parameters do not move
    assert_eq!(t.model.params()[0].value, before.params()[0].value);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::<f64>::init(&small(), 4).unwrap();
    for p in model.params_mut() {
        if p.name.contains("w_") || p.name == "emb" || p.name == "head" {
            for x in p.value.data_mut() {
                *x *= 20.0;
            }
        }
    }
    let batch: Vec<_> = (0..2).map(|_| random_sample(&mut rng, 4, 2)).collect();
    let rep = objective_gradcheck(&model, &batch, 0.5, 1e-5).unwrap();
    assert!(rep.compared > 1000);
    assert!(rep.passed(1e-4), "max rel err {} at {:?}", rep.max_rel_err, rep.worst);
}

#[test]
fn gate_is_stable_under_tiny_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::<f64>::init(&small(), 5).unwrap();
    let s = random_sample(&mut rng, 4, 3);
    let gate_of = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = m.forward_full(&mut tape, &bound, s.physical()).unwrap();
        supervised_terms(&mut tape, x, &s, None).unwrap().gate
    };
    let base = gate_of(&model);
    let mut work = model.clone();
    for p in work.params_mut() {
        for x in p.value.data_mut() {
            *x += 1e-9;
        }
    }
    assert_eq!(gate_of(&work), base);
}

#[test]
fn rebuilt_trainer_continues_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<_> = (0..6).map(|_| random_sample(&mut rng, 4, 2)).collect();
    let source = BatchSource::Fixed { samples };
    let cfg = TrainConfig {
        warmup_steps: 5,
        ..train_config(0.5)
    };
    let mut straight = Trainer::new(Model::<f64>::init(&small(), 6).unwrap(), cfg.clone()).unwrap();
    straight.run(&source, 20, |_, _, _| Ok(())).unwrap();

    let mut first = Trainer::new(Model::<f64>::init(&small(), 6).unwrap(), cfg.clone()).unwrap();
    first.run(&source, 10, |_, _, _| Ok(())).unwrap();
    // what a checkpoint carries: parameters, moments, step
    let mut resumed = Trainer::new(first.model.clone(), cfg).unwrap();
    resumed.adam = first.adam.clone();
    resumed.run(&source, 20, |_, _, _| Ok(())).unwrap();
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn training_lowers_the_loss_on_a_fixed_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<_> = (0..4).map(|_| random_sample(&mut rng, 4, 2)).collect();
    let source = BatchSource::Fixed {
        samples: samples.clone(),
    };
    let mut t = Trainer::new(
        Model::<f32>::init(&small(), 7).unwrap(),
        TrainConfig {
            batch_size: 4,
            ..train_config(0.5)
        },
    )
    .unwrap();
    let start = t.evaluate(&samples).unwrap();
    t.run(&source, 300, |_, rep, _| {
        assert!(rep.total.is_finite());
        Ok(())
    })
    .unwrap();
    let end = t.evaluate(&samples).unwrap();
    assert!(end.ce < 0.5 * start.ce, "{} -> {}", start.ce, end.ce);
}
