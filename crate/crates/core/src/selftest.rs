//! Quick runtime versions of the crate's invariant suites.
//!
//! Each check is small enough that the whole set finishes in a few seconds,
//! so the command-line `selftest` can run it on any machine before trusting
//! longer experiments.

use std::time::Instant;

use rand::Rng;

use crate::attention::{gumbel_softmax, soft_attention, uniform};
use crate::datagen::{decode_dataset, encode_dataset, reverse_clip, DatasetConfig, Split};
use crate::eval::{localization_pr, LocalizationInput, LocalizationOptions};
use crate::harness::{Checkpoint, Network, RunConfig};
use crate::losses::{default_lambda, kl_per_slice, kl_to_uniform, total_loss, LossInputs};
use crate::recognition::{pool, PoolingMode};
use crate::rng::stream;
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn gradients() -> Outcome {
    let mut rng = stream(0, "selftest/grad");
    let phi = random(&[2, 2, 3, 3, 4], &mut rng);
    let w_a = random(&[4], &mut rng);
    let w_r = random(&[4, 3], &mut rng);
    let target = {
        let mut tape = Tape::new();
        let l = tape.constant(random(&[2, 2, 3, 3], &mut rng));
        let m = tape.softmax_slices(l).map_err(|e| e.to_string())?;
        tape.value(m).clone()
    };
    let report = check_gradients(&[phi, w_a, w_r], 1e-4, |tape, v| {
        let a = soft_attention(tape, v[0], v[1])?;
        let pooled = pool(tape, a, v[0], PoolingMode::default())?;
        let logits = tape.matmul(pooled, v[2])?;
        let probs = tape.softmax_last(logits)?;
        let t = tape.constant(target.clone());
        let inputs = LossInputs {
            probs,
            labels: vec![0, 2],
            distill: Some((a, t)),
            uniform_reg: vec![a],
            featmatch: None,
            lambda1: 0.3,
            lambda2: 0.2,
            lambda_fm: 0.0,
        };
        Ok(total_loss(tape, &inputs)?.0)
    })
    .map_err(|e| e.to_string())?;
    ensure(
        report.max_relative_error < 1e-4,
        format!(
            "max relative error {:.2e} over {} entries",
            report.max_relative_error, report.checked
        ),
    )
}

fn attention_maps() -> Outcome {
    let mut rng = stream(0, "selftest/attention");
    let mut worst = 0.0f64;
    for i in 0..200 {
        let mut tape = Tape::<f64>::new();
        let phi = tape.constant(random(&[1, 2, 3, 4, 5], &mut rng).map(|v| v * 5.0));
        let w = tape.constant(random(&[5], &mut rng));
        let map = if i % 2 == 0 {
            soft_attention(&mut tape, phi, w)
        } else {
            let logits = tape.pointwise_conv(phi, w).map_err(|e| e.to_string())?;
            gumbel_softmax(&mut tape, logits, 0.5, &mut rng)
        }
        .map_err(|e| e.to_string())?;
        for slice in tape.value(map).data().chunks(12) {
            if slice.iter().any(|&v| v < 0.0) {
                return Err("negative attention cell".into());
            }
            worst = worst.max((slice.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst < 1e-5, format!("worst slice-sum error {worst:.2e}"))
}

fn kl_identities() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let mut worst = 0.0f64;
    for n in [4usize, 16, 64] {
        let mut delta = Tensor::zeros(vec![1, 1, n]);
        delta.data_mut()[n / 2] = 1.0;
        let d = tape.constant(delta);
        let kl = kl_to_uniform(&mut tape, d).map_err(|e| e.to_string())?;
        worst = worst.max((tape.value(kl).data()[0] - (n as f64).ln()).abs());
    }
    let u = tape.constant(uniform(&[1, 2, 2, 2]));
    let same = kl_per_slice(&mut tape, u, u).map_err(|e| e.to_string())?;
    let lambda = default_lambda([4, 8, 8]);
    ensure(
        worst < 1e-6 && tape.value(same).data()[0].abs() < 1e-9 && lambda == 1.0 / 256.0,
        format!("KL(delta||U) error {worst:.2e}, lambda {lambda}"),
    )
}

fn datagen_roundtrip() -> Outcome {
    let cfg = DatasetConfig {
        train_per_class: 1,
        test_per_class: 1,
        ..DatasetConfig::default()
    };
    let samples = cfg.generate_split(3, Split::Train).map_err(|e| e.to_string())?;
    for s in &samples {
        if reverse_clip(&reverse_clip(s)) != *s {
            return Err(format!("double reversal changed a clip of label {}", s.label));
        }
    }
    let bytes = encode_dataset(&samples).map_err(|e| e.to_string())?;
    let back = decode_dataset(&bytes).map_err(|e| e.to_string())?;
    let again = encode_dataset(&back).map_err(|e| e.to_string())?;
    ensure(
        back == samples && again == bytes,
        format!("{} clips, {} bytes", samples.len(), bytes.len()),
    )
}

fn checkpoint_roundtrip() -> Outcome {
    let mut config = RunConfig::teacher();
    config.widths = vec![4, 4, 4];
    config.attn_channels = 4;
    let net = Network::new(&config).map_err(|e| e.to_string())?;
    let mut rng = stream(5, "selftest/checkpoint");
    let (params, stats) = net.init::<f32, _>(&mut rng).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        config,
        params,
        stats,
        velocity: Default::default(),
        epoch: 0,
        lr: 0.01,
        metrics: Default::default(),
    };
    let bytes = ckpt.encode().map_err(|e| e.to_string())?;
    let back = Checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    let again = back.encode().map_err(|e| e.to_string())?;
    ensure(back == ckpt && again == bytes, format!("{} bytes", bytes.len()))
}

fn localization_perfect_map() -> Outcome {
    let mut map = Tensor::zeros(vec![1, 8, 8]);
    for y in 2..5 {
        for x in 3..6 {
            map.data_mut()[y * 8 + x] = 1.0 / 9.0;
        }
    }
    let boxes = [[3u16, 2, 6, 5]];
    let input = LocalizationInput {
        map: &map,
        boxes: &boxes,
        frame_size: (8, 8),
        label: 0,
    };
    let opts = LocalizationOptions {
        resolution: 8,
        tolerance_base: 0,
        recall_dilated: false,
    };
    let report = localization_pr(&[input], opts).map_err(|e| e.to_string())?;
    ensure(report.best.f1 == 1.0, format!("best F1 {}", report.best.f1))
}

/// Run every check in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    type Check = fn() -> Outcome;
    let checks: [(&'static str, Check); 6] = [
        ("gradients", gradients),
        ("attention-maps", attention_maps),
        ("kl-identities", kl_identities),
        ("dataset-roundtrip", datagen_roundtrip),
        ("checkpoint-roundtrip", checkpoint_roundtrip),
        ("localization", localization_perfect_map),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = f();
            let seconds = start.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => CheckResult {
                    name,
                    passed: true,
                    detail,
                    seconds,
                },
                Err(detail) => CheckResult {
                    name,
                    passed: false,
                    detail,
                    seconds,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
