//! Finite-difference gradient suite run in 64-bit: the attention modules, the
//! losses, and a whole model end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ChannelAttention, PositionAttention};
use crate::error::Result;
use crate::loss::{combined_loss, dice_loss, target_map, LossMode, LossOptions};
use crate::model::{DaTransUnet, ModelConfig};
use crate::nn::{ForwardCtx, Module};
use crate::tensor::gradcheck::{central_differences, compare, gradcheck, GradcheckOptions, GradcheckReport};
use crate::tensor::{no_grad, Tensor};

/// Relative-error bound for single modules and losses.
pub const MODULE_TOLERANCE: f64 = 1e-5;
/// Relative-error bound for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Finite-difference step for the model check. Larger steps straddle ReLU kinks
/// often enough to spoil the estimate; smaller ones amplify roundoff in the loss.
pub const MODEL_STEP: f64 = 2e-6;
/// Gradients below this size are judged on absolute error at this scale.
pub const MODEL_DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
}

#[derive(Debug, Clone, Default)]
pub struct GradientSuite {
    pub entries: Vec<SuiteEntry>,
}

impl GradientSuite {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed())
    }

    pub fn get(&self, name: &str) -> Option<&GradcheckReport> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.report)
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())?)
}

fn module_options() -> GradcheckOptions {
    GradcheckOptions { step: 1e-6, tolerance: MODULE_TOLERANCE, denom_floor: 1e-6 }
}

/// Position attention with a non-zero gate, checked against a random projection of its output.
pub fn check_position_attention(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pam = PositionAttention::<f64>::new("pam", 8, 4, &mut rng);
    pam.alpha.set_data(vec![0.7]);
    let x = random(&[2, 8, 4, 4], 1.0, &mut rng)?;
    let w = random(&[2, 8, 4, 4], 1.0, &mut rng)?;
    Ok(gradcheck(|x| pam.forward(x).map_err(into_tensor)?.mul(&w)?.sum(), &x, &module_options())?)
}

pub fn check_channel_attention(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cam = ChannelAttention::<f64>::new("cam");
    cam.beta.set_data(vec![0.6]);
    let x = random(&[2, 6, 4, 4], 0.5, &mut rng)?;
    let w = random(&[2, 6, 4, 4], 1.0, &mut rng)?;
    Ok(gradcheck(|x| cam.forward(x).map_err(into_tensor)?.mul(&w)?.sum(), &x, &module_options())?)
}

pub fn check_dice_loss(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 3, 5, 5], 2.0, &mut rng)?;
    let labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..3)).collect();
    let target = target_map::<f64>(&labels, &[2, 3, 5, 5]).map_err(into_tensor)?;
    Ok(gradcheck(|x| dice_loss(&x.softmax(1)?, &target, 1.0).map_err(into_tensor), &x, &module_options())?)
}

/// Combined loss in both binary (one channel) and multiclass form.
pub fn check_combined_loss(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LossOptions::default();
    let multi = random(&[2, 3, 5, 5], 2.0, &mut rng)?;
    let labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..3)).collect();
    let mut report = gradcheck(
        |x| Ok(combined_loss(x, &labels, LossMode::Multiclass, opts).map_err(into_tensor)?.total),
        &multi,
        &module_options(),
    )?;
    let binary = random(&[2, 1, 5, 5], 2.0, &mut rng)?;
    let mask: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
    report.merge(gradcheck(
        |x| Ok(combined_loss(x, &mask, LossMode::Binary, opts).map_err(into_tensor)?.total),
        &binary,
        &module_options(),
    )?);
    Ok(report)
}

fn into_tensor(e: crate::error::Error) -> crate::tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}

/// Whole-model loss gradient with respect to `per_parameter` sampled entries of every
/// parameter tensor. Dropout is disabled and batch norm uses batch statistics, so the
/// loss is a deterministic function of the parameters; attention gates start non-zero
/// so that every projection receives gradient.
pub fn check_model(cfg: &ModelConfig, per_parameter: usize, seed: u64) -> Result<GradcheckReport> {
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let mut model = DaTransUnet::<f64>::new(&cfg)?;
    for p in model.param_list_mut() {
        if p.name().ends_with("pam.alpha") || p.name().ends_with("cam.beta") {
            p.set_data(vec![0.5]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.input_size;
    let images = Tensor::from_vec(
        &[2, cfg.in_channels, s, s],
        (0..2 * cfg.in_channels * s * s).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let classes = cfg.label_classes() as u8;
    let labels: Vec<u8> = (0..2 * s * s).map(|_| rng.random_range(0..classes)).collect();
    let mode = LossMode::for_channels(cfg.num_classes);
    let opts = LossOptions::default();
    let loss = |model: &DaTransUnet<f64>| -> Result<Tensor<f64>> {
        let logits = model.forward(&images, &mut ForwardCtx::train(seed))?;
        Ok(combined_loss(&logits, &labels, mode, opts)?.total)
    };

    model.param_list().iter().for_each(|p| p.zero_grad());
    loss(&model)?.backward()?;
    let analytic: Vec<Vec<f64>> =
        model.param_list().iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let gc = GradcheckOptions { step: MODEL_STEP, tolerance: MODEL_TOLERANCE, denom_floor: MODEL_DENOM_FLOOR };
    let mut report = GradcheckReport { entries: Vec::new(), tolerance: MODEL_TOLERANCE };
    let mut offset = 0;
    for (k, grads) in analytic.iter().enumerate() {
        let numel = grads.len();
        let indices: Vec<usize> = if numel <= per_parameter {
            (0..numel).collect()
        } else {
            (0..per_parameter).map(|_| rng.random_range(0..numel)).collect()
        };
        let original = model.param_list()[k].data().to_vec();
        let numeric = central_differences(&original, &indices, gc.step, |values| {
            model.param_list_mut()[k].set_data(values.to_vec());
            let v = no_grad(|| loss(&model)).map_err(into_tensor)?;
            Ok(v.data()[0])
        })?;
        model.param_list_mut()[k].set_data(original);
        let picked: Vec<f64> = indices.iter().map(|&i| grads[i]).collect();
        let global: Vec<usize> = indices.iter().map(|&i| offset + i).collect();
        report.merge(compare(&global, &picked, &numeric, &gc));
        offset += numel;
    }
    Ok(report)
}

/// Runs every check; `model_cfg` sets the end-to-end model.
pub fn gradient_suite(model_cfg: &ModelConfig, per_parameter: usize, seed: u64) -> Result<GradientSuite> {
    let mut suite = GradientSuite::default();
    let mut push = |name: &str, report: GradcheckReport| suite.entries.push(SuiteEntry { name: name.into(), report });
    push("position_attention", check_position_attention(seed)?);
    push("channel_attention", check_channel_attention(seed)?);
    push("dice_loss", check_dice_loss(seed)?);
    push("combined_loss", check_combined_loss(seed)?);
    push("model", check_model(model_cfg, per_parameter, seed)?);
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_checks_pass() {
        for report in [check_position_attention(1).unwrap(), check_channel_attention(2).unwrap()] {
            assert!(report.passed(), "max rel error {}", report.max_rel_error());
        }
        assert!(check_dice_loss(3).unwrap().passed());
        assert!(check_combined_loss(4).unwrap().passed());
    }

    #[test]
    fn model_check_samples_every_parameter() {
        let cfg = ModelConfig::toy(32, 16, 1);
        let report = check_model(&cfg, 1, 9).unwrap();
        let tensors = DaTransUnet::<f64>::new(&cfg).unwrap().param_list().len();
        assert_eq!(report.entries.len(), tensors);
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }
}
