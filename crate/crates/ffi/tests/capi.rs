use std::ffi::{CStr, CString};
use std::ptr;

use datransunet::model::ModelConfig;
use datransunet::nn::{ForwardCtx, Module};
use datransunet::tensor::{no_grad, Tensor};
use datransunet::train::{save_checkpoint, Optimizer, OptimizerKind, OptimizerSettings};
use datransunet_ffi::*;

const TOY: &str = "input_size = 32\nnum_classes = 3\nstem_channels = [8, 16, 16, 32]\n\
    transformer_hidden = 16\ntransformer_layers = 1\ntransformer_heads = 2\nmlp_dim = 32\n\
    decoder_channels = [16, 8, 8]\n";

fn last_error() -> String {
    let p = dtu_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(toml: &str, dtype: u32) -> *mut DtuModel {
    let cfg = CString::new(toml).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dtu_model_new(cfg.as_ptr(), dtype, &mut model) }, DtuStatus::Ok);
    assert!(!model.is_null() && dtu_last_error().is_null());
    model
}

fn image(len: usize) -> Vec<f32> {
    (0..len).map(|i| ((i * 37) % 101) as f32 / 101.0).collect()
}

#[test]
fn forward_and_predict_through_handle() {
    let model = new_model(TOY, DTU_DTYPE_F32);
    let mut info = DtuModelInfo::default();
    assert_eq!(unsafe { dtu_model_info(model, &mut info) }, DtuStatus::Ok);
    assert_eq!((info.in_channels, info.num_classes, info.input_size, info.dtype), (3, 3, 32, DTU_DTYPE_F32));
    assert!(info.parameters > 0);

    let input = image(2 * 3 * 32 * 32);
    let mut logits = vec![0f32; 2 * 3 * 32 * 32];
    let status = unsafe { dtu_model_forward(model, input.as_ptr(), input.len(), 2, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(status, DtuStatus::Ok);
    assert!(logits.iter().all(|v| v.is_finite()));

    let mut labels = vec![255u8; 2 * 32 * 32];
    let status = unsafe { dtu_model_predict(model, input.as_ptr(), input.len(), 2, labels.as_mut_ptr(), labels.len()) };
    assert_eq!(status, DtuStatus::Ok);
    for (p, px) in labels.iter().enumerate() {
        let (b, rest) = (p / 1024, p % 1024);
        let scores: Vec<f32> = (0..3).map(|c| logits[(b * 3 + c) * 1024 + rest]).collect();
        let best = (0..3).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
        assert_eq!(*px as usize, best);
    }
    unsafe { dtu_model_free(model) };
}

#[test]
fn wrong_lengths_and_nulls_are_reported() {
    let model = new_model(TOY, DTU_DTYPE_F64);
    let input = image(3 * 32 * 32);
    let mut logits = vec![0f32; 10];
    let status = unsafe { dtu_model_forward(model, input.as_ptr(), input.len(), 1, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(status, DtuStatus::InvalidArgument);
    assert!(last_error().contains("logits buffer"));
    let status =
        unsafe { dtu_model_forward(model, input.as_ptr(), input.len() - 1, 1, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(status, DtuStatus::InvalidArgument);
    let status = unsafe { dtu_model_forward(ptr::null(), input.as_ptr(), input.len(), 1, logits.as_mut_ptr(), 1) };
    assert_eq!(status, DtuStatus::NullPointer);
    assert_eq!(unsafe { dtu_model_info(model, ptr::null_mut()) }, DtuStatus::NullPointer);
    unsafe { dtu_model_free(model) };
    unsafe { dtu_model_free(ptr::null_mut()) };
}

#[test]
fn bad_config_and_dtype() {
    let mut model = ptr::null_mut();
    let bad = CString::new("input_size = 30").unwrap();
    assert_eq!(unsafe { dtu_model_new(bad.as_ptr(), DTU_DTYPE_F32, &mut model) }, DtuStatus::Config);
    assert!(last_error().contains("multiple of 16"));
    let unknown = CString::new("widht = 3").unwrap();
    assert_eq!(unsafe { dtu_model_new(unknown.as_ptr(), DTU_DTYPE_F32, &mut model) }, DtuStatus::Config);
    let ok = CString::new(TOY).unwrap();
    assert_eq!(unsafe { dtu_model_new(ok.as_ptr(), 7, &mut model) }, DtuStatus::InvalidArgument);
    assert!(model.is_null());
}

#[test]
fn loaded_checkpoint_matches_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: ModelConfig = toml::from_str(TOY).unwrap();
    let net = datransunet::model::DaTransUnet::<f64>::new(&cfg).unwrap();
    let settings = OptimizerSettings { kind: OptimizerKind::Sgd, learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0 };
    save_checkpoint(dir.path(), &net, &Optimizer::new(settings, &net.param_list()), 2).unwrap();

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dtu_model_load(path.as_ptr(), &mut model) }, DtuStatus::Ok);
    let mut info = DtuModelInfo::default();
    assert_eq!(unsafe { dtu_model_info(model, &mut info) }, DtuStatus::Ok);
    assert_eq!(info.dtype, DTU_DTYPE_F64);

    let input = image(3 * 32 * 32);
    let mut logits = vec![0f32; 3 * 32 * 32];
    let status = unsafe { dtu_model_forward(model, input.as_ptr(), input.len(), 1, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(status, DtuStatus::Ok);
    let x = Tensor::from_vec(&[1, 3, 32, 32], input.iter().map(|&v| v as f64).collect()).unwrap();
    let direct = no_grad(|| net.forward(&x, &mut ForwardCtx::eval())).unwrap();
    assert!(direct.data().iter().zip(&logits).all(|(a, b)| *a as f32 == *b));
    unsafe { dtu_model_free(model) };

    let missing = CString::new("/no/such/checkpoint").unwrap();
    assert_eq!(unsafe { dtu_model_load(missing.as_ptr(), &mut model) }, DtuStatus::Io);
}

#[test]
fn mask_metrics_on_known_pair() {
    // 1x4 maps: prediction {0,1}, truth {1,2} for class 1.
    let pred = [1u8, 1, 0, 0];
    let truth = [0u8, 1, 1, 0];
    let mut m = DtuMaskMetrics::default();
    assert_eq!(unsafe { dtu_mask_metrics(pred.as_ptr(), truth.as_ptr(), 1, 4, 1, &mut m) }, DtuStatus::Ok);
    assert_eq!((m.true_pos, m.false_pos, m.false_neg), (1, 1, 1));
    assert!((m.iou - 1.0 / 3.0).abs() < 1e-12 && (m.dice - 0.5).abs() < 1e-12);
    assert_eq!((m.hd, m.hd_sentinel), (1.0, false));

    let empty = [0u8; 4];
    assert_eq!(unsafe { dtu_mask_metrics(pred.as_ptr(), empty.as_ptr(), 2, 2, 1, &mut m) }, DtuStatus::Ok);
    assert!(m.hd_sentinel && (m.hd - 8f64.sqrt()).abs() < 1e-12);
    assert_eq!(unsafe { dtu_mask_metrics(ptr::null(), empty.as_ptr(), 2, 2, 1, &mut m) }, DtuStatus::NullPointer);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(dtu_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/datransunet.h");
    let Ok(status) =
        std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).status()
    else {
        eprintln!("no C compiler available; header syntax not checked");
        return;
    };
    assert!(status.success());
}
