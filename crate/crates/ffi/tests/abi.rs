use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use vtg_core::backbone::{Denoiser, DenoiserConfig};
use vtg_core::config::{DataConfig, RunConfig};
use vtg_core::data::{gen_synthetic, write_pair, SynthSpec, Task};
use vtg_ffi::*;

fn last_error() -> String {
    let p = vtg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn slerp_endpoints_and_errors() {
    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0];
    let mut out = [0.0; 3];
    unsafe {
        assert_eq!(vtg_slerp(a.as_ptr(), b.as_ptr(), 3, 0.0, out.as_mut_ptr()), VtgStatus::Ok);
        assert_eq!(out, a);
        assert_eq!(vtg_slerp(a.as_ptr(), b.as_ptr(), 3, 0.5, out.as_mut_ptr()), VtgStatus::Ok);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-12 && (out[1] - h).abs() < 1e-12);
        assert!(vtg_last_error().is_null());
        assert_eq!(vtg_slerp(ptr::null(), b.as_ptr(), 3, 0.5, out.as_mut_ptr()), VtgStatus::NullPointer);
        assert!(last_error().contains("a is null"));
        assert_eq!(vtg_slerp(a.as_ptr(), b.as_ptr(), 3, 1.5, out.as_mut_ptr()), VtgStatus::InvalidArgument);
    }
}

#[test]
fn metric_entry_points_match_core() {
    let v = [3.0, 1.0, 2.0, 0.5];
    let mut g = 0.0;
    let mut s = 0.0;
    unsafe {
        assert_eq!(vtg_gini(v.as_ptr(), v.len(), &mut g), VtgStatus::Ok);
        assert_eq!(vtg_smoothness(v.as_ptr(), v.len(), &mut s), VtgStatus::Ok);
        assert_eq!(vtg_gini(v.as_ptr(), 0, &mut g), VtgStatus::InvalidArgument);
    }
    assert_eq!(g.to_bits(), vtg_core::metrics::gini(&v).unwrap().to_bits());
    assert_eq!(s.to_bits(), vtg_core::metrics::smoothness_from_distances(&v).unwrap().to_bits());

    // one-dimensional sets: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2
    let a = [0.0, 2.0, 4.0];
    let b = [1.0, 2.0];
    let mut f = 0.0;
    unsafe {
        assert_eq!(vtg_fid(a.as_ptr(), 3, b.as_ptr(), 2, 1, &mut f), VtgStatus::Ok);
        assert_eq!(vtg_fid(a.as_ptr(), 3, b.as_ptr(), 2, 0, &mut f), VtgStatus::InvalidArgument);
    }
    let expected = vtg_core::metrics::fid_from_embeddings(&[vec![0.0], vec![2.0], vec![4.0]], &[vec![1.0], vec![2.0]]).unwrap();
    assert_eq!(f.to_bits(), expected.to_bits());
}

#[test]
fn config_handles() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(vtg_config_new(&mut cfg), VtgStatus::Ok);
        let ok = CString::new("bmp.lambda=0.25").unwrap();
        assert_eq!(vtg_config_set(cfg, ok.as_ptr()), VtgStatus::Ok);
        let bad = CString::new("bmp.lambda=3").unwrap();
        assert_eq!(vtg_config_set(cfg, bad.as_ptr()), VtgStatus::Config);
        let unknown = CString::new("nope.key=1").unwrap();
        assert_eq!(vtg_config_set(cfg, unknown.as_ptr()), VtgStatus::Config);
        vtg_config_free(cfg);

        let text = CString::new("seed = 7\n[bmp]\nlambda = 0.4\n").unwrap();
        let mut c2 = ptr::null_mut();
        assert_eq!(vtg_config_from_toml(text.as_ptr(), &mut c2), VtgStatus::Ok);
        vtg_config_free(c2);
        let broken = CString::new("seed = [").unwrap();
        let mut c3 = ptr::null_mut();
        assert_eq!(vtg_config_from_toml(broken.as_ptr(), &mut c3), VtgStatus::Config);
        assert!(c3.is_null());
        vtg_config_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        let s = vtg_model_load(p.as_ptr(), &mut m);
        assert_ne!(s, VtgStatus::Ok);
    }
    assert!(m.is_null());
    assert!(!last_error().is_empty());
}

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = DenoiserConfig {
        latent_channels: 12,
        latent_height: 4,
        latent_width: 4,
        base_width: 8,
        levels: 2,
        attention_heads: 2,
        frame_count: 5,
        text_embed_dim: 8,
        text_len: 3,
        time_embed_dim: 8,
        groups: 2,
        lora_targets: Vec::new(),
    };
    cfg.data = DataConfig {
        frames: 5,
        size: 8,
        codec_factor: 2,
        count: 2,
    };
    cfg.sampler.steps = 4;
    cfg.lora.enabled = false;
    cfg
}

#[test]
fn generate_through_handles_preserves_endpoints() {
    let cfg = tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let model = Denoiser::new(cfg.model.clone(), candle_core::DType::F32, 3).unwrap();
    let ckpt = dir.path().join("ckpt");
    vtg_core::checkpoint::save_denoiser(&ckpt, &model, serde_json::json!({ "step": 1 })).unwrap();
    let spec = SynthSpec {
        frames: 5,
        size: 8,
        ..SynthSpec::new(Task::Blending)
    };
    let sample = &gen_synthetic(&spec, 1).unwrap()[0];
    let pair = write_pair(dir.path(), sample).unwrap();

    unsafe {
        let mut m = ptr::null_mut();
        let cp = CString::new(ckpt.to_str().unwrap()).unwrap();
        assert_eq!(vtg_model_load(cp.as_ptr(), &mut m), VtgStatus::Ok, "{}", last_error());
        let mut n = 0usize;
        assert_eq!(vtg_model_num_params(m, &mut n), VtgStatus::Ok);
        assert_eq!(n, model.params.num_elements());

        let toml = CString::new(cfg.to_toml().unwrap()).unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(vtg_config_from_toml(toml.as_ptr(), &mut c), VtgStatus::Ok, "{}", last_error());
        let pp = CString::new(pair.to_str().unwrap()).unwrap();
        let mut frames = ptr::null_mut();
        assert_eq!(vtg_generate(m, c, pp.as_ptr(), ptr::null(), &mut frames), VtgStatus::Ok, "{}", last_error());

        let (mut count, mut h, mut w) = (0, 0, 0);
        assert_eq!(vtg_frames_shape(frames, &mut count, &mut h, &mut w), VtgStatus::Ok);
        assert_eq!((count, h, w), (5, 8, 8));
        let mut buf = vec![0u8; h * w * 3];
        assert_eq!(vtg_frames_copy_rgb8(frames, 0, buf.as_mut_ptr(), buf.len()), VtgStatus::Ok);
        assert_eq!(buf, vtg_core::codec::image_to_rgb8(&sample.first_frame).into_raw());
        assert_eq!(vtg_frames_copy_rgb8(frames, 4, buf.as_mut_ptr(), buf.len()), VtgStatus::Ok);
        assert_eq!(buf, vtg_core::codec::image_to_rgb8(&sample.last_frame).into_raw());
        assert_eq!(vtg_frames_copy_rgb8(frames, 5, buf.as_mut_ptr(), buf.len()), VtgStatus::InvalidArgument);
        assert_eq!(vtg_frames_copy_rgb8(frames, 0, buf.as_mut_ptr(), 3), VtgStatus::ShapeMismatch);

        vtg_frames_free(frames);
        vtg_config_free(c);
        vtg_model_free(m);
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vtg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "vtg_last_error",
        "vtg_version",
        "vtg_slerp",
        "vtg_gini",
        "vtg_smoothness",
        "vtg_fid",
        "vtg_config_new",
        "vtg_config_from_toml",
        "vtg_config_set",
        "vtg_config_free",
        "vtg_model_load",
        "vtg_model_num_params",
        "vtg_model_free",
        "vtg_generate",
        "vtg_frames_shape",
        "vtg_frames_copy_rgb8",
        "vtg_frames_free",
        "VTG_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from vtg.h");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).output() else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(vtg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
