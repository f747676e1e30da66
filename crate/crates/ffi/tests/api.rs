use std::ffi::{CStr, CString};
use std::ptr;

use ssda_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ssda_last_error()) }.to_string_lossy().into_owned()
}

/// Tiny model: 8×8 images, one encoder layer.
fn small_config() -> *mut SsdaConfig {
    let cfg = ssda_config_new();
    for (k, v) in [
        ("periodicity", "4"),
        ("image_height", "8"),
        ("image_width", "8"),
        ("patch_size", "2"),
        ("d_model", "8"),
        ("n_heads", "2"),
        ("e_layers", "1"),
        ("d_ff", "16"),
        ("lora_rank", "2"),
        ("lookback", "16"),
        ("horizon", "4"),
    ] {
        assert_eq!(unsafe { ssda_config_set(cfg, c(k).as_ptr(), c(v).as_ptr()) }, SsdaStatus::Ok);
    }
    cfg
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(ssda_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_are_reported() {
    let cfg = ssda_config_new();
    let st = unsafe { ssda_config_set(cfg, c("lrr").as_ptr(), c("1").as_ptr()) };
    assert_eq!(st, SsdaStatus::Config);
    assert!(last_error().contains("lr"), "{}", last_error());
    let st = unsafe { ssda_config_set(cfg, ptr::null(), c("1").as_ptr()) };
    assert_eq!(st, SsdaStatus::NullPointer);
    assert_eq!(unsafe { ssda_config_set(cfg, c("lr").as_ptr(), c("0.5").as_ptr()) }, SsdaStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { ssda_config_free(cfg) };
    unsafe { ssda_config_free(ptr::null_mut()) };
}

#[test]
fn forecast_save_load_roundtrip() {
    let cfg = small_config();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ssda_model_new(cfg, &mut model) }, SsdaStatus::Ok, "{}", last_error());

    let (t, n, h) = (16usize, 2usize, 4usize);
    let ctx: Vec<f64> = (0..t * n).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut out = vec![0.0; h * n];
    let st = unsafe { ssda_model_forecast(model, ctx.as_ptr(), t, n, h, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SsdaStatus::Ok, "{}", last_error());
    assert!(out.iter().all(|v| v.is_finite()));

    let mut short = vec![0.0; 3];
    let st = unsafe { ssda_model_forecast(model, ctx.as_ptr(), t, n, h, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, SsdaStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("m.ntf").to_str().unwrap());
    assert_eq!(unsafe { ssda_model_save(model, path.as_ptr()) }, SsdaStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ssda_model_load(cfg, path.as_ptr(), &mut loaded) }, SsdaStatus::Ok);
    let mut again = vec![0.0; h * n];
    unsafe { ssda_model_forecast(loaded, ctx.as_ptr(), t, n, h, again.as_mut_ptr(), again.len()) };
    assert_eq!(out, again);

    let mut beta = -1.0;
    assert_eq!(unsafe { ssda_model_beta(loaded, &mut beta) }, SsdaStatus::Ok);
    assert_eq!(beta, 0.5);

    let missing = c(dir.path().join("none.ntf").to_str().unwrap());
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { ssda_model_load(cfg, missing.as_ptr(), &mut none) }, SsdaStatus::Io);
    assert!(none.is_null());

    unsafe {
        ssda_model_free(model);
        ssda_model_free(loaded);
        ssda_config_free(cfg);
    }
}

#[test]
fn pss_of_white_noise_is_flat() {
    let (h, w) = (64, 64);
    let mut state = 12345u64;
    let px: Vec<f64> = (0..h * w)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    let (mut alpha, mut r2) = (f64::NAN, f64::NAN);
    let st = unsafe { ssda_pss_image(px.as_ptr(), h, w, 0.05, 0.5, &mut alpha, &mut r2) };
    assert_eq!(st, SsdaStatus::Ok);
    assert!(alpha.abs() < 0.3, "alpha {alpha}");
    let st = unsafe { ssda_pss_image(ptr::null(), h, w, 0.05, 0.5, &mut alpha, ptr::null_mut()) };
    assert_eq!(st, SsdaStatus::NullPointer);
}

#[test]
fn cli_entry_point_exit_codes() {
    let args = [c("ssda"), c("forecast"), c("--checkpoint"), c("/nonexistent/m.ntf"), c("--out"), c("/tmp")];
    let argv: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { ssda_cli_run(argv.len() as i32, argv.as_ptr()) }, 2);
    assert_eq!(unsafe { ssda_cli_run(0, ptr::null()) }, 2);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ssda.h")).unwrap();
    for f in [
        "ssda_last_error",
        "ssda_version",
        "ssda_config_new",
        "ssda_config_load",
        "ssda_config_set",
        "ssda_config_free",
        "ssda_model_new",
        "ssda_model_load",
        "ssda_model_save",
        "ssda_model_beta",
        "ssda_model_forecast",
        "ssda_model_free",
        "ssda_pss_image",
        "ssda_cli_run",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("SSDA_STATUS_OK = 0"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"ssda.h\"\nint main(void) { return ssda_version() == 0; }\n").unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
