use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use sced_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sced_last_error_message()).to_string_lossy().into_owned() }
}

fn blobs() -> Vec<f64> {
    (0..40)
        .flat_map(|i| {
            let c = (i % 2) as f64;
            let t = i as f64 * 0.61;
            [6.0 * c + 0.2 * t.sin(), 0.2 * t.cos()]
        })
        .collect()
}

#[test]
fn fit_through_the_c_surface() {
    let values = blobs();
    let mut data = ptr::null_mut();
    unsafe {
        assert_eq!(sced_dataset_new(values.as_ptr(), 40, 2, &mut data), ScedStatus::Ok);
        assert_eq!((sced_dataset_n(data), sced_dataset_p(data)), (40, 2));
        let mut opts = sced_fit_options_default();
        opts.optimizer_evals_per_dim = 20;
        let mut fit = ptr::null_mut();
        assert_eq!(sced_fit(data, &opts, &mut fit), ScedStatus::Ok, "{}", last_error());
        assert_eq!(sced_fit_k(fit), 2);

        let mut labels = vec![0usize; 40];
        assert_eq!(sced_fit_labels(fit, labels.as_mut_ptr(), 40), ScedStatus::Ok);
        let truth: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let mut ri = 0.0;
        assert_eq!(sced_rand_index(labels.as_ptr(), truth.as_ptr(), 40, &mut ri), ScedStatus::Ok);
        assert_eq!(ri, 1.0);

        let mut means = [0.0; 4];
        assert_eq!(sced_fit_means(fit, means.as_mut_ptr(), 3), ScedStatus::BufferTooSmall);
        assert!(last_error().contains("need 4"));
        assert_eq!(sced_fit_means(fit, means.as_mut_ptr(), 4), ScedStatus::Ok);
        let mut probs = [0.0; 2];
        assert_eq!(sced_fit_probs(fit, probs.as_mut_ptr(), 2), ScedStatus::Ok);
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
        let mut post = vec![0.0; 80];
        assert_eq!(sced_fit_posteriors(fit, post.as_mut_ptr(), 80), ScedStatus::Ok);
        let mut loo = 0.0;
        assert_eq!(sced_fit_loo_loglik(fit, &mut loo), ScedStatus::Ok);
        assert!(loo.is_finite());

        let mut json = ptr::null_mut();
        assert_eq!(sced_fit_report_json(fit, &mut json), ScedStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        sced_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["fit"]["k"], 2);
        assert!(v["spic"].is_null());

        sced_fit_free(fit);
        sced_dataset_free(data);
    }
}

#[test]
fn errors_are_reported_by_status_and_message() {
    unsafe {
        let mut data = ptr::null_mut();
        assert_eq!(sced_dataset_new(ptr::null(), 3, 2, &mut data), ScedStatus::NullPointer);
        let values = [1.0, 2.0, 3.0];
        assert_eq!(sced_dataset_new(values.as_ptr(), 3, 0, &mut data), ScedStatus::InvalidArgument);

        let flat = [1.0, 5.0, 2.0, 5.0, 3.0, 5.0];
        assert_eq!(sced_dataset_new(flat.as_ptr(), 3, 2, &mut data), ScedStatus::Ok);
        let mut std = ptr::null_mut();
        assert_eq!(sced_dataset_standardize(data, &mut std), ScedStatus::Data);
        assert!(last_error().contains("zero variance"), "{}", last_error());

        let mut opts = sced_fit_options_default();
        opts.k_min = 3;
        opts.k_max = 1;
        let mut fit = ptr::null_mut();
        assert_eq!(sced_fit(data, &opts, &mut fit), ScedStatus::InvalidArgument);
        assert!(fit.is_null());
        sced_dataset_free(data);

        assert_eq!(sced_fit_k(ptr::null()), 0);
        let mut x = 0.0;
        assert_eq!(sced_fit_loo_loglik(ptr::null(), &mut x), ScedStatus::NullPointer);
        sced_fit_free(ptr::null_mut());
        sced_dataset_free(ptr::null_mut());
    }
}

#[test]
fn simulate_matches_the_library() {
    let mut labels = vec![0usize; 100];
    let mut data = ptr::null_mut();
    unsafe {
        assert_eq!(sced_simulate(ScedGenerator::M2, 3, 3, 100, 1.0, 4, &mut data, labels.as_mut_ptr()), ScedStatus::Ok);
        assert_eq!(sced_dataset_n(data), 100);
        assert!(labels.iter().all(|&l| (1..=3).contains(&l)));
        sced_dataset_free(data);
        assert_eq!(sced_simulate(ScedGenerator::M1, 3, 2, 100, 0.0, 4, &mut data, ptr::null_mut()), ScedStatus::InvalidArgument);

        let a = [0usize, 0, 7];
        let b = [3usize, 9, 9];
        let mut ri = 0.0;
        assert_eq!(sced_rand_index(a.as_ptr(), b.as_ptr(), 3, &mut ri), ScedStatus::Ok);
        assert!((ri - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(sced_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_surface_and_compiles_as_c() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/sced.h")).unwrap();
    for name in ["sced_fit", "sced_fit_free", "sced_dataset_new", "sced_rand_index", "sced_last_error_message", "SCED_STATUS_PANIC"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sced.h\"\nint main(void) { ScedFitOptions o = sced_fit_options_default(); return o.k_min == 0 ? SCED_STATUS_OK : 1; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let include = CString::new(format!("-I{dir}/include")).unwrap();
    match Command::new(&cc).args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", include.to_str().unwrap()]).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler ({cc}: {e}); header syntax not checked"),
    }
}
