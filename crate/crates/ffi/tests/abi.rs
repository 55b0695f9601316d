use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mvsc_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mvsc_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn tensor_roundtrip_through_cvst() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.cvst").to_str().unwrap()).unwrap();
    let shape = [2usize, 3];
    let data = [1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX];
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(
            mvsc_tensor_new(shape.as_ptr(), 2, data.as_ptr(), &mut t),
            MvscStatus::Ok
        );
        assert_eq!(mvsc_tensor_write(t, path.as_ptr()), MvscStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mvsc_tensor_read(path.as_ptr(), &mut back), MvscStatus::Ok);
        assert_eq!(mvsc_tensor_len(back), 6);
        let mut s = [0usize; 2];
        assert_eq!(mvsc_tensor_shape(back, s.as_mut_ptr(), 2), MvscStatus::Ok);
        assert_eq!(s, shape);
        let got = std::slice::from_raw_parts(mvsc_tensor_data(back), 6);
        assert_eq!(got, &data);
        mvsc_tensor_free(t);
        mvsc_tensor_free(back);
    }
}

#[test]
fn null_and_bad_arguments_report_codes() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(
            mvsc_tensor_new(ptr::null(), 1, ptr::null(), &mut t),
            MvscStatus::NullPointer
        );
        assert!(last_error().contains("null"));
        let shape = [2usize];
        let data = [1.0, 2.0];
        assert_eq!(
            mvsc_tensor_new(shape.as_ptr(), 1, data.as_ptr(), ptr::null_mut()),
            MvscStatus::NullPointer
        );
        let missing = CString::new("/nonexistent/dir/x.cvst").unwrap();
        assert_eq!(mvsc_tensor_read(missing.as_ptr(), &mut t), MvscStatus::Io);
        let mut k = ptr::null_mut();
        assert_eq!(
            mvsc_kernel_rotate(3, f64::NAN, 0.0, 0.0, &mut k),
            MvscStatus::Parameter
        );
        assert_eq!(
            mvsc_kernel_rotate(0, 0.0, 0.0, 0.0, &mut k),
            MvscStatus::Parameter
        );
        let bad = CString::new("{\"channels\": 0}").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            mvsc_model_new(bad.as_ptr(), ptr::null(), &mut m),
            MvscStatus::Config
        );
        let unknown = CString::new("huge").unwrap();
        assert_eq!(
            mvsc_model_new(ptr::null(), unknown.as_ptr(), &mut m),
            MvscStatus::Config
        );
        assert!(m.is_null());
        // Freeing null is a no-op.
        mvsc_tensor_free(ptr::null_mut());
        mvsc_scene_free(ptr::null_mut());
    }
}

#[test]
fn kernel_matches_core() {
    use mvsc_core::kernel::{build_lattice, rotate_kernel, RotationSpec};
    let expect = rotate_kernel(
        &build_lattice(3).unwrap(),
        &RotationSpec::from_angles([30.0, 20.0, 10.0]),
    );
    unsafe {
        let mut k = ptr::null_mut();
        assert_eq!(
            mvsc_kernel_rotate(3, 30.0, 20.0, 10.0, &mut k),
            MvscStatus::Ok
        );
        let mut pts = vec![0.0; 81];
        assert_eq!(mvsc_kernel_points(k, pts.as_mut_ptr(), 81), MvscStatus::Ok);
        let flat: Vec<f64> = expect.points().iter().flatten().copied().collect();
        assert_eq!(pts, flat);
        let mut r = [0.0; 9];
        assert_eq!(mvsc_kernel_matrix(k, r.as_mut_ptr()), MvscStatus::Ok);
        let m: Vec<f64> = expect.spec.matrix.iter().flatten().copied().collect();
        assert_eq!(r.to_vec(), m);
        mvsc_kernel_free(k);
    }
}

#[test]
fn ssc_metrics_mark_absent_classes() {
    let pred = [1u32, 1, 2, 0, MVSC_IGNORE_LABEL];
    let gt = [1u32, 2, 2, 0, 1];
    let mask = [1u8, 1, 1, 1, 0];
    let mut per = [0.0; 4];
    let mut mean = 0.0;
    unsafe {
        assert_eq!(
            mvsc_ssc_metrics(
                pred.as_ptr(),
                gt.as_ptr(),
                mask.as_ptr(),
                5,
                4,
                per.as_mut_ptr(),
                &mut mean
            ),
            MvscStatus::Ok
        );
    }
    assert!(per[0].is_nan() && per[3].is_nan());
    assert!((per[1] - 0.5).abs() < 1e-12);
    assert!((per[2] - 0.5).abs() < 1e-12);
    assert!((mean - 0.5).abs() < 1e-12);
}

#[test]
fn scene_model_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let sdir = CString::new(dir.path().join("scene").to_str().unwrap()).unwrap();
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(
            mvsc_scene_generate(5, 16, 8, 16, 4, 3, &mut scene),
            MvscStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(mvsc_scene_save(scene, sdir.as_ptr(), 5), MvscStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(
            mvsc_scene_load(sdir.as_ptr(), &mut loaded),
            MvscStatus::Ok,
            "{}",
            last_error()
        );
        let n = 16 * 8 * 16;
        let (mut a, mut b) = (vec![0u32; n], vec![0u32; n]);
        assert_eq!(mvsc_scene_labels(scene, a.as_mut_ptr(), n), MvscStatus::Ok);
        assert_eq!(mvsc_scene_labels(loaded, b.as_mut_ptr(), n), MvscStatus::Ok);
        assert_eq!(a, b);
        assert!(a.contains(&MVSC_IGNORE_LABEL));
        assert_eq!(
            mvsc_scene_labels(scene, a.as_mut_ptr(), n - 1),
            MvscStatus::InvalidArgument
        );

        let cfg = CString::new(
            serde_json::to_string(&mvsc_core::config::ModelConfig {
                channels: 8,
                ..mvsc_core::config::ModelConfig::toy()
            })
            .unwrap(),
        )
        .unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(
            mvsc_model_new(cfg.as_ptr(), ptr::null(), &mut model),
            MvscStatus::Ok,
            "{}",
            last_error()
        );
        let mut loss = f64::NAN;
        assert_eq!(
            mvsc_model_train(model, scene, 20, 0.05, 0.9, &mut loss),
            MvscStatus::Ok,
            "{}",
            last_error()
        );
        assert!(loss.is_finite() && loss < (4.0f64).ln());
        let mut summary = MvscMetricSummary::default();
        let mut per = [0.0; 4];
        assert_eq!(
            mvsc_model_evaluate(model, scene, &mut summary, per.as_mut_ptr()),
            MvscStatus::Ok
        );
        assert!((0.0..=1.0).contains(&summary.sc_iou));
        assert!((0.0..=1.0).contains(&summary.mean_iou));
        let mut pred = vec![0u32; n];
        assert_eq!(
            mvsc_model_predict(model, scene, pred.as_mut_ptr(), n),
            MvscStatus::Ok
        );
        assert!(pred.iter().all(|&c| c < 4));
        mvsc_model_free(model);
        mvsc_scene_free(scene);
        mvsc_scene_free(loaded);
    }
}

#[test]
fn header_is_current_and_usable_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/mvsc.h")).unwrap();
    for sym in [
        "mvsc_tensor_new",
        "mvsc_kernel_rotate",
        "mvsc_sc_metrics",
        "mvsc_ssc_metrics",
        "mvsc_scene_generate",
        "mvsc_model_train",
        "mvsc_last_error",
        "MVSC_STATUS_NULL_POINTER",
        "typedef struct MvscModel MvscModel;",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }

    // target/<profile>/deps/abi-xxxx -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libmvsc_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success(), "C compile failed");
    let run = Command::new(&bin).output().unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
