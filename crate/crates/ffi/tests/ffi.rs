use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use plaindet::checkpoint::save_checkpoint;
use plaindet::config::ExperimentConfig;
use plaindet::train::build_detector;
use plaindet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pd_last_error_message()) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = ExperimentConfig::tiny();
    let (_, ps) = build_detector(&cfg, 3).unwrap();
    let path = dir.join("tiny.bin");
    save_checkpoint(&path, &ps, &cfg).unwrap();
    path
}

#[test]
fn iou_matches_hand_value() {
    let a = PdBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
    let b = PdBox { x1: 1.0, y1: 0.0, x2: 3.0, y2: 2.0 };
    let mut v = 0.0;
    assert_eq!(unsafe { pd_iou(&a, &b, &mut v) }, PdStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(last_error(), "");
}

#[test]
fn null_pointers_are_reported() {
    let a = PdBox::default();
    let st = unsafe { pd_iou(&a, ptr::null(), ptr::null_mut()) };
    assert_eq!(st, PdStatus::NullPointer);
    assert!(last_error().contains("is null"));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pd_detector_load(ptr::null(), &mut out) }, PdStatus::NullPointer);
    assert!(out.is_null());
    assert_eq!(unsafe { pd_detections_len(ptr::null()) }, 0);
    unsafe {
        pd_detector_free(ptr::null_mut());
        pd_detections_free(ptr::null_mut());
    }
}

#[test]
fn propagation_indices_through_c() {
    let mut buf = [0usize; 8];
    let mut n = 0;
    let st = unsafe { pd_propagation_indices(24, 4, PdPlacement::Evenly, buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(st, PdStatus::Ok);
    assert_eq!(&buf[..n], &[5, 11, 17, 23]);

    let st = unsafe { pd_propagation_indices(24, 4, PdPlacement::Evenly, buf.as_mut_ptr(), 2, &mut n) };
    assert_eq!(st, PdStatus::InvalidArgument);
    assert_eq!(n, 4);

    let st = unsafe { pd_propagation_indices(10, 4, PdPlacement::Evenly, buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_ne!(st, PdStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn soft_nms_linear_decays_overlap() {
    let boxes = [
        PdBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0 },
        PdBox { x1: 1.0, y1: 0.0, x2: 11.0, y2: 10.0 },
        PdBox { x1: 50.0, y1: 50.0, x2: 60.0, y2: 60.0 },
    ];
    let scores = [0.9, 0.8, 0.7];
    let (mut idx, mut sc, mut n) = ([0usize; 3], [0.0; 3], 0);
    let st = unsafe {
        pd_soft_nms(
            boxes.as_ptr(),
            scores.as_ptr(),
            3,
            PdSoftNmsMethod::Linear,
            0.3,
            0.5,
            0.001,
            idx.as_mut_ptr(),
            sc.as_mut_ptr(),
            &mut n,
        )
    };
    assert_eq!(st, PdStatus::Ok);
    assert_eq!(n, 3);
    assert_eq!(&idx[..3], &[0, 2, 1]);
    let overlap = 90.0 / 110.0;
    assert!((sc[2] - 0.8 * (1.0 - overlap)).abs() < 1e-12);

    let st = unsafe {
        pd_soft_nms(
            boxes.as_ptr(),
            scores.as_ptr(),
            3,
            PdSoftNmsMethod::Gaussian,
            0.3,
            0.0,
            0.001,
            idx.as_mut_ptr(),
            sc.as_mut_ptr(),
            &mut n,
        )
    };
    assert_eq!(st, PdStatus::InvalidArgument);
}

#[test]
fn load_detect_and_free() {
    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tiny_checkpoint(tmp.path()).to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { pd_detector_load(path.as_ptr(), &mut det) }, PdStatus::Ok, "{}", last_error());
    let (h, w) = (64, 64);
    let pixels: Vec<f64> = (0..3 * h * w).map(|i| (i % 17) as f64 / 17.0).collect();
    let mut dets = ptr::null_mut();
    assert_eq!(unsafe { pd_detector_detect(det, pixels.as_ptr(), h, w, &mut dets) }, PdStatus::Ok, "{}", last_error());
    let n = unsafe { pd_detections_len(dets) };
    let mut d = PdDetection::default();
    for i in 0..n {
        assert_eq!(unsafe { pd_detections_get(dets, i, &mut d) }, PdStatus::Ok);
        assert!(d.score > 0.0 && d.score <= 1.0);
        assert!(d.class_id < 3);
        assert!(d.bbox.x2 >= d.bbox.x1 && d.bbox.y2 >= d.bbox.y1);
    }
    assert_eq!(unsafe { pd_detections_get(dets, n, &mut d) }, PdStatus::InvalidArgument);
    unsafe {
        pd_detections_free(dets);
        pd_detector_free(det);
    }
}

#[test]
fn load_errors_map_to_status() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = CString::new(tmp.path().join("nope.bin").to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { pd_detector_load(missing.as_ptr(), &mut det) }, PdStatus::Io);

    let bad = tmp.path().join("bad.bin");
    std::fs::write(&bad, b"PLPX\x01\x00\x00\x00").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pd_detector_load(bad.as_ptr(), &mut det) }, PdStatus::Checkpoint);
    assert!(last_error().contains("offset"), "{}", last_error());
    assert!(det.is_null());
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(pd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/plaindet.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    for f in [
        "pd_last_error_message",
        "pd_detector_load",
        "pd_detector_free",
        "pd_detector_detect",
        "pd_detections_len",
        "pd_detections_get",
        "pd_detections_free",
        "pd_iou",
        "pd_soft_nms",
        "pd_propagation_indices",
        "pd_version",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(h.contains("typedef struct PdDetector PdDetector;"));
}

/// Compile and run a C program against the static library; skipped when no
/// C compiler is on PATH.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let lib = target.join(profile).join("libplaindet_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "plaindet.h"
int main(void) {
    PdBox a = {0, 0, 2, 2}, b = {1, 0, 3, 2};
    double v = 0;
    if (pd_iou(&a, &b, &v) != PD_STATUS_OK) return 1;
    if (v < 0.333 || v > 0.334) return 2;
    size_t idx[4], n = 0;
    if (pd_propagation_indices(24, 4, PD_PLACEMENT_EVENLY, idx, 4, &n) != PD_STATUS_OK) return 3;
    if (n != 4 || idx[3] != 23) return 4;
    if (pd_iou(NULL, &b, &v) != PD_STATUS_NULL_POINTER) return 5;
    printf("%s\n", pd_last_error_message());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let inc = header().parent().unwrap().to_path_buf();
    let st = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&inc)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(st.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).contains("is null"));
}
