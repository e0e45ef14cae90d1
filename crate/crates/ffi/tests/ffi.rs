use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use hyxnet::{Checkpoint, FeatureScaler, FeatureSchema, HyxnetConfig, LabelMap, Model};
use hyxnet_ffi::*;
use tempfile::TempDir;

const CLASSES: [&str; 3] = ["normal", "iodine", "dnscat2"];

fn small_checkpoint(dir: &Path) -> PathBuf {
    let schema = FeatureSchema::default_dns();
    let cfg = HyxnetConfig {
        emb_dim: 8,
        hidden: 8,
        head: (8, 8),
        ..HyxnetConfig::with_io(schema.numeric_count(), CLASSES.len())
    };
    let model = Model::<f32>::new(cfg, 3).unwrap();
    let cp = Checkpoint::new(
        model,
        schema.clone(),
        LabelMap::new(&CLASSES).unwrap(),
        FeatureScaler::identity(schema.numeric_count()),
    )
    .unwrap();
    let path = dir.join("m.hyxn");
    cp.save(&path).unwrap();
    path
}

fn last_error() -> String {
    let p = hyxnet_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> *mut HyxnetDetector {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { hyxnet_detector_load(c.as_ptr(), &mut det) }, HyxnetStatus::Ok);
    assert!(!det.is_null());
    det
}

#[test]
fn load_query_and_free() {
    let dir = TempDir::new().unwrap();
    let det = load(&small_checkpoint(dir.path()));
    unsafe {
        assert_eq!(hyxnet_detector_num_classes(det), 3);
        assert_eq!(hyxnet_detector_num_features(det), 8);
        let mut buf = [0 as std::ffi::c_char; 16];
        let mut len = 0usize;
        assert_eq!(
            hyxnet_detector_class_name(det, 2, buf.as_mut_ptr(), buf.len(), &mut len),
            HyxnetStatus::Ok
        );
        assert_eq!(len, 7);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "dnscat2");
        assert_eq!(
            hyxnet_detector_class_name(det, 2, buf.as_mut_ptr(), 4, &mut len),
            HyxnetStatus::BufferTooSmall
        );
        assert_eq!(len, 7);
        assert_eq!(
            hyxnet_detector_class_name(det, 3, buf.as_mut_ptr(), buf.len(), &mut len),
            HyxnetStatus::InvalidArgument
        );
        hyxnet_detector_free(det);
        hyxnet_detector_free(ptr::null_mut());
    }
}

#[test]
fn detect_matches_the_rust_detector() {
    let dir = TempDir::new().unwrap();
    let path = small_checkpoint(dir.path());
    let det = load(&path);
    let rust = hyxnet::Detector::new(Checkpoint::load(&path).unwrap());
    let qname = "a1b2c3d4e5.t0.iodine.net";
    let numerics = [180.0, 30.0, 24.0, 4.0, 3.5, 16.0, 1.0, 0.01];
    let event = hyxnet::DnsEvent::new(qname, numerics.to_vec(), None).unwrap();
    let expected = rust.classify(&event).unwrap();

    let q = CString::new(qname).unwrap();
    let mut out = HyxnetResult {
        class_index: 99,
        confidence: 0.0,
        action: HyxnetAction::None,
    };
    unsafe {
        assert_eq!(
            hyxnet_detector_detect(det, q.as_ptr(), numerics.as_ptr(), numerics.len(), &mut out),
            HyxnetStatus::Ok
        );
        assert_eq!(out.class_index as usize, expected.label);
        assert_eq!(out.confidence, expected.confidence);

        let line = CString::new(format!("{qname},180,30,24,4,3.5,16,1,0.01,")).unwrap();
        let mut from_line = out;
        from_line.class_index = 99;
        assert_eq!(
            hyxnet_detector_detect_line(det, line.as_ptr(), b',' as std::ffi::c_char, &mut from_line),
            HyxnetStatus::Ok
        );
        assert_eq!(from_line, out);

        // A threshold just above the confidence silences the alert.
        assert_eq!(hyxnet_detector_set_threshold(det, 0.999), HyxnetStatus::Ok);
        hyxnet_detector_detect(det, q.as_ptr(), numerics.as_ptr(), numerics.len(), &mut out);
        assert_eq!(out.action, HyxnetAction::None);
        assert_eq!(hyxnet_detector_set_threshold(det, 1.5), HyxnetStatus::InvalidArgument);
        assert!(last_error().contains("(0, 1)"));

        assert_eq!(
            hyxnet_detector_detect(det, q.as_ptr(), numerics.as_ptr(), 3, &mut out),
            HyxnetStatus::Model
        );
        assert!(last_error().contains("expects 8"));
        let bad = CString::new("x.com,1,2").unwrap();
        assert_eq!(
            hyxnet_detector_detect_line(det, bad.as_ptr(), b',' as std::ffi::c_char, &mut out),
            HyxnetStatus::Data
        );
        hyxnet_detector_free(det);
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        let mut det = ptr::null_mut();
        assert_eq!(hyxnet_detector_load(ptr::null(), &mut det), HyxnetStatus::NullPointer);
        assert!(det.is_null());
        let missing = CString::new("/nonexistent/m.hyxn").unwrap();
        assert_eq!(hyxnet_detector_load(missing.as_ptr(), &mut det), HyxnetStatus::Model);
        assert!(last_error().contains("nonexistent"));
        assert_eq!(hyxnet_detector_num_classes(ptr::null()), 0);
        let mut out = HyxnetResult {
            class_index: 0,
            confidence: 0.0,
            action: HyxnetAction::None,
        };
        let q = CString::new("a.com").unwrap();
        assert_eq!(
            hyxnet_detector_detect(ptr::null(), q.as_ptr(), ptr::null(), 0, &mut out),
            HyxnetStatus::NullPointer
        );
        let invalid = [0xffu8, 0];
        let mut b = 0u32;
        assert_eq!(hyxnet_bucketize(invalid.as_ptr().cast(), &mut b), HyxnetStatus::InvalidArgument);
    }
}

#[test]
fn tokenizer_entry_points_match_the_library() {
    let q = CString::new("Mail.Example.com").unwrap();
    let mut tokens = [0u32; 15];
    let mut len = 0usize;
    unsafe {
        assert_eq!(hyxnet_tokenize(q.as_ptr(), tokens.as_mut_ptr(), 15, &mut len), HyxnetStatus::Ok);
        assert_eq!(len, 15);
        assert_eq!(&tokens[..], hyxnet::tokenize("mail.example.com").unwrap().as_slice());
        assert_eq!(hyxnet_tokenize(q.as_ptr(), tokens.as_mut_ptr(), 4, &mut len), HyxnetStatus::BufferTooSmall);
        assert_eq!(len, 15);

        let label = CString::new("example").unwrap();
        let mut b = 0u32;
        assert_eq!(hyxnet_bucketize(label.as_ptr(), &mut b), HyxnetStatus::Ok);
        assert_eq!(b, hyxnet::bucketize("example").unwrap());
        assert_eq!(tokens[13], b);
        let empty = CString::new("").unwrap();
        assert_eq!(hyxnet_bucketize(empty.as_ptr(), &mut b), HyxnetStatus::Data);
    }
    let v = unsafe { CStr::from_ptr(hyxnet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let Ok(cc) = which("cc") else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let profile_dir = tmp.parent().unwrap().join(if cfg!(debug_assertions) { "debug" } else { "release" });
    let lib = profile_dir.join("libhyxnet_ffi.a");
    if !lib.is_file() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = TempDir::new().unwrap();
    let model = small_checkpoint(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "hyxnet.h"

int main(int argc, char **argv) {
    HyxnetDetector *det = NULL;
    if (hyxnet_detector_load(argv[1], &det) != HYXNET_STATUS_OK) return 10;
    if (hyxnet_detector_num_classes(det) != 3) return 11;
    double x[8] = {180, 30, 24, 4, 3.5, 16, 1, 0.01};
    HyxnetResult r;
    if (hyxnet_detector_detect(det, "abc.t0.iodine.net", x, 8, &r) != HYXNET_STATUS_OK) return 12;
    if (r.class_index >= 3 || r.confidence <= 0.0f || r.confidence > 1.0f) return 13;
    if (hyxnet_detector_set_threshold(det, 2.0f) != HYXNET_STATUS_INVALID_ARGUMENT) return 14;
    if (hyxnet_last_error_message() == NULL) return 15;
    char name[32];
    size_t len = 0;
    if (hyxnet_detector_class_name(det, r.class_index, name, sizeof name, &len) != HYXNET_STATUS_OK) return 16;
    if (strlen(name) != len) return 17;
    hyxnet_detector_free(det);
    printf("%s %u %.6f\n", name, r.class_index, r.confidence);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).arg(&model).output().unwrap();
    assert!(out.status.success(), "C program exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let class: usize = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(text.split_whitespace().next().unwrap(), CLASSES[class]);
}

fn which(name: &str) -> Result<PathBuf, ()> {
    std::env::var_os("PATH")
        .and_then(|paths| std::env::split_paths(&paths).map(|p| p.join(name)).find(|p| p.is_file()))
        .ok_or(())
}
