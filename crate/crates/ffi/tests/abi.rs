use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use intention_monitor_ffi::*;

const JSONL: &str = r#"{"txid":"c1","time":100,"inputs":[],"outputs":[{"addr":"x","amount":50}]}
{"txid":"t1","time":200,"inputs":[{"src":"c1","amount":50}],"outputs":[{"addr":"y","amount":30},{"addr":"z","amount":20}]}
"#;

fn last_error() -> String {
    let p = im_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    im_string_free(s);
    out
}

#[test]
fn store_and_timeline_roundtrip() {
    unsafe {
        let mut store = ptr::null_mut();
        assert_eq!(im_store_from_jsonl(JSONL.as_ptr(), JSONL.len(), &mut store), ImStatus::Ok);
        let (mut n_tx, mut n_addr) = (0, 0);
        assert_eq!(im_store_counts(store, &mut n_tx, &mut n_addr), ImStatus::Ok);
        assert_eq!((n_tx, n_addr), (2, 3));

        let addr = CString::new("y").unwrap();
        let mut tl = ptr::null_mut();
        assert_eq!(im_timeline_new(store, addr.as_ptr(), 3, &mut tl), ImStatus::Ok);
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(im_timeline_shape(tl, &mut rows, &mut cols), ImStatus::Ok);
        assert_eq!((rows, cols), (3, 212));
        let mut buf = vec![f64::NAN; rows * cols];
        assert_eq!(im_timeline_copy(tl, buf.as_mut_ptr(), 10), ImStatus::InvalidArgument);
        assert_eq!(im_timeline_copy(tl, buf.as_mut_ptr(), buf.len()), ImStatus::Ok);
        assert!(buf.iter().all(|v| v.is_finite()));

        let mut names = ptr::null_mut();
        assert_eq!(im_feature_names_json(&mut names), ImStatus::Ok);
        let names: Vec<String> = serde_json::from_str(&take(names)).unwrap();
        assert_eq!(names.len(), cols);

        im_timeline_free(tl);
        im_store_free(store);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut store = ptr::null_mut();
        assert_eq!(im_store_from_jsonl(JSONL.as_ptr(), JSONL.len(), ptr::null_mut()), ImStatus::NullArgument);
        assert!(last_error().contains("out"));
        let bad = b"{not json}\n";
        assert_ne!(im_store_from_jsonl(bad.as_ptr(), bad.len(), &mut store), ImStatus::Ok);
        assert!(!last_error().is_empty());

        assert_eq!(im_store_from_jsonl(JSONL.as_ptr(), JSONL.len(), &mut store), ImStatus::Ok);
        assert!(im_last_error_message().is_null());
        let nobody = CString::new("nobody").unwrap();
        let mut tl = ptr::null_mut();
        assert_eq!(im_timeline_new(store, nobody.as_ptr(), 24, &mut tl), ImStatus::NotFound);
        let invalid = [0xffu8, 0];
        assert_eq!(
            im_timeline_new(store, invalid.as_ptr().cast(), 24, &mut tl),
            ImStatus::InvalidUtf8
        );
        im_store_free(store);

        let missing = CString::new("/nonexistent/transactions.jsonl").unwrap();
        assert_eq!(im_store_open(missing.as_ptr(), &mut store), ImStatus::Io);
        im_store_free(ptr::null_mut());
        im_string_free(ptr::null_mut());
    }
}

#[test]
fn evaluate_matches_hand_computed_f1() {
    // Two addresses, two steps: perfect, then the positive is missed.
    let p = [0.9, 0.2, 0.1, 0.1];
    let labels = [1u8, 0];
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(im_evaluate_json(p.as_ptr(), labels.as_ptr(), 2, 2, &mut out), ImStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let want = 1.0 / (1.0 + 1.0 / 2f64.sqrt());
        assert!((v["f1_early"].as_f64().unwrap() - want).abs() < 1e-12);
        let bad = [2u8, 0];
        assert_eq!(im_evaluate_json(p.as_ptr(), bad.as_ptr(), 2, 2, &mut out), ImStatus::InvalidArgument);
    }
}

#[test]
fn pipeline_reports_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(im_pipeline_open(d.as_ptr(), ptr::null(), &mut p), ImStatus::Ok);
        let eval = CString::new("eval").unwrap();
        assert_eq!(im_pipeline_stage(p, eval.as_ptr()), ImStatus::NotFound);
        assert!(last_error().contains("predict"), "{}", last_error());
        let bogus = CString::new("bogus").unwrap();
        assert_eq!(im_pipeline_stage(p, bogus.as_ptr()), ImStatus::InvalidArgument);
        im_pipeline_free(p);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(im_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
