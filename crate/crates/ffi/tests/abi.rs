use std::ffi::{CStr, CString};
use std::ptr;

use svla_ffi::*;

fn last_error() -> String {
    let p = svla_last_error_message();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { svla_string_free(p) };
    s
}

const SMALL: &str = "grid_side = 4\nnum_objects = 2\nvocab_size = 32\ninstr_len = 4\nchunk_len = 2\nratio = 4\n\
tower_blocks = 2\nsem_width = 8\nspa_width = 8\ntower_heads = 2\nhook_depths = 0\nfuser_hidden = 8\n\
decoder_width = 8\ndecoder_heads = 2\n";

fn small_model() -> *mut SvlaModel {
    let text = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { svla_model_create(text.as_ptr(), &mut m) }, SvlaStatus::Ok);
    m
}

#[test]
fn create_predict_free() {
    let m = small_model();
    let (mut rows, mut cols) = (0, 0);
    assert_eq!(
        unsafe { svla_model_chunk_shape(m, &mut rows, &mut cols) },
        SvlaStatus::Ok
    );
    assert_eq!((rows, cols), (2, 7));
    let (mut vis, mut seq) = (0, 0);
    assert_eq!(
        unsafe { svla_model_token_budget(m, &mut vis, &mut seq) },
        SvlaStatus::Ok
    );
    assert_eq!(vis, 4);
    assert_eq!(seq, 4 + 1 + 4 + 6);

    let mut buf = vec![0.0; 14];
    let mut written = 0;
    assert_eq!(
        unsafe { svla_model_predict_episode(m, 5, buf.as_mut_ptr(), buf.len(), &mut written) },
        SvlaStatus::Ok
    );
    assert_eq!(written, 14);
    let mut again = vec![0.0; 14];
    unsafe { svla_model_predict_episode(m, 5, again.as_mut_ptr(), again.len(), &mut written) };
    assert_eq!(buf, again);
    assert!(buf.iter().all(|v| v.is_finite()));

    let mut tiny = [0.0; 3];
    assert_eq!(
        unsafe { svla_model_predict_episode(m, 5, tiny.as_mut_ptr(), tiny.len(), &mut written) },
        SvlaStatus::BufferTooSmall
    );
    assert_eq!(written, 14);
    assert!(last_error().contains("14"));
    unsafe { svla_model_free(m) };
}

#[test]
fn errors_are_typed_and_reported() {
    let mut m = ptr::null_mut();
    let bad = CString::new("no_such_key = 1\n").unwrap();
    assert_eq!(unsafe { svla_model_create(bad.as_ptr(), &mut m) }, SvlaStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("no_such_key"));

    let (mut r, mut c) = (0, 0);
    assert_eq!(
        unsafe { svla_model_chunk_shape(ptr::null(), &mut r, &mut c) },
        SvlaStatus::NullPointer
    );

    let missing = CString::new("/nonexistent/dir/ckpt.svt").unwrap();
    assert_eq!(
        unsafe { svla_model_load_checkpoint(missing.as_ptr(), &mut m) },
        SvlaStatus::Io
    );
    assert!(last_error().contains("/nonexistent/dir/ckpt.svt"));

    let mut n = 0;
    assert_eq!(
        unsafe { svla_coupler_token_count(9, 8, 1, &mut n) },
        SvlaStatus::InvalidInput
    );
    unsafe { svla_model_free(ptr::null_mut()) };
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = svla::config::RunConfig::parse(SMALL).unwrap();
    let model = svla::model::Model::new(&cfg).unwrap();
    let path = dir.path().join("c.svt");
    svla::train::save_checkpoint(&model, &path, 0).unwrap();

    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { svla_model_load_checkpoint(p.as_ptr(), &mut loaded) },
        SvlaStatus::Ok
    );
    let fresh = small_model();
    let (mut a, mut b) = (vec![0.0; 14], vec![0.0; 14]);
    let mut w = 0;
    unsafe {
        svla_model_predict_episode(loaded, 9, a.as_mut_ptr(), 14, &mut w);
        svla_model_predict_episode(fresh, 9, b.as_mut_ptr(), 14, &mut w);
        svla_model_free(loaded);
        svla_model_free(fresh);
    }
    assert_eq!(a, b);
}

#[test]
fn token_and_flop_counts() {
    let mut n = 0;
    assert_eq!(unsafe { svla_coupler_token_count(0, 25, 2, &mut n) }, SvlaStatus::Ok);
    assert_eq!(n, 150);
    unsafe { svla_coupler_token_count(2, 25, 2, &mut n) };
    assert_eq!(n, 350);
    unsafe { svla_coupler_token_count(1, 8, 1, &mut n) };
    assert_eq!(n, 8);
    assert_eq!(
        svla_transformer_flops(10, 4, 2, 4),
        2 * (8 * 10 * 16 + 4 * 100 * 4 + 4 * 4 * 10 * 16)
    );
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/svla.h")).unwrap();
    for sym in [
        "svla_model_create",
        "svla_model_load_checkpoint",
        "svla_model_free",
        "svla_model_chunk_shape",
        "svla_model_token_budget",
        "svla_model_predict_episode",
        "svla_transformer_flops",
        "svla_coupler_token_count",
        "svla_last_error_message",
        "svla_string_free",
        "SVLA_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
    assert!(header.contains("typedef struct SvlaModel SvlaModel;"));
}
