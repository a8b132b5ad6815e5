use std::ffi::{CStr, CString};
use std::ptr;

use capsdense_ffi::*;

fn last_error() -> String {
    let p = cd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn preset(name: &str) -> *mut CdModel {
    let name = CString::new(name).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cd_model_from_preset(name.as_ptr(), 0, &mut m) }, CdStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn param_count_matches_core() {
    let m = preset("baseline-capsnet");
    let mut n = 0u64;
    assert_eq!(unsafe { cd_model_param_count(m, &mut n) }, CdStatus::Ok);
    assert_eq!(n, 8_215_568);
    unsafe { cd_model_free(m) };
}

#[test]
fn unknown_preset_sets_message() {
    let name = CString::new("nope").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cd_model_from_preset(name.as_ptr(), 0, &mut m) }, CdStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("unknown preset"));
}

#[test]
fn null_pointers_are_reported() {
    let mut n = 0u64;
    assert_eq!(unsafe { cd_model_param_count(ptr::null(), &mut n) }, CdStatus::NullPointer);
    assert_eq!(unsafe { cd_squash(ptr::null(), 1, 2, ptr::null_mut()) }, CdStatus::NullPointer);
    unsafe { cd_model_free(ptr::null_mut()) };
}

#[test]
fn squash_values() {
    let input = [3.0f32, 4.0, 0.0, 0.0];
    let mut out = [0f32; 4];
    assert_eq!(unsafe { cd_squash(input.as_ptr(), 2, 2, out.as_mut_ptr()) }, CdStatus::Ok);
    let norm = (out[0] * out[0] + out[1] * out[1]).sqrt();
    assert!((norm - 25.0 / 26.0).abs() < 1e-6);
    assert_eq!(&out[2..], &[0.0, 0.0]);
}

#[test]
fn predict_and_save_load_round_trip() {
    let m = preset("synth-dcnet");
    let (mut c, mut h, mut w, mut k, mut d) = (0, 0, 0, 0, 0);
    assert_eq!(unsafe { cd_model_shape(m, &mut c, &mut h, &mut w, &mut k, &mut d) }, CdStatus::Ok);
    assert_eq!((c, h, w, k, d), (1, 16, 16, 4, 16));

    let n = 3;
    let images: Vec<f32> = (0..n * c * h * w).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
    let mut labels = vec![99u32; n];
    let mut lengths = vec![0f32; n * k];
    assert_eq!(
        unsafe { cd_model_predict(m, images.as_ptr(), n, labels.as_mut_ptr(), lengths.as_mut_ptr()) },
        CdStatus::Ok
    );
    assert!(labels.iter().all(|&l| (l as usize) < k));
    assert!(lengths.iter().all(|&x| (0.0..1.0).contains(&x)));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.cdck").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cd_model_save(m, path.as_ptr()) }, CdStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { cd_model_load(path.as_ptr(), &mut loaded) }, CdStatus::Ok);
    let mut again = vec![0f32; n * k];
    let mut labels2 = vec![0u32; n];
    assert_eq!(
        unsafe { cd_model_predict(loaded, images.as_ptr(), n, labels2.as_mut_ptr(), again.as_mut_ptr()) },
        CdStatus::Ok
    );
    assert_eq!(lengths, again);
    assert_eq!(labels, labels2);
    unsafe {
        cd_model_free(m);
        cd_model_free(loaded);
    }
}

#[test]
fn corrupt_checkpoint_is_integrity_error() {
    let m = preset("synth-dcnet");
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.cdck");
    let path = CString::new(file.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cd_model_save(m, path.as_ptr()) }, CdStatus::Ok);
    let mut bytes = std::fs::read(&file).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&file, bytes).unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { cd_model_load(path.as_ptr(), &mut loaded) }, CdStatus::Integrity);
    assert!(last_error().contains("checksum"));
    unsafe { cd_model_free(m) };
}
