use std::ffi::{CStr, CString};
use std::ptr;

use otmerge::tensor_store::{write_container, LayerManifest, ModelManifest, TensorRecord};
use otmerge_ffi::*;

fn last_error() -> String {
    let p = otm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(otm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn default_configs_match_library() {
    let f = otm_solver_config_feature();
    assert_eq!((f.epsilon, f.max_iters, f.tol), (0.1, 200, 1e-6));
    let l = otm_solver_config_layer();
    assert_eq!((l.epsilon, l.max_iters, l.tol), (0.1, 1000, 1e-9));
    assert_eq!(l.mode, OtmSolverMode::LogDomain);
}

#[test]
fn zero_cost_plan_is_outer_product() {
    let cost = [0.0; 6];
    let a = [0.5, 0.25, 0.25];
    let cfg = otm_solver_config_feature();
    let mut plan = ptr::null_mut();
    let status = unsafe { otm_sinkhorn_solve(cost.as_ptr(), 3, 2, a.as_ptr(), ptr::null(), &cfg, &mut plan) };
    assert_eq!(status, OtmStatus::Ok);
    let mut info = OtmPlanInfo {
        rows: 0,
        cols: 0,
        converged: false,
        final_violation: 0.0,
        iterations_used: 0,
    };
    assert_eq!(unsafe { otm_plan_info(plan, &mut info) }, OtmStatus::Ok);
    assert_eq!((info.rows, info.cols), (3, 2));
    assert!(info.converged);
    let mut small = [0.0; 5];
    assert_eq!(unsafe { otm_plan_copy(plan, small.as_mut_ptr(), 5) }, OtmStatus::BufferTooSmall);
    assert!(last_error().contains("6"));
    let mut q = [0.0; 6];
    assert_eq!(unsafe { otm_plan_copy(plan, q.as_mut_ptr(), 6) }, OtmStatus::Ok);
    for i in 0..3 {
        for j in 0..2 {
            assert!((q[i * 2 + j] - a[i] * 0.5).abs() < 1e-12);
        }
    }
    unsafe { otm_plan_free(plan) };
    unsafe { otm_plan_free(ptr::null_mut()) };
}

#[test]
fn solver_errors_map_to_status_codes() {
    let cost = [f64::INFINITY, f64::INFINITY, 0.0, 0.0];
    let cfg = otm_solver_config_layer();
    let mut plan = ptr::null_mut();
    let status = unsafe { otm_sinkhorn_solve(cost.as_ptr(), 2, 2, ptr::null(), ptr::null(), &cfg, &mut plan) };
    assert_eq!(status, OtmStatus::Infeasible);
    assert!(plan.is_null());
    let status = unsafe { otm_sinkhorn_solve(ptr::null(), 2, 2, ptr::null(), ptr::null(), &cfg, &mut plan) };
    assert_eq!(status, OtmStatus::NullPointer);
    assert!(last_error().contains("cost"));
    let bad_a = [0.9, 0.9];
    let cost = [0.0; 4];
    let status = unsafe { otm_sinkhorn_solve(cost.as_ptr(), 2, 2, bad_a.as_ptr(), ptr::null(), &cfg, &mut plan) };
    assert_eq!(status, OtmStatus::Validation);
}

#[test]
fn pearson_and_mass() {
    // columns [1,2,3] vs [2,4,6] and [3,2,1]
    let x = [1.0, 2.0, 3.0];
    let y = [2.0, 3.0, 4.0, 2.0, 6.0, 1.0];
    let mut out = [0.0; 2];
    assert_eq!(unsafe { otm_pearson_cost(x.as_ptr(), 3, 1, y.as_ptr(), 2, out.as_mut_ptr()) }, OtmStatus::Ok);
    assert!(out[0].abs() < 1e-15 && (out[1] - 2.0).abs() < 1e-15);
    let mut out1 = [0.0; 1];
    assert_eq!(
        unsafe { otm_pearson_cost(x.as_ptr(), 1, 1, x.as_ptr(), 1, out1.as_mut_ptr()) },
        OtmStatus::InsufficientSamples
    );

    let q = [0.25; 4];
    let mut frac = 0.0;
    assert_eq!(unsafe { otm_mass_explained(q.as_ptr(), 2, 2, 1, &mut frac) }, OtmStatus::Ok);
    assert_eq!(frac, 0.25);
}

#[test]
fn transported_operator_with_permutation_plans() {
    // target i <- source perm[i]
    let perm = [1usize, 0];
    let mut q = [0.0; 4];
    for (i, &j) in perm.iter().enumerate() {
        q[i * 2 + j] = 0.5;
    }
    let w = [1.0, 2.0, 3.0, 4.0];
    let mut out = [0.0; 4];
    let s = unsafe { otm_transported_operator(q.as_ptr(), 2, 2, q.as_ptr(), 2, 2, w.as_ptr(), true, out.as_mut_ptr()) };
    assert_eq!(s, OtmStatus::Ok);
    assert_eq!(out, [4.0, 3.0, 2.0, 1.0]);
    let s = unsafe { otm_transported_operator(q.as_ptr(), 2, 2, q.as_ptr(), 2, 2, w.as_ptr(), true, ptr::null_mut()) };
    assert_eq!(s, OtmStatus::NullPointer);
}

#[test]
fn topk_tie_rule() {
    let scores = [5.0, 5.0, 1.0, 7.0];
    let mut idx = [0usize; 4];
    let mut count = 0;
    assert_eq!(unsafe { otm_select_topk(scores.as_ptr(), 4, 2, idx.as_mut_ptr(), &mut count) }, OtmStatus::Ok);
    assert_eq!(&idx[..count], &[0, 3]);
}

#[test]
fn container_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.otmb");
    let manifest = ModelManifest {
        model_id: "m".into(),
        num_layers: 1,
        layers: vec![LayerManifest::default()],
        sample_count: 2,
        attributes: Default::default(),
    };
    let rec = TensorRecord::from_f32("extra.values", vec![2, 2], &[1.0, 2.5, -3.0, 4.0]).unwrap();
    write_container(&[rec], &manifest, &path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { otm_container_open(cpath.as_ptr(), &mut c) }, OtmStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { otm_container_num_records(c, &mut n) }, OtmStatus::Ok);
    assert_eq!(n, 1);

    let mut needed = 0;
    let mut tiny = [0 as std::ffi::c_char; 4];
    let s = unsafe { otm_container_record_name(c, 0, tiny.as_mut_ptr(), tiny.len(), &mut needed) };
    assert_eq!(s, OtmStatus::BufferTooSmall);
    assert_eq!(needed, "extra.values".len() + 1);
    let mut buf = vec![0 as std::ffi::c_char; needed];
    assert_eq!(unsafe { otm_container_record_name(c, 0, buf.as_mut_ptr(), needed, ptr::null_mut()) }, OtmStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "extra.values");

    let name = CString::new("extra.values").unwrap();
    let mut shape = [0usize; 4];
    let mut rank = 0;
    assert_eq!(unsafe { otm_container_record_shape(c, name.as_ptr(), shape.as_mut_ptr(), 4, &mut rank) }, OtmStatus::Ok);
    assert_eq!(&shape[..rank], &[2, 2]);
    let mut vals = [0.0; 4];
    assert_eq!(unsafe { otm_container_read_f64(c, name.as_ptr(), vals.as_mut_ptr(), 4) }, OtmStatus::Ok);
    assert_eq!(vals, [1.0, 2.5, -3.0, 4.0]);

    let missing = CString::new("nope").unwrap();
    assert_eq!(unsafe { otm_container_read_f64(c, missing.as_ptr(), vals.as_mut_ptr(), 4) }, OtmStatus::MissingInput);

    let mut mbuf = vec![0 as std::ffi::c_char; 512];
    assert_eq!(unsafe { otm_container_manifest_json(c, mbuf.as_mut_ptr(), 512, ptr::null_mut()) }, OtmStatus::Ok);
    let json = unsafe { CStr::from_ptr(mbuf.as_ptr()) }.to_str().unwrap();
    assert_eq!(json, manifest.to_canonical_json());
    unsafe { otm_container_free(c) };
}

#[test]
fn container_errors() {
    let mut c = ptr::null_mut();
    let p = CString::new("/definitely/not/here.otmb").unwrap();
    assert_eq!(unsafe { otm_container_open(p.as_ptr(), &mut c) }, OtmStatus::Io);
    assert!(last_error().contains("/definitely/not/here.otmb"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.otmb");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { otm_container_open(p.as_ptr(), &mut c) }, OtmStatus::Format);
    assert!(c.is_null());
    // success clears the previous message
    otm_solver_config_feature();
    let mut n = 0;
    assert_eq!(unsafe { otm_container_num_records(ptr::null(), &mut n) }, OtmStatus::NullPointer);
}
