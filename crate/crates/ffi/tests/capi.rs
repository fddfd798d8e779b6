use std::ffi::{CStr, CString};
use std::ptr;

use dcgnn_ffi::*;

fn last_error() -> String {
    let p = dc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Path 0-1-2 with one feature per node and labels 0,1,0.
fn path3() -> *mut DcGraph {
    let edges: [usize; 4] = [0, 1, 1, 2];
    let x = [1.0, 2.0, 3.0];
    let y: [i64; 3] = [0, 1, 0];
    let mut g = ptr::null_mut();
    let s = unsafe { dc_graph_new(3, edges.as_ptr(), 2, x.as_ptr(), 1, y.as_ptr(), 2, &mut g) };
    assert_eq!(s, DcStatus::Ok);
    g
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn graph_handle_counts_and_free() {
    let g = path3();
    unsafe {
        assert_eq!(dc_graph_num_nodes(g), 3);
        assert_eq!(dc_graph_num_edges(g), 2);
        assert_eq!(dc_graph_num_nodes(ptr::null()), 0);
        dc_graph_free(g);
        dc_graph_free(ptr::null_mut());
    }
}

#[test]
fn self_loop_is_rejected_with_message() {
    let edges: [usize; 2] = [1, 1];
    let x = [0.0, 0.0];
    let mut g = ptr::null_mut();
    let s = unsafe { dc_graph_new(2, edges.as_ptr(), 1, x.as_ptr(), 1, ptr::null(), 0, &mut g) };
    assert_ne!(s, DcStatus::Ok);
    assert!(g.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_reported() {
    let mut v = 0.0;
    let s = unsafe { dc_effective_resistance(ptr::null(), 0, 1, &mut v) };
    assert_eq!(s, DcStatus::NullPointer);
    assert!(last_error().contains("graph"));
    let s = unsafe { dc_graph_new(1, ptr::null(), 0, ptr::null(), 1, ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(s, DcStatus::NullPointer);
}

#[test]
fn success_clears_last_error() {
    let mut v = 0.0;
    unsafe { dc_effective_resistance(ptr::null(), 0, 1, &mut v) };
    let g = path3();
    assert_eq!(unsafe { dc_effective_resistance(g, 0, 2, &mut v) }, DcStatus::Ok);
    assert!(dc_last_error().is_null());
    unsafe { dc_graph_free(g) };
}

#[test]
fn resistance_values_on_path() {
    let g = path3();
    let mut r = 0.0;
    let mut pairwise = [0.0; 9];
    unsafe {
        assert_eq!(dc_effective_resistance(g, 0, 2, &mut r), DcStatus::Ok);
        assert!((r - 2.0).abs() < 1e-12);
        assert_eq!(dc_total_resistance(g, &mut r, pairwise.as_mut_ptr()), DcStatus::Ok);
        assert!((r - 4.0).abs() < 1e-12);
        assert!((pairwise[1] - 1.0).abs() < 1e-12);
        assert_eq!(dc_total_resistance(g, &mut r, ptr::null_mut()), DcStatus::Ok);
        dc_graph_free(g);
    }
}

#[test]
fn disconnected_pair_has_its_own_code() {
    let edges: [usize; 2] = [0, 1];
    let x = [0.0; 3];
    let mut g = ptr::null_mut();
    let mut r = 0.0;
    unsafe {
        assert_eq!(
            dc_graph_new(3, edges.as_ptr(), 1, x.as_ptr(), 1, ptr::null(), 0, &mut g),
            DcStatus::Ok
        );
        assert_eq!(dc_effective_resistance(g, 0, 2, &mut r), DcStatus::Disconnected);
        dc_graph_free(g);
    }
}

#[test]
fn sinkhorn_two_by_two_closed_form() {
    let cost = [0.0, 1.0, 1.0, 0.0];
    let mut plan = [0.0; 4];
    let (mut re, mut ce) = (1.0, 1.0);
    let s = unsafe {
        dc_sinkhorn(
            cost.as_ptr(),
            2,
            2,
            ptr::null(),
            ptr::null(),
            1.0,
            1000,
            1e-12,
            plan.as_mut_ptr(),
            &mut re,
            &mut ce,
        )
    };
    assert_eq!(s, DcStatus::Ok);
    let big = 0.5 / (1.0 + (-1f64).exp());
    for (got, want) in plan.iter().zip([big, 0.5 - big, 0.5 - big, big]) {
        assert!((got - want).abs() < 1e-10);
    }
    assert!(re < 1e-12 && ce < 1e-12);
}

#[test]
fn sinkhorn_rejects_bad_marginals() {
    let cost = [0.0; 4];
    let u = [0.7, 0.7];
    let mut plan = [0.0; 4];
    let s = unsafe {
        dc_sinkhorn(
            cost.as_ptr(),
            2,
            2,
            u.as_ptr(),
            ptr::null(),
            1.0,
            10,
            0.0,
            plan.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_ne!(s, DcStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn homophily_and_buffer_size() {
    let g = path3();
    let mut h = [0.0; 4];
    let mut c = 0;
    let mut e = 0.0;
    unsafe {
        assert_eq!(
            dc_homophily(g, h.as_mut_ptr(), 1, &mut c, &mut e),
            DcStatus::BufferTooSmall
        );
        assert_eq!(c, 2);
        assert_eq!(dc_homophily(g, h.as_mut_ptr(), 4, &mut c, &mut e), DcStatus::Ok);
        assert_eq!(e, 0.0);
        dc_graph_free(g);
    }
}

#[test]
fn dirichlet_energy_vanishes_on_degree_scaled_embedding() {
    let g = path3();
    let z = [2f64.sqrt(), 3f64.sqrt(), 2f64.sqrt()];
    let mut v = -1.0;
    unsafe {
        assert_eq!(dc_dirichlet_energy(g, z.as_ptr(), 1, &mut v), DcStatus::Ok);
        assert!(v.abs() < 1e-12);
        dc_graph_free(g);
    }
}

#[test]
fn train_save_load_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let gpath = tmp.path().join("g.json");
    let doc = r#"{"n":4,"edges":[[0,1],[1,2],[2,3]],
        "features":[[1.0,0.0],[0.0,1.0],[1.0,0.0],[0.0,1.0]],
        "labels":[0,1,0,1],"num_classes":2,
        "splits":{"train":[0,1],"valid":[2],"test":[3]}}"#;
    std::fs::write(&gpath, doc).unwrap();
    let gpath = CString::new(gpath.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    let s = unsafe { dc_graph_load_json(gpath.as_ptr(), &mut g) };
    assert_eq!(s, DcStatus::Ok, "{}", last_error());

    let hp = CString::new(r#"{"epochs":5,"hidden_channels":4,"n_global":2}"#).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(
            dc_model_train(g, hp.as_ptr(), 3, &mut m),
            DcStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(dc_model_num_classes(m), 2);
        let mut a = [0.0; 8];
        assert_eq!(dc_model_predict(m, g, a.as_mut_ptr(), 8), DcStatus::Ok);
        assert_eq!(dc_model_predict(m, g, a.as_mut_ptr(), 7), DcStatus::BufferTooSmall);

        let ck = CString::new(tmp.path().join("m.json").to_str().unwrap()).unwrap();
        assert_eq!(dc_model_save(m, ck.as_ptr()), DcStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(dc_model_load(ck.as_ptr(), &mut m2), DcStatus::Ok);
        let mut b = [0.0; 8];
        assert_eq!(dc_model_predict(m2, g, b.as_mut_ptr(), 8), DcStatus::Ok);
        assert_eq!(a, b);
        dc_model_free(m);
        dc_model_free(m2);
        dc_graph_free(g);
    }
}

#[test]
fn unknown_hyperparameter_is_a_parse_error() {
    let g = path3();
    let hp = CString::new(r#"{"epochz":5}"#).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(dc_model_train(g, hp.as_ptr(), 0, &mut m), DcStatus::Parse);
        assert!(m.is_null());
        dc_graph_free(g);
    }
}

#[test]
fn missing_checkpoint_is_io() {
    let p = CString::new("/nonexistent/ckpt.json").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dc_model_load(p.as_ptr(), &mut m) }, DcStatus::Io);
    assert!(last_error().contains("ckpt.json"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dcgnn.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "dc_sinkhorn",
        "dc_graph_new",
        "dc_model_predict",
        "dc_last_error",
        "DC_STATUS_OK",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", header])
        .output()
    else {
        return;
    };
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
