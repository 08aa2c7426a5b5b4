use std::ffi::CString;
use std::ptr;

use porank_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { porank_last_error(buf.as_mut_ptr() as *mut _, buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn margins() -> PorankMargins {
    let mut m = PorankMargins { eps: 0.0, m: 0.0, p: 0.0, m1: 0.0, m2: 0.0, n: 0.0, gamma: 0.0, lambda: 0.0 };
    assert_eq!(unsafe { porank_margins_default(&mut m) }, PorankStatus::Ok);
    m
}

#[test]
fn distances_between_rows() {
    let a = [0.0, 0.0, 3.0, 4.0];
    let b = [0.0, 0.0];
    let mut out = [0.0; 2];
    let s = unsafe { porank_pairwise_distances(a.as_ptr(), 2, b.as_ptr(), 1, 2, PorankMetric::Euclidean, out.as_mut_ptr()) };
    assert_eq!(s, PorankStatus::Ok);
    assert_eq!(out, [0.0, 5.0]);
}

#[test]
fn partial_order_loss_and_gradient() {
    // matched distances 0.2; the partial pair sits below its band
    let d = [0.2, 0.25, 0.25, 0.2];
    let labels = [PORANK_POSITIVE, PORANK_PARTIAL, PORANK_PARTIAL, PORANK_POSITIVE];
    let m = PorankMargins { p: 0.1, m1: 0.3, m2: 0.6, n: 0.9, ..margins() };
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    let s = unsafe { porank_loss(PorankLoss::PartialOrder, d.as_ptr(), labels.as_ptr(), 2, &m, &mut value, grad.as_mut_ptr()) };
    assert_eq!(s, PorankStatus::Ok);
    // both partial pairs are 0.25 short of d_ii + m1 in both directions
    assert!((value - 4.0 * 0.25).abs() < 1e-12, "{value}");
    assert!(grad[1] < 0.0 && grad[2] < 0.0);

    let s = unsafe { porank_loss(PorankLoss::MaxMargin, d.as_ptr(), labels.as_ptr(), 2, &m, &mut value, ptr::null_mut()) };
    assert_eq!(s, PorankStatus::Ok);
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let d = [0.2, 0.5, 0.5, 0.2];
    let labels = [PORANK_POSITIVE, 9, PORANK_NEGATIVE, PORANK_POSITIVE];
    let m = margins();
    let mut value = 0.0;
    let s = unsafe { porank_loss(PorankLoss::Contrastive, d.as_ptr(), labels.as_ptr(), 2, &m, &mut value, ptr::null_mut()) };
    assert_eq!(s, PorankStatus::InvalidArgument);
    assert!(last_error().contains("unknown label 9"));

    let s = unsafe { porank_loss(PorankLoss::Contrastive, ptr::null(), labels.as_ptr(), 2, &m, &mut value, ptr::null_mut()) };
    assert_eq!(s, PorankStatus::NullPointer);

    let bad = PorankMargins { m1: 0.9, ..m };
    let labels = [PORANK_POSITIVE, PORANK_NEGATIVE, PORANK_NEGATIVE, PORANK_POSITIVE];
    let s = unsafe { porank_loss(PorankLoss::PartialOrder, d.as_ptr(), labels.as_ptr(), 2, &bad, &mut value, ptr::null_mut()) };
    assert_eq!(s, PorankStatus::InvalidArgument);
    assert!(last_error().starts_with("margin_order"));
}

#[test]
fn sinkhorn_plan_and_underflow() {
    let cost = [0.0, 1.0, 1.0, 0.0];
    let r = [0.5, 0.5];
    let mut plan = [0.0; 4];
    let mut iters = 0usize;
    let mut converged = false;
    let s = unsafe {
        porank_sinkhorn(cost.as_ptr(), 2, 2, r.as_ptr(), r.as_ptr(), 50.0, 1e-9, 1000, false, plan.as_mut_ptr(), &mut iters, &mut converged)
    };
    assert_eq!(s, PorankStatus::Ok);
    assert!(converged && iters > 0);
    assert!(plan[1] <= 1e-3 && (plan[0] - 0.5).abs() <= 1e-3);

    let far = [10.0, 12.0, 11.0, 10.5];
    let s = unsafe {
        porank_sinkhorn(far.as_ptr(), 2, 2, r.as_ptr(), r.as_ptr(), 200.0, 1e-6, 1000, false, plan.as_mut_ptr(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(s, PorankStatus::KernelUnderflow);
    let s = unsafe {
        porank_sinkhorn(far.as_ptr(), 2, 2, r.as_ptr(), r.as_ptr(), 200.0, 1e-6, 1000, true, plan.as_mut_ptr(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(s, PorankStatus::Ok);
    assert!(plan.iter().all(|t| t.is_finite()));
}

#[test]
fn ranks_and_signed_rank_test() {
    let scores = [0.3, 0.1, 0.2, 0.5, 0.5, 0.1];
    let relevant = [1, 0, 0, 0, 1, 0];
    let mut ranks = [0usize; 2];
    let s = unsafe { porank_rank_queries(scores.as_ptr(), 2, 3, relevant.as_ptr(), ranks.as_mut_ptr()) };
    assert_eq!(s, PorankStatus::Ok);
    // the second query's match ties with gallery item 0, which wins the tie
    assert_eq!(ranks, [3, 3]);

    let x = [1.0, 1.0, 2.0, 1.5, 1.0];
    let y = [2.0, 3.0, 3.0, 2.0, 4.0];
    let mut w = PorankWilcoxon::default();
    assert_eq!(unsafe { porank_wilcoxon(x.as_ptr(), y.as_ptr(), 5, &mut w) }, PorankStatus::Ok);
    assert_eq!(w.p_less, 1.0 / 32.0);
    assert!(w.exact);
    assert_eq!(unsafe { porank_wilcoxon(x.as_ptr(), x.as_ptr(), 5, &mut w) }, PorankStatus::DegenerateSample);
}

#[test]
fn encoder_handle_lifecycle() {
    let sizes = [3usize, 4, 2];
    let mut enc: *mut PorankEncoder = ptr::null_mut();
    assert_eq!(unsafe { porank_encoder_new(sizes.as_ptr(), 3, true, 42, &mut enc) }, PorankStatus::Ok);
    let (mut din, mut dout, mut np) = (0, 0, 0);
    assert_eq!(unsafe { porank_encoder_shape(enc, &mut din, &mut dout, &mut np) }, PorankStatus::Ok);
    assert_eq!((din, dout, np), (3, 2, 3 * 4 + 4 + 4 * 2 + 2));

    let mut params = vec![0.0; np];
    assert_eq!(unsafe { porank_encoder_get_params(enc, params.as_mut_ptr(), np) }, PorankStatus::Ok);
    assert_eq!(unsafe { porank_encoder_get_params(enc, params.as_mut_ptr(), np - 1) }, PorankStatus::DimensionMismatch);
    let zeros = vec![0.0; np];
    assert_eq!(unsafe { porank_encoder_set_params(enc, zeros.as_ptr(), np) }, PorankStatus::Ok);
    let xs = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
    let mut out = [9.0; 4];
    assert_eq!(unsafe { porank_encoder_embed(enc, xs.as_ptr(), 2, out.as_mut_ptr()) }, PorankStatus::Ok);
    assert_eq!(out, [0.0; 4]);
    unsafe { porank_encoder_free(enc) };

    let bad = [3usize];
    assert_eq!(unsafe { porank_encoder_new(bad.as_ptr(), 1, true, 0, &mut enc) }, PorankStatus::InvalidArgument);
    unsafe { porank_encoder_free(ptr::null_mut()) };
}

#[test]
fn experiment_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "loss = po\nepochs = 2\nseeds = 0, 1\n").unwrap();
    let path = CString::new(cfg.to_str().unwrap()).unwrap();
    let mut report: *mut PorankReport = ptr::null_mut();
    assert_eq!(unsafe { porank_run_experiment(path.as_ptr(), &mut report) }, PorankStatus::Ok);

    let mut needed = 0usize;
    assert_eq!(unsafe { porank_report_json(report, ptr::null_mut(), 0, &mut needed) }, PorankStatus::Ok);
    let mut small = vec![0u8; 8];
    assert_eq!(
        unsafe { porank_report_json(report, small.as_mut_ptr() as *mut _, small.len(), ptr::null_mut()) },
        PorankStatus::BufferTooSmall
    );
    let mut buf = vec![0u8; needed];
    assert_eq!(unsafe { porank_report_json(report, buf.as_mut_ptr() as *mut _, needed, ptr::null_mut()) }, PorankStatus::Ok);
    assert_eq!(buf.pop(), Some(0));
    let parsed = porank::experiment::RunReport::from_json(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(parsed.runs[0].seeds.len(), 2);
    unsafe { porank_report_free(report) };

    let missing = CString::new(dir.path().join("nope.cfg").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { porank_run_experiment(missing.as_ptr(), &mut report) }, PorankStatus::Io);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/porank.h")).unwrap();
    for name in [
        "porank_last_error",
        "porank_margins_default",
        "porank_pairwise_distances",
        "porank_loss",
        "porank_sinkhorn",
        "porank_rank_queries",
        "porank_wilcoxon",
        "porank_encoder_new",
        "porank_encoder_free",
        "porank_encoder_shape",
        "porank_encoder_embed",
        "porank_encoder_get_params",
        "porank_encoder_set_params",
        "porank_run_experiment",
        "porank_report_free",
        "porank_report_json",
        "typedef struct PorankEncoder PorankEncoder",
        "PORANK_STATUS_KERNEL_UNDERFLOW",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
