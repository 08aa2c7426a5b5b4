//! C ABI for the porank toolkit.
//!
//! Every function returns a [`PorankStatus`]; on failure a message is kept
//! per thread and can be read with [`porank_last_error`]. Matrices are dense
//! row-major `double` arrays. Encoders and reports are opaque handles that
//! must be released with their `_free` function.
//!
//! # Safety
//!
//! Pointers passed in must be null or valid for the element counts implied by
//! the accompanying sizes, and handles must come from this library and not be
//! used after they are freed. Null pointers are reported, not dereferenced.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use porank::encoder::{init_params, Activation, EncoderParams, EncoderSpec};
use porank::experiment::train::{loss_on_batch, LossSettings};
use porank::experiment::{run_experiment, ExperimentConfig, LossKind, RunReport};
use porank::losses::{MarginConfig, QuadrupletSets};
use porank::metrics::{rank_queries, wilcoxon_signed_rank, RelevanceMap};
use porank::numerics::{pairwise_distances, Matrix, Metric, SeededRng};
use porank::sinkhorn::{solve_sinkhorn, SinkhornOptions, TransportProblem};
use porank::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PorankStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    KernelUnderflow = 5,
    DegenerateSample = 6,
    TooFewSamples = 7,
    Io = 8,
    Parse = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PorankMetric {
    Euclidean = 0,
    Cosine = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PorankLoss {
    Contrastive = 0,
    Triplet = 1,
    MaxMargin = 2,
    Transport = 3,
    PartialOrder = 4,
}

/// Pair labels of a batch, one byte per entry of the distance matrix.
pub const PORANK_UNLABELED: u8 = 0;
pub const PORANK_POSITIVE: u8 = 1;
pub const PORANK_NEGATIVE: u8 = 2;
pub const PORANK_PARTIAL: u8 = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PorankMargins {
    pub eps: f64,
    pub m: f64,
    pub p: f64,
    pub m1: f64,
    pub m2: f64,
    pub n: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl From<PorankMargins> for MarginConfig {
    fn from(c: PorankMargins) -> Self {
        MarginConfig { eps: c.eps, m: c.m, p: c.p, m1: c.m1, m2: c.m2, n: c.n, gamma: c.gamma, lambda: c.lambda }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PorankWilcoxon {
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n: usize,
    pub p_two_sided: f64,
    pub p_less: f64,
    pub p_greater: f64,
    pub exact: bool,
}

/// Opaque encoder handle.
pub struct PorankEncoder {
    params: EncoderParams,
}

/// Opaque experiment report handle.
pub struct PorankReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PorankStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::ShapeMismatch(_) | Error::NotSquare { .. } => PorankStatus::DimensionMismatch,
        Error::NonFinite(_) | Error::ZeroNorm => PorankStatus::NonFinite,
        Error::KernelUnderflow => PorankStatus::KernelUnderflow,
        Error::DegenerateSample => PorankStatus::DegenerateSample,
        Error::TooFewSamples(_) => PorankStatus::TooFewSamples,
        Error::Io(_) => PorankStatus::Io,
        Error::Json(_) | Error::Schema { .. } | Error::Config(_) => PorankStatus::Parse,
        _ => PorankStatus::InvalidArgument,
    }
}

struct Fail(PorankStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

fn null(what: &str) -> Fail {
    Fail(PorankStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PorankStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PorankStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PorankStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PorankStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn matrix(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Fail> {
    Ok(Matrix::from_vec(rows, cols, input(ptr, rows * cols, what)?.to_vec())?)
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

fn metric_of(m: PorankMetric) -> Metric {
    match m {
        PorankMetric::Euclidean => Metric::Euclidean,
        PorankMetric::Cosine => Metric::Cosine,
    }
}

/// Copies the message of the last failed call on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length
/// without the terminator, or 0 when there is none.
#[no_mangle]
pub unsafe extern "C" fn porank_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[no_mangle]
pub unsafe extern "C" fn porank_margins_default(out: *mut PorankMargins) -> PorankStatus {
    guard(|| {
        let d = MarginConfig::default();
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = PorankMargins { eps: d.eps, m: d.m, p: d.p, m1: d.m1, m2: d.m2, n: d.n, gamma: d.gamma, lambda: d.lambda };
        Ok(())
    })
}

/// Pairwise distances between the rows of `a` (`n x dim`) and `b`
/// (`m x dim`), written to `out` (`n x m`).
#[no_mangle]
pub unsafe extern "C" fn porank_pairwise_distances(
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    dim: usize,
    metric: PorankMetric,
    out: *mut f64,
) -> PorankStatus {
    guard(|| {
        let a = matrix(a, n, dim, "a")?;
        let b = matrix(b, m, dim, "b")?;
        let d = pairwise_distances(&a, &b, metric_of(metric))?;
        output(out, n * m, "out")?.copy_from_slice(d.values.as_slice());
        Ok(())
    })
}

/// Batch loss over an `n x n` distance matrix with one label byte per
/// entry. The triplet loss uses every negative of each row; the transport
/// loss solves its plan with default solver settings. `grad` may be null.
#[no_mangle]
pub unsafe extern "C" fn porank_loss(
    kind: PorankLoss,
    d: *const f64,
    labels: *const u8,
    n: usize,
    margins: *const PorankMargins,
    value: *mut f64,
    grad: *mut f64,
) -> PorankStatus {
    guard(|| {
        let d = matrix(d, n, n, "d")?;
        let labels = input(labels, n * n, "labels")?;
        let margins: MarginConfig = (*margins.as_ref().ok_or_else(|| null("margins"))?).into();
        let value = value.as_mut().ok_or_else(|| null("value"))?;
        let mut sets = QuadrupletSets::default();
        for (k, &l) in labels.iter().enumerate() {
            let pair = (k / n, k % n);
            match l {
                PORANK_UNLABELED => {}
                PORANK_POSITIVE => {
                    sets.s_plus.insert(pair);
                }
                PORANK_NEGATIVE => {
                    sets.s_minus.insert(pair);
                }
                PORANK_PARTIAL => {
                    sets.s_partial.insert(pair);
                }
                other => return Err(invalid(format!("unknown label {other} at ({}, {})", pair.0, pair.1))),
            }
        }
        let kind = match kind {
            PorankLoss::Contrastive => LossKind::Contrastive,
            PorankLoss::Triplet => LossKind::Triplet,
            PorankLoss::MaxMargin => LossKind::Mm,
            PorankLoss::Transport => LossKind::Ot,
            PorankLoss::PartialOrder => LossKind::Po,
        };
        let settings = LossSettings {
            kind,
            margins,
            metric: Metric::Euclidean,
            normalize: false,
            sinkhorn: SinkhornOptions::default(),
        };
        let out = loss_on_batch(&d, &sets, &settings, None)?;
        *value = out.value;
        if !grad.is_null() {
            output(grad, n * n, "grad")?.copy_from_slice(out.d_grad.as_slice());
        }
        Ok(())
    })
}

/// Entropic transport plan for an `n x m` cost with marginals `r`, `c`.
/// `iterations` and `converged` may be null.
#[no_mangle]
pub unsafe extern "C" fn porank_sinkhorn(
    cost: *const f64,
    n: usize,
    m: usize,
    r: *const f64,
    c: *const f64,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    log_domain: bool,
    plan: *mut f64,
    iterations: *mut usize,
    converged: *mut bool,
) -> PorankStatus {
    guard(|| {
        let problem = TransportProblem {
            cost: matrix(cost, n, m, "cost")?,
            r: input(r, n, "r")?.to_vec(),
            c: input(c, m, "c")?.to_vec(),
            lambda,
        };
        let solved = solve_sinkhorn(&problem, SinkhornOptions { tol, max_iter, log_domain })?;
        output(plan, n * m, "plan")?.copy_from_slice(solved.plan.as_slice());
        if let Some(it) = iterations.as_mut() {
            *it = solved.iterations_used;
        }
        if let Some(cv) = converged.as_mut() {
            *cv = solved.converged;
        }
        Ok(())
    })
}

/// Rank of the closest relevant gallery item for each query row of
/// `scores` (smaller is closer). `relevant` holds one byte per entry,
/// non-zero for relevant items.
#[no_mangle]
pub unsafe extern "C" fn porank_rank_queries(
    scores: *const f64,
    queries: usize,
    gallery: usize,
    relevant: *const u8,
    ranks: *mut usize,
) -> PorankStatus {
    guard(|| {
        let scores = matrix(scores, queries, gallery, "scores")?;
        let mask = input(relevant, queries * gallery, "relevant")?;
        let rel: RelevanceMap =
            (0..queries).map(|q| (0..gallery).filter(|&g| mask[q * gallery + g] != 0).collect()).collect();
        let out = rank_queries(&scores, &rel)?;
        output(ranks, queries, "ranks")?.copy_from_slice(&out);
        Ok(())
    })
}

/// Paired signed-rank test on `x - y`.
#[no_mangle]
pub unsafe extern "C" fn porank_wilcoxon(x: *const f64, y: *const f64, n: usize, out: *mut PorankWilcoxon) -> PorankStatus {
    guard(|| {
        let res = wilcoxon_signed_rank(input(x, n, "x")?, input(y, n, "y")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = PorankWilcoxon {
            statistic: res.statistic,
            w_plus: res.w_plus,
            w_minus: res.w_minus,
            n: res.n,
            p_two_sided: res.p_two_sided,
            p_less: res.p_less,
            p_greater: res.p_greater,
            exact: res.exact,
        };
        Ok(())
    })
}

/// New MLP encoder with layer widths `sizes[0..n_sizes]` (input first) and
/// ReLU hidden layers when `relu` is set.
#[no_mangle]
pub unsafe extern "C" fn porank_encoder_new(
    sizes: *const usize,
    n_sizes: usize,
    relu: bool,
    seed: u64,
    out: *mut *mut PorankEncoder,
) -> PorankStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let act = if relu { Activation::Relu } else { Activation::None };
        let spec = EncoderSpec::mlp(input(sizes, n_sizes, "sizes")?.to_vec(), act);
        let params = init_params(&spec, &mut SeededRng::new(seed))
            .map_err(|e| Fail(PorankStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(PorankEncoder { params }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn porank_encoder_free(enc: *mut PorankEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Input width, output width and parameter count of an encoder; any
/// output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn porank_encoder_shape(
    enc: *const PorankEncoder,
    input_dim: *mut usize,
    output_dim: *mut usize,
    num_params: *mut usize,
) -> PorankStatus {
    guard(|| {
        let p = &enc.as_ref().ok_or_else(|| null("encoder"))?.params;
        for (ptr, v) in [(input_dim, p.input_dim()), (output_dim, p.output_dim()), (num_params, p.num_params())] {
            if let Some(x) = ptr.as_mut() {
                *x = v;
            }
        }
        Ok(())
    })
}

/// Embeds `rows` inputs; `out` must hold `rows * output_dim` values.
#[no_mangle]
pub unsafe extern "C" fn porank_encoder_embed(
    enc: *const PorankEncoder,
    xs: *const f64,
    rows: usize,
    out: *mut f64,
) -> PorankStatus {
    guard(|| {
        let p = &enc.as_ref().ok_or_else(|| null("encoder"))?.params;
        let xs = matrix(xs, rows, p.input_dim(), "xs")?;
        let emb = p.embed_batch(&xs)?;
        output(out, rows * p.output_dim(), "out")?.copy_from_slice(emb.as_slice());
        Ok(())
    })
}

/// Copies the flattened parameters into `out` of length `len`, which must
/// equal the parameter count.
#[no_mangle]
pub unsafe extern "C" fn porank_encoder_get_params(enc: *const PorankEncoder, out: *mut f64, len: usize) -> PorankStatus {
    guard(|| {
        let flat = enc.as_ref().ok_or_else(|| null("encoder"))?.params.to_flat();
        if len != flat.len() {
            return Err(Fail(PorankStatus::DimensionMismatch, format!("expected {} parameters, got room for {len}", flat.len())));
        }
        output(out, len, "out")?.copy_from_slice(&flat);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn porank_encoder_set_params(enc: *mut PorankEncoder, params: *const f64, len: usize) -> PorankStatus {
    guard(|| {
        let enc = enc.as_mut().ok_or_else(|| null("encoder"))?;
        enc.params.set_flat(input(params, len, "params")?)?;
        Ok(())
    })
}

/// Runs the experiment described by the config file at `config_path`.
#[no_mangle]
pub unsafe extern "C" fn porank_run_experiment(config_path: *const c_char, out: *mut *mut PorankReport) -> PorankStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = ExperimentConfig::load(Path::new(c_str(config_path, "config_path")?))?;
        let report = run_experiment(&cfg)?;
        *out = Box::into_raw(Box::new(PorankReport { report }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn porank_report_free(report: *mut PorankReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Writes the report JSON, NUL-terminated, into `buf`. `needed` receives the
/// buffer size required including the terminator; call with a null `buf`
/// to query it. Returns `BufferTooSmall` when `len` is insufficient.
#[no_mangle]
pub unsafe extern "C" fn porank_report_json(
    report: *const PorankReport,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> PorankStatus {
    guard(|| {
        let json = report.as_ref().ok_or_else(|| null("report"))?.report.to_json()?;
        let bytes = json.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = bytes.len() + 1;
        }
        if buf.is_null() {
            return if needed.is_null() { Err(null("buf")) } else { Ok(()) };
        }
        if len < bytes.len() + 1 {
            return Err(Fail(PorankStatus::BufferTooSmall, format!("need {} bytes, got {len}", bytes.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}
