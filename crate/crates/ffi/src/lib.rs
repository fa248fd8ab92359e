//! C ABI for the `dualmax` controller.
//!
//! Every function returns a [`DmStatus`]. On failure the message is kept in a
//! thread-local slot readable with [`dm_last_error_message`]. Vectors and
//! row-major matrices are passed as `double` pointers whose length is fixed by
//! the problem dimension. Handles are opaque and must be released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dualmax::bellman;
use dualmax::nalgebra::{DMatrix, DVector};
use dualmax::statistics;
use dualmax::uncertainty;
use dualmax::{Branch, ConeParams, DataMatrix, DualError, Policy, ProblemData, SetKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    NotAdmissible = 4,
    Numeric = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmSetKind {
    Empty = 0,
    All = 1,
    Cone = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmBranch {
    Exploit = 0,
    Explore = 1,
}

/// Problem instance with its admissible-set parameters.
pub struct DmProblem {
    pd: ProblemData,
    cone: ConeParams,
    policy: Option<Policy>,
}

/// Running data statistic `Z`.
pub struct DmData {
    data: DataMatrix,
}

/// Controller decision. The action takes `support[i]` with probability
/// `prob[i]` for `i < support_len`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DmDecision {
    pub branch: DmBranch,
    pub khat_x: f64,
    pub b_hat_ax: f64,
    pub ztilde_at_bhat: f64,
    pub mean: f64,
    pub second_moment: f64,
    pub support_len: usize,
    pub support: [f64; 2],
    pub prob: [f64; 2],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DmBellmanReport {
    pub value_hat: f64,
    pub lhs_exploit_family: f64,
    pub lhs_bar: f64,
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &DualError) -> DmStatus {
    match err {
        DualError::InvalidInstance(_) | DualError::Config(_) => DmStatus::InvalidArgument,
        DualError::Infeasible(_) => DmStatus::Infeasible,
        DualError::Admissibility { .. } | DualError::NotAdmissible(_) => DmStatus::NotAdmissible,
        DualError::Numeric(_) | DualError::UndefinedRatio { .. } => DmStatus::Numeric,
    }
}

struct Fail(DmStatus, String);

impl From<DualError> for Fail {
    fn from(e: DualError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(DmStatus::NullPointer, format!("{name} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> DmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DmStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn as_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn vector(p: *const f64, n: usize, name: &str) -> Result<DVector<f64>, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(DVector::from_column_slice(slice::from_raw_parts(p, n)))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the length needed including the NUL, or 0
/// when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let k = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, k);
                *buf.add(k - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a problem from row-major `n x n` matrices `a` and `s`.
///
/// # Safety
/// `a` and `s` must point to `n * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_problem_new(
    n: usize,
    a: *const f64,
    s: *const f64,
    r: f64,
    beta: f64,
    gamma: f64,
    out: *mut *mut DmProblem,
) -> DmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if a.is_null() || s.is_null() {
            return Err(null("matrix"));
        }
        if n == 0 {
            return Err(Fail(DmStatus::InvalidArgument, "n must be positive".into()));
        }
        let a = DMatrix::from_row_slice(n, n, slice::from_raw_parts(a, n * n));
        let s = DMatrix::from_row_slice(n, n, slice::from_raw_parts(s, n * n));
        let pd = ProblemData::new(a, s, r, beta, gamma)?;
        let cone = uncertainty::compute_cone(&pd)?;
        let policy = Policy::new(&pd, &cone).ok();
        out.write(Box::into_raw(Box::new(DmProblem { pd, cone, policy })));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`dm_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dm_problem_free(p: *mut DmProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_problem_dim(p: *const DmProblem, out: *mut usize) -> DmStatus {
    guard(|| write(out, as_ref(p, "problem")?.pd.n(), "out"))
}

/// Whether gamma meets the admissibility threshold; the threshold itself is
/// written to `threshold` when non-null.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_problem_validate_gamma(
    p: *const DmProblem,
    admissible: *mut bool,
    threshold: *mut f64,
) -> DmStatus {
    guard(|| {
        let adm = as_ref(p, "problem")?.pd.admissibility()?;
        write(admissible, adm.admissible, "admissible")?;
        if !threshold.is_null() {
            threshold.write(adm.threshold);
        }
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_problem_tau(p: *const DmProblem, out: *mut f64) -> DmStatus {
    guard(|| write(out, as_ref(p, "problem")?.pd.tau(), "out"))
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_problem_set_kind(p: *const DmProblem, out: *mut DmSetKind) -> DmStatus {
    guard(|| {
        let kind = match as_ref(p, "problem")?.cone.kind {
            SetKind::Empty => DmSetKind::Empty,
            SetKind::All => DmSetKind::All,
            SetKind::Cone => DmSetKind::Cone,
        };
        write(out, kind, "out")
    })
}

/// Membership by the direct matrix inequality.
///
/// # Safety
/// `b` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_member_direct(p: *const DmProblem, b: *const f64, out: *mut bool) -> DmStatus {
    guard(|| {
        let p = as_ref(p, "problem")?;
        let b = vector(b, p.pd.n(), "b")?;
        write(out, uncertainty::member_direct(&p.pd, &b), "out")
    })
}

/// Membership by the eigen (cone) form.
///
/// # Safety
/// `b` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_member_cone(p: *const DmProblem, b: *const f64, out: *mut bool) -> DmStatus {
    guard(|| {
        let p = as_ref(p, "problem")?;
        let b = vector(b, p.pd.n(), "b")?;
        write(out, uncertainty::member_cone(&p.pd, &p.cone, &b), "out")
    })
}

/// Smallest `|B|^2` over the admissible set; `Infeasible` when it is empty.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_min_norm_sq(p: *const DmProblem, out: *mut f64) -> DmStatus {
    guard(|| {
        let p = as_ref(p, "problem")?;
        write(out, uncertainty::min_norm_sq(&p.pd, &p.cone)?, "out")
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_data_new(n: usize, out: *mut *mut DmData) -> DmStatus {
    guard(|| {
        if n == 0 {
            return Err(Fail(DmStatus::InvalidArgument, "n must be positive".into()));
        }
        write(out, Box::into_raw(Box::new(DmData { data: DataMatrix::new(n) })), "out")
    })
}

/// # Safety
/// `d` must be null or a handle from [`dm_data_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dm_data_free(d: *mut DmData) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Adds the transition `(x, u, x_next)` to the statistic.
///
/// # Safety
/// `x` and `x_next` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_data_update(d: *mut DmData, x: *const f64, u: f64, x_next: *const f64) -> DmStatus {
    guard(|| {
        let d = as_mut(d, "data")?;
        let n = d.data.n();
        let x = vector(x, n, "x")?;
        let xn = vector(x_next, n, "x_next")?;
        d.data.update(&x, u, &xn)?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_data_count(d: *const DmData, out: *mut u64) -> DmStatus {
    guard(|| write(out, as_ref(d, "data")?.data.count(), "out"))
}

unsafe fn pair<'a>(p: *const DmProblem, d: *const DmData) -> Result<(&'a DmProblem, &'a DataMatrix), Fail> {
    let p = as_ref(p, "problem")?;
    let d = &as_ref(d, "data")?.data;
    if d.n() != p.pd.n() {
        return Err(Fail(DmStatus::InvalidArgument, "data and problem dimensions differ".into()));
    }
    Ok((p, d))
}

/// Misfit `z_B(Z)`.
///
/// # Safety
/// `b` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_z_b(p: *const DmProblem, d: *const DmData, b: *const f64, out: *mut f64) -> DmStatus {
    guard(|| {
        let (p, d) = pair(p, d)?;
        let b = vector(b, p.pd.n(), "b")?;
        write(out, statistics::z_b(&p.pd, d, &b), "out")
    })
}

/// Odd part of the misfit.
///
/// # Safety
/// `b` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_z_tilde(p: *const DmProblem, d: *const DmData, b: *const f64, out: *mut f64) -> DmStatus {
    guard(|| {
        let (p, d) = pair(p, d)?;
        let b = vector(b, p.pd.n(), "b")?;
        write(out, statistics::z_tilde(&p.pd, d, &b), "out")
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dm_z_bar(p: *const DmProblem, d: *const DmData, out: *mut f64) -> DmStatus {
    guard(|| {
        let (p, d) = pair(p, d)?;
        write(out, statistics::z_bar(&p.pd, d, &p.cone)?, "out")
    })
}

fn policy_of(p: &DmProblem) -> Result<&Policy, Fail> {
    p.policy.as_ref().ok_or_else(|| {
        let err = Policy::new(&p.pd, &p.cone).err().unwrap_or(DualError::Numeric("policy unavailable".into()));
        Fail::from(err)
    })
}

/// Evaluates the controller at `(x, Z)`. The estimate `B_hat` is written to
/// `b_hat` (`n` doubles) when non-null.
///
/// # Safety
/// `x` must point to `n` doubles; `b_hat` must be null or hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_decide(
    p: *const DmProblem,
    d: *const DmData,
    x: *const f64,
    out: *mut DmDecision,
    b_hat: *mut f64,
) -> DmStatus {
    guard(|| {
        let (p, d) = pair(p, d)?;
        let x = vector(x, p.pd.n(), "x")?;
        let dec = policy_of(p)?.decide(d, &x)?;
        let mut res = DmDecision {
            branch: match dec.branch {
                Branch::Exploit => DmBranch::Exploit,
                Branch::Explore => DmBranch::Explore,
            },
            khat_x: dec.khat_x,
            b_hat_ax: dec.b_hat_ax,
            ztilde_at_bhat: dec.ztilde_at_bhat,
            mean: dec.action.mean,
            second_moment: dec.action.second_moment,
            support_len: dec.action.support.len().min(2),
            support: [0.0; 2],
            prob: [0.0; 2],
        };
        for (i, &(v, w)) in dec.action.support.iter().take(2).enumerate() {
            res.support[i] = v;
            res.prob[i] = w;
        }
        write(out, res, "out")?;
        if !b_hat.is_null() {
            slice::from_raw_parts_mut(b_hat, p.pd.n()).copy_from_slice(dec.b_hat.as_slice());
        }
        Ok(())
    })
}

/// Explicit value function at `(x, Z)`.
///
/// # Safety
/// `x` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_value_hat(p: *const DmProblem, d: *const DmData, x: *const f64, out: *mut f64) -> DmStatus {
    guard(|| {
        let (p, d) = pair(p, d)?;
        let x = vector(x, p.pd.n(), "x")?;
        write(out, bellman::value_hat(&p.pd, d, &p.cone, &x)?, "out")
    })
}

/// One-step Bellman inequality check with tolerance `coef (1 + |V_hat|)`.
///
/// # Safety
/// `x` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_check_bellman(
    p: *const DmProblem,
    d: *const DmData,
    x: *const f64,
    coef: f64,
    out: *mut DmBellmanReport,
) -> DmStatus {
    guard(|| {
        let (p, d) = pair(p, d)?;
        let x = vector(x, p.pd.n(), "x")?;
        let rep = bellman::check_bellman_with(policy_of(p)?, d, &x, coef)?;
        let res = DmBellmanReport {
            value_hat: rep.value_hat,
            lhs_exploit_family: rep.lhs_exploit_family,
            lhs_bar: rep.lhs_bar,
            margin: rep.margin,
            tolerance: rep.tolerance,
            pass: rep.pass,
        };
        write(out, res, "out")
    })
}
