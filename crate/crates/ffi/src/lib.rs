//! C ABI over `cliplab`.
//!
//! Every entry point returns a [`ClStatus`]; results come back through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`cliplab_last_error_message`]. Tasks and policies are opaque handles
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use cliplab::bias_lab::{analytic_bias, AnalyticBiasParams, AnalyticStrategy};
use cliplab::coefficients::{coefficient, continuity_gap, BoundarySide, StrategyConfig};
use cliplab::config::ExperimentConfig;
use cliplab::environment::{build_task, Task, TaskSpec};
use cliplab::policy::TabularPolicy;
use cliplab::regions::{classify, ClipConfig, Region, TokenRecord};
use cliplab::trainer::{scale_learning_rate, train_run, LrScaleParams, TrainConfig};
use cliplab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClStatus {
    Ok = 0,
    InvalidInput = 1,
    NullPointer = 2,
    Capacity = 3,
    NonFinite = 4,
    Io = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClStrategyKind {
    TruePg = 0,
    Grpo = 1,
    Cispo = 2,
    Gppo = 3,
    CeGppo = 4,
    Aspo = 5,
    Dgpo = 6,
}

/// Flat strategy description. Fields a kind does not use are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClStrategy {
    pub kind: ClStrategyKind,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_low_prime: f64,
    pub eps_high_prime: f64,
    pub n: u32,
    pub m: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClRegion {
    LowNegative = 0,
    HighPositive = 1,
    LowPositive = 2,
    HighNegative = 3,
    InBoundary = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClCoefficient {
    pub coefficient: f64,
    pub prob_weight: f64,
    pub region: ClRegion,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClAnalyticStrategy {
    Grpo = 0,
    Aspo = 1,
    Cispo = 2,
    Gppo = 3,
    Ce = 4,
    Dgpo = 5,
}

/// Opaque synthetic task.
pub struct ClTask(Task);

/// Opaque tabular softmax policy.
pub struct ClPolicy(TabularPolicy);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(ClStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::Misaligned(_) | Error::Json(_) => {
                ClStatus::InvalidInput
            }
            Error::Capacity(_) => ClStatus::Capacity,
            Error::NonFiniteGradient { .. } => ClStatus::NonFinite,
            Error::Config { .. } => ClStatus::Config,
            Error::Io { .. } | Error::Csv(_) => ClStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ClStatus::NullPointer, format!("`{what}` is null"))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ClStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cliplab".into());
            ClStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn region_to_c(r: Region) -> ClRegion {
    match r {
        Region::LowNegative => ClRegion::LowNegative,
        Region::HighPositive => ClRegion::HighPositive,
        Region::LowPositive => ClRegion::LowPositive,
        Region::HighNegative => ClRegion::HighNegative,
        Region::InBoundary => ClRegion::InBoundary,
    }
}

impl ClStrategy {
    fn to_config(self) -> Result<StrategyConfig, Fail> {
        let clip = ClipConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
        };
        let s = match self.kind {
            ClStrategyKind::TruePg => StrategyConfig::TruePg,
            ClStrategyKind::Grpo => StrategyConfig::Grpo { clip },
            ClStrategyKind::Cispo => StrategyConfig::Cispo { clip },
            ClStrategyKind::Gppo => StrategyConfig::Gppo { clip },
            ClStrategyKind::CeGppo => StrategyConfig::CeGppo {
                clip,
                beta1: self.beta1,
                beta2: self.beta2,
            },
            ClStrategyKind::Aspo => StrategyConfig::Aspo {
                clip,
                eps_low_prime: self.eps_low_prime,
                eps_high_prime: self.eps_high_prime,
            },
            ClStrategyKind::Dgpo => StrategyConfig::Dgpo {
                clip,
                n: self.n,
                m: self.m,
            },
        };
        s.validate()?;
        Ok(s)
    }
}

/// Message for the last failing call on this thread, or null. The pointer
/// stays valid until the next `cliplab_*` call on the same thread.
#[no_mangle]
pub extern "C" fn cliplab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Fills `out` with the default hyperparameters of `kind`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_strategy_default(
    kind: ClStrategyKind,
    out: *mut ClStrategy,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        *o = ClStrategy {
            kind,
            eps_low: 0.2,
            eps_high: 0.2,
            beta1: cliplab::coefficients::DEFAULT_CE_BETA1,
            beta2: cliplab::coefficients::DEFAULT_CE_BETA2,
            eps_low_prime: cliplab::coefficients::DEFAULT_ASPO_EPS_LOW_PRIME,
            eps_high_prime: cliplab::coefficients::DEFAULT_ASPO_EPS_HIGH_PRIME,
            n: 1,
            m: 2,
        };
        Ok(())
    })
}

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_classify(
    ratio: f64,
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    out: *mut ClRegion,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        let clip = ClipConfig::new(eps_low, eps_high)?;
        *o = region_to_c(classify(ratio, advantage, &clip)?);
        Ok(())
    })
}

/// # Safety
/// `strategy` must be null or point to a valid [`ClStrategy`]; `out` must
/// be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_coefficient(
    strategy: *const ClStrategy,
    old_prob: f64,
    cur_prob: f64,
    advantage: f64,
    out: *mut ClCoefficient,
) -> ClStatus {
    guard(|| {
        let s = in_ref(strategy, "strategy")?.to_config()?;
        let o = out_ref(out, "out")?;
        let c = coefficient(&s, &TokenRecord::new(old_prob, cur_prob, advantage)?)?;
        *o = ClCoefficient {
            coefficient: c.coefficient,
            prob_weight: c.prob_weight,
            region: region_to_c(c.region),
        };
        Ok(())
    })
}

/// Jump in `F` across the left (`right_side == false`) or right trust-region
/// boundary, using the strategy's own margins.
///
/// # Safety
/// `strategy` must be null or valid; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_continuity_gap(
    strategy: *const ClStrategy,
    right_side: bool,
    old_prob: f64,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        let s = in_ref(strategy, "strategy")?;
        let clip = ClipConfig::new(s.eps_low, s.eps_high)?;
        let cfg = s.to_config()?;
        let o = out_ref(out, "out")?;
        let side = if right_side {
            BoundarySide::Right
        } else {
            BoundarySide::Left
        };
        *o = continuity_gap(&cfg, side, old_prob, &clip)?;
        Ok(())
    })
}

/// Group-normalized advantages of `len` rewards written to `out`.
///
/// # Safety
/// `rewards` and `out` must be null or valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn cliplab_normalize(
    rewards: *const f64,
    len: usize,
    degenerate_eps: f64,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        if rewards.is_null() {
            return Err(null("rewards"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let r = std::slice::from_raw_parts(rewards, len);
        let a = cliplab::advantage::normalize(r, degenerate_eps)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&a);
        Ok(())
    })
}

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_scale_learning_rate(
    eta_base: f64,
    n_base: f64,
    n_target: f64,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        *o = scale_learning_rate(&LrScaleParams {
            eta_base,
            n_base,
            n_target,
        })?;
        Ok(())
    })
}

/// Closed-form LN-region bias for the power-law probability model.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_analytic_bias(
    which: ClAnalyticStrategy,
    k: f64,
    gamma: f64,
    delta: f64,
    r0: f64,
    n: u32,
    beta1: f64,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        let which = match which {
            ClAnalyticStrategy::Grpo => AnalyticStrategy::Grpo,
            ClAnalyticStrategy::Aspo => AnalyticStrategy::Aspo,
            ClAnalyticStrategy::Cispo => AnalyticStrategy::Cispo,
            ClAnalyticStrategy::Gppo => AnalyticStrategy::Gppo,
            ClAnalyticStrategy::Ce => AnalyticStrategy::Ce,
            ClAnalyticStrategy::Dgpo => AnalyticStrategy::Dgpo,
        };
        let p = AnalyticBiasParams {
            k,
            gamma,
            delta,
            r0,
            n,
            beta1,
        };
        *o = analytic_bias(&p, which)?;
        Ok(())
    })
}

/// Builds a synthetic task with `answers_per_query` distinct correct
/// sequences per query.
///
/// # Safety
/// `out` must be null or valid for writes. Free the handle with
/// [`cliplab_task_free`].
#[no_mangle]
pub unsafe extern "C" fn cliplab_task_new(
    num_queries: usize,
    vocab_size: usize,
    horizon: usize,
    answers_per_query: usize,
    seed: u64,
    out: *mut *mut ClTask,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        let task = build_task(&TaskSpec {
            num_queries,
            vocab_size,
            horizon,
            answers_per_query,
            seed,
        })?;
        *o = Box::into_raw(Box::new(ClTask(task)));
        Ok(())
    })
}

/// # Safety
/// `task` must be null or a live handle; `tokens` valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn cliplab_task_reward(
    task: *const ClTask,
    query: usize,
    tokens: *const usize,
    len: usize,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        let t = in_ref(task, "task")?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        let o = out_ref(out, "out")?;
        *o = t.0.reward(query, std::slice::from_raw_parts(tokens, len))?;
        Ok(())
    })
}

/// Exact probability that `policy` samples a correct response, averaged
/// over queries.
///
/// # Safety
/// Handles must be null or live; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_task_expected_accuracy(
    task: *const ClTask,
    policy: *const ClPolicy,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        let t = in_ref(task, "task")?;
        let p = in_ref(policy, "policy")?;
        let o = out_ref(out, "out")?;
        *o = t.0.expected_accuracy(&p.0)?;
        Ok(())
    })
}

/// # Safety
/// `task` must be null or a handle from [`cliplab_task_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cliplab_task_free(task: *mut ClTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Uniform policy (all logits zero).
///
/// # Safety
/// `out` must be null or valid for writes. Free with [`cliplab_policy_free`].
#[no_mangle]
pub unsafe extern "C" fn cliplab_policy_new(
    num_queries: usize,
    horizon: usize,
    vocab_size: usize,
    out: *mut *mut ClPolicy,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        let p = TabularPolicy::uniform(num_queries, horizon, vocab_size)?;
        *o = Box::into_raw(Box::new(ClPolicy(p)));
        Ok(())
    })
}

/// Policy with logits drawn uniformly from `[-scale, scale]`.
///
/// # Safety
/// `out` must be null or valid for writes. Free with [`cliplab_policy_free`].
#[no_mangle]
pub unsafe extern "C" fn cliplab_policy_random(
    num_queries: usize,
    horizon: usize,
    vocab_size: usize,
    scale: f64,
    seed: u64,
    out: *mut *mut ClPolicy,
) -> ClStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        let p = TabularPolicy::random(num_queries, horizon, vocab_size, scale, seed)?;
        *o = Box::into_raw(Box::new(ClPolicy(p)));
        Ok(())
    })
}

/// Next-token distribution at `(query, position)`; `out` holds `out_len`
/// slots, which must equal the vocabulary size.
///
/// # Safety
/// `policy` must be null or live; `out` valid for `out_len` elements.
#[no_mangle]
pub unsafe extern "C" fn cliplab_policy_probs(
    policy: *const ClPolicy,
    query: usize,
    position: usize,
    out: *mut f64,
    out_len: usize,
) -> ClStatus {
    guard(|| {
        let p = in_ref(policy, "policy")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != p.0.vocab_size() {
            return Err(Fail(
                ClStatus::InvalidInput,
                format!("out_len {out_len} != vocab size {}", p.0.vocab_size()),
            ));
        }
        let probs = p.0.token_probs(query, position)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&probs);
        Ok(())
    })
}

/// Mean next-token entropy (nats) over every context.
///
/// # Safety
/// `policy` must be null or live; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cliplab_policy_entropy(
    policy: *const ClPolicy,
    out: *mut f64,
) -> ClStatus {
    guard(|| {
        let p = in_ref(policy, "policy")?;
        let o = out_ref(out, "out")?;
        *o = p.0.entropy(&p.0.all_contexts())?;
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cliplab_policy_free(policy: *mut ClPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Trains from the uniform policy. `config_text` uses the `key = value`
/// config format (null means defaults; its `task.*` and `run.*` keys are
/// ignored). `strategy` overrides `strategy.kinds` when non-null, otherwise
/// the first listed kind is used.
///
/// On success `out_policy` receives the final policy and `out_accuracy` its
/// exact expected accuracy. A run that hits a non-finite gradient returns
/// [`ClStatus::NonFinite`] and still hands back the last finite policy.
///
/// # Safety
/// Pointers must be null or valid; `config_text` NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn cliplab_train_run(
    task: *const ClTask,
    config_text: *const c_char,
    strategy: *const ClStrategy,
    seed: u64,
    out_policy: *mut *mut ClPolicy,
    out_accuracy: *mut f64,
) -> ClStatus {
    guard(|| {
        let t = in_ref(task, "task")?;
        let op = out_ref(out_policy, "out_policy")?;
        let oa = out_ref(out_accuracy, "out_accuracy")?;
        let cfg = if config_text.is_null() {
            ExperimentConfig::default()
        } else {
            let text = CStr::from_ptr(config_text)
                .to_str()
                .map_err(|e| Fail(ClStatus::InvalidInput, format!("config_text: {e}")))?;
            ExperimentConfig::parse(text)?
        };
        let strategy = match strategy.as_ref() {
            Some(s) => s.to_config()?,
            None => cfg.strategy.build(&cfg.strategy.kinds[0])?,
        };
        let train = TrainConfig {
            strategy,
            seed,
            ..cfg.train
        };
        let outcome = train_run(&t.0, &train)?;
        *oa = t.0.expected_accuracy(&outcome.policy)?;
        *op = Box::into_raw(Box::new(ClPolicy(outcome.policy)));
        match outcome.collapse {
            Some(why) => Err(Fail(ClStatus::NonFinite, why)),
            None => Ok(()),
        }
    })
}
