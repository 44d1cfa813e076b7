//! C ABI for plan validation, critic-output parsing, the stop predicate and the
//! trajectory store.
//!
//! Conventions:
//! - Every fallible function returns a `DagstopStatus`; results come back
//!   through out-pointers.
//! - Objects are opaque handles released with their `_free` function.
//! - Strings returned through `char **` are owned by the caller and released
//!   with `dagstop_string_free`.
//! - After a non-OK status, `dagstop_last_error` describes the failure on the
//!   calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dagstop::contract::{serialize_plan, truncate_plan_text, validate_plan_text, ErrorCode, ValidationReport};
use dagstop::critic::{parse_critic_output, CriticJudgment};
use dagstop::engine::should_stop;
use dagstop::plan::AgentRegistry;
use dagstop::repair::build_repair_prompt;
use dagstop::status::CompletionStatus;
use dagstop::store::{SearchFilter, StoreError, TaskSummaryRecord, TrajectoryStore};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagstopStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    OutOfRange = 4,
    DimensionMismatch = 5,
    DuplicateId = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagstopCompletionStatus {
    Accomplished = 0,
    PartiallyAccomplished = 1,
    NotAccomplished = 2,
}

impl From<CompletionStatus> for DagstopCompletionStatus {
    fn from(s: CompletionStatus) -> Self {
        match s {
            CompletionStatus::Accomplished => Self::Accomplished,
            CompletionStatus::PartiallyAccomplished => Self::PartiallyAccomplished,
            CompletionStatus::NotAccomplished => Self::NotAccomplished,
        }
    }
}

impl From<DagstopCompletionStatus> for CompletionStatus {
    fn from(s: DagstopCompletionStatus) -> Self {
        match s {
            DagstopCompletionStatus::Accomplished => Self::Accomplished,
            DagstopCompletionStatus::PartiallyAccomplished => Self::PartiallyAccomplished,
            DagstopCompletionStatus::NotAccomplished => Self::NotAccomplished,
        }
    }
}

/// Allowed agent names.
pub struct DagstopRegistry(AgentRegistry);

/// Result of validating one plan text.
pub struct DagstopReport(ValidationReport);

/// Parsed critic judgment.
pub struct DagstopJudgment(CriticJudgment);

/// Embedded trajectory store.
pub struct DagstopStore(TrajectoryStore);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

struct Failure(DagstopStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(DagstopStatus::NullPointer, format!("{what} is null"))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DagstopStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            DagstopStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            DagstopStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DagstopStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(DagstopStatus::InvalidArgument, "string contains NUL".into()))?;
    put(out, c.into_raw(), "out")
}

fn store_failure(e: StoreError) -> Failure {
    let status = match &e {
        StoreError::DimensionMismatch { .. } => DagstopStatus::DimensionMismatch,
        StoreError::DuplicateId(_) => DagstopStatus::DuplicateId,
        StoreError::Io(_) => DagstopStatus::Io,
        StoreError::Malformed { .. } => DagstopStatus::Parse,
        StoreError::EmptySummary(_) | StoreError::ZeroK => DagstopStatus::InvalidArgument,
    };
    Failure(status, e.to_string())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dagstop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dagstop_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn dagstop_registry_new() -> *mut DagstopRegistry {
    Box::into_raw(Box::new(DagstopRegistry(AgentRegistry::default())))
}

/// Appends an agent name. Duplicates and blank names are rejected.
///
/// # Safety
/// `registry` must be a live handle; `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dagstop_registry_add(registry: *mut DagstopRegistry, name: *const c_char) -> DagstopStatus {
    guard(|| {
        let reg = handle_mut(registry, "registry")?;
        let name = read_str(name, "name")?;
        reg.0
            .push(name)
            .map_err(|e| Failure(DagstopStatus::InvalidArgument, e.to_string()))
    })
}

/// # Safety
/// `registry` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_registry_len(registry: *const DagstopRegistry) -> usize {
    registry.as_ref().map_or(0, |r| r.0.len())
}

/// # Safety
/// `registry` must come from `dagstop_registry_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dagstop_registry_free(registry: *mut DagstopRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Validates plan text. Invalid plans still return OK; inspect the report.
///
/// # Safety
/// `plan_text` must be NUL-terminated, `registry` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_validate(
    plan_text: *const c_char,
    registry: *const DagstopRegistry,
    out: *mut *mut DagstopReport,
) -> DagstopStatus {
    guard(|| {
        let text = read_str(plan_text, "plan_text")?;
        let reg = handle(registry, "registry")?;
        let report = validate_plan_text(text, &reg.0);
        put(out, Box::into_raw(Box::new(DagstopReport(report))), "out")
    })
}

/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_report_is_valid(report: *const DagstopReport) -> bool {
    report.as_ref().is_some_and(|r| r.0.is_valid)
}

/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_report_error_count(report: *const DagstopReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.errors.len())
}

fn code_cstr(code: ErrorCode) -> &'static CStr {
    match code {
        ErrorCode::CountsMismatch => c"COUNTS_MISMATCH",
        ErrorCode::AgentUnknown => c"AGENT_UNKNOWN",
        ErrorCode::TaskNumbersNotSeq => c"TASK_NUMBERS_NOT_SEQ",
        ErrorCode::AgentNumbersNotSeq => c"AGENT_NUMBERS_NOT_SEQ",
        ErrorCode::DependencyNumbersNotSeq => c"DEPENDENCY_NUMBERS_NOT_SEQ",
        ErrorCode::ExpectedOutputNumbersNotSeq => c"EXPECTEDOUTPUT_NUMBERS_NOT_SEQ",
        ErrorCode::MissingSection => c"MISSING_SECTION",
        ErrorCode::DepBadFormat => c"DEP_BAD_FORMAT",
        ErrorCode::DepOutOfRange => c"DEP_OUT_OF_RANGE",
        ErrorCode::DepForwardRef => c"DEP_FORWARD_REF",
    }
}

/// Writes the static code name of error `index` (not to be freed).
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_report_error_code(
    report: *const DagstopReport,
    index: usize,
    out: *mut *const c_char,
) -> DagstopStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let e = r.0.errors.get(index).ok_or_else(|| {
            Failure(
                DagstopStatus::OutOfRange,
                format!("error index {index} out of range; report has {}", r.0.errors.len()),
            )
        })?;
        put(out, code_cstr(e.code).as_ptr(), "out")
    })
}

/// Writes a copy of the message of error `index`.
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_report_error_message(
    report: *const DagstopReport,
    index: usize,
    out: *mut *mut c_char,
) -> DagstopStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let e = r.0.errors.get(index).ok_or_else(|| {
            Failure(
                DagstopStatus::OutOfRange,
                format!("error index {index} out of range; report has {}", r.0.errors.len()),
            )
        })?;
        put_string(out, e.message.clone())
    })
}

/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_report_to_json(report: *const DagstopReport, out: *mut *mut c_char) -> DagstopStatus {
    guard(|| {
        let r = handle(report, "report")?;
        put_string(out, serde_json::to_string(&r.0).expect("report serializes"))
    })
}

/// # Safety
/// `report` must come from `dagstop_validate` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dagstop_report_free(report: *mut DagstopReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

fn parse_valid_plan(text: &str) -> Result<dagstop::plan::Plan, Failure> {
    dagstop::contract::parse_plan_text(text)
        .plan
        .ok_or_else(|| Failure(DagstopStatus::Parse, "plan text does not form a structurally valid plan".into()))
}

/// Re-serializes plan text in canonical form.
///
/// # Safety
/// `plan_text` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_normalize_plan(plan_text: *const c_char, out: *mut *mut c_char) -> DagstopStatus {
    guard(|| {
        let plan = parse_valid_plan(read_str(plan_text, "plan_text")?)?;
        put_string(out, serialize_plan(&plan))
    })
}

/// Serializes the first `stop_index` steps (1..=N).
///
/// # Safety
/// `plan_text` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_truncate_plan(
    plan_text: *const c_char,
    stop_index: usize,
    out: *mut *mut c_char,
) -> DagstopStatus {
    guard(|| {
        let plan = parse_valid_plan(read_str(plan_text, "plan_text")?)?;
        let text = truncate_plan_text(&plan, stop_index).map_err(|e| Failure(DagstopStatus::OutOfRange, e.to_string()))?;
        put_string(out, text)
    })
}

/// Builds the planner repair prompt without evaluation feedback. `report`
/// may be NULL for an empty issue list.
///
/// # Safety
/// String arguments must be NUL-terminated; `report` live or NULL; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_build_repair_prompt(
    base_prompt: *const c_char,
    original_plan: *const c_char,
    report: *const DagstopReport,
    out: *mut *mut c_char,
) -> DagstopStatus {
    guard(|| {
        let base = read_str(base_prompt, "base_prompt")?;
        let plan = read_str(original_plan, "original_plan")?;
        let errors = report.as_ref().map(|r| r.0.errors.as_slice()).unwrap_or_default();
        put_string(out, build_repair_prompt(base, plan, errors, None))
    })
}

/// Parses raw critic output. Never fails on content; unparseable text yields
/// the safe default judgment.
///
/// # Safety
/// `raw` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_parse_critic_output(raw: *const c_char, out: *mut *mut DagstopJudgment) -> DagstopStatus {
    guard(|| {
        let raw = read_str(raw, "raw")?;
        put(out, Box::into_raw(Box::new(DagstopJudgment(parse_critic_output(raw)))), "out")
    })
}

/// # Safety
/// `judgment` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_judgment_status(
    judgment: *const DagstopJudgment,
    out: *mut DagstopCompletionStatus,
) -> DagstopStatus {
    guard(|| {
        let j = handle(judgment, "judgment")?;
        put(out, j.0.status.into(), "out")
    })
}

/// # Safety
/// `judgment` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_judgment_can_answer_now(judgment: *const DagstopJudgment) -> bool {
    judgment.as_ref().is_some_and(|j| j.0.can_answer_now)
}

/// False when the safe default was substituted.
///
/// # Safety
/// `judgment` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_judgment_parse_recovered(judgment: *const DagstopJudgment) -> bool {
    judgment.as_ref().is_some_and(|j| j.0.parse_recovered())
}

/// # Safety
/// `judgment` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_judgment_should_stop(judgment: *const DagstopJudgment) -> bool {
    judgment.as_ref().is_some_and(|j| should_stop(&j.0))
}

/// # Safety
/// `judgment` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_judgment_rationale(judgment: *const DagstopJudgment, out: *mut *mut c_char) -> DagstopStatus {
    guard(|| {
        let j = handle(judgment, "judgment")?;
        put_string(out, j.0.rationale.clone())
    })
}

/// # Safety
/// `judgment` must come from `dagstop_parse_critic_output` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dagstop_judgment_free(judgment: *mut DagstopJudgment) {
    if !judgment.is_null() {
        drop(Box::from_raw(judgment));
    }
}

/// Stop predicate on raw fields.
#[no_mangle]
pub extern "C" fn dagstop_should_stop(status: DagstopCompletionStatus, can_answer_now: bool) -> bool {
    can_answer_now && CompletionStatus::from(status).is_success()
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_new(dimension: usize, out: *mut *mut DagstopStore) -> DagstopStatus {
    guard(|| {
        if dimension == 0 {
            return Err(Failure(DagstopStatus::InvalidArgument, "dimension must be positive".into()));
        }
        put(out, Box::into_raw(Box::new(DagstopStore(TrajectoryStore::new(dimension)))), "out")
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_load(path: *const c_char, dimension: usize, out: *mut *mut DagstopStore) -> DagstopStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let store = TrajectoryStore::load(path, dimension).map_err(store_failure)?;
        put(out, Box::into_raw(Box::new(DagstopStore(store))), "out")
    })
}

/// # Safety
/// `store` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_save(store: *const DagstopStore, path: *const c_char) -> DagstopStatus {
    guard(|| {
        let s = handle(store, "store")?;
        let path = read_str(path, "path")?;
        s.0.save(path).map_err(store_failure)
    })
}

/// # Safety
/// `store` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_len(store: *const DagstopStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

unsafe fn read_vector<'a>(p: *const f32, len: usize) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(Failure::null("embedding"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// String arguments must be NUL-terminated; `embedding` must point to `len`
/// floats; `store` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_insert(
    store: *mut DagstopStore,
    id: *const c_char,
    agent_name: *const c_char,
    task_text: *const c_char,
    status: DagstopCompletionStatus,
    summary: *const c_char,
    embedding: *const f32,
    len: usize,
) -> DagstopStatus {
    guard(|| {
        let s = handle_mut(store, "store")?;
        let record = TaskSummaryRecord {
            id: read_str(id, "id")?.to_string(),
            agent_name: read_str(agent_name, "agent_name")?.to_string(),
            task_text: read_str(task_text, "task_text")?.to_string(),
            status: status.into(),
            summary: read_str(summary, "summary")?.to_string(),
            embedding: read_vector(embedding, len)?.to_vec(),
        };
        s.0.insert(record).map_err(store_failure)
    })
}

/// Nearest neighbors as a JSON array of `{id, distance, rank}`. `agent_name`
/// may be NULL; `status_filter` NULL disables the status filter.
///
/// # Safety
/// `store` must be a live handle; `query` must point to `len` floats;
/// `agent_name` NUL-terminated or NULL; `status_filter` readable or NULL;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_nearest(
    store: *const DagstopStore,
    query: *const f32,
    len: usize,
    k: usize,
    agent_name: *const c_char,
    status_filter: *const DagstopCompletionStatus,
    out: *mut *mut c_char,
) -> DagstopStatus {
    guard(|| {
        let s = handle(store, "store")?;
        let query = read_vector(query, len)?;
        let filter = SearchFilter {
            agent_name: if agent_name.is_null() {
                None
            } else {
                Some(read_str(agent_name, "agent_name")?.to_string())
            },
            status: status_filter.as_ref().map(|st| (*st).into()),
        };
        let hits = s.0.nearest_neighbors(query, k, &filter).map_err(store_failure)?;
        let rows: Vec<serde_json::Value> = hits
            .iter()
            .map(|h| serde_json::json!({"id": h.record.id, "distance": h.distance, "rank": h.rank}))
            .collect();
        put_string(out, serde_json::Value::Array(rows).to_string())
    })
}

/// # Safety
/// `store` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dagstop_store_free(store: *mut DagstopStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}
