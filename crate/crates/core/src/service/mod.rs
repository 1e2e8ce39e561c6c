//! Tutoring sessions: judged submissions, hints and LLM feedback over an
//! event-sourced session store.

pub mod events;
pub mod predict;
pub mod problems;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Interaction, Language};
use crate::feedback::{
    build_correctness_prompt, build_hint_prompt, extract_ast, generate_feedback, parse_feedback, Comparison,
    Correctness, FeedbackBundle, FeedbackTemplates, LearnerContext, Mode, PastProblemIds, PastProblemText,
    ProblemIds, AST_UNAVAILABLE, POSITIVE_FEEDBACK,
};
use crate::llm::{LlmClient, LlmClientConfig, LlmExchange};

pub use events::{Event, EventBody, EventHead, SessionView};
pub use predict::{DktPredictor, LktPredictor, Predictor, PriorPredictor};
pub use problems::{Judge, JudgeUnavailable, Problem, ProblemBank, ProblemView, ReferenceJudge, ReferencePredicate};
pub use store::{FileStore, Snapshot, StoreError};

/// AST stand-in for languages without a grammar.
pub const AST_UNSUPPORTED: &str = "AST_UNAVAILABLE(unsupported_language)";

const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session `{0}` not found")]
    SessionNotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("hints are only available before the current problem is answered")]
    HintAfterSubmission,
    #[error("session has no current problem")]
    NoCurrentProblem,
    #[error("submission is for `{got}` but the current problem is `{expected}`")]
    WrongProblem { expected: String, got: String },
    #[error(transparent)]
    JudgeUnavailable(#[from] JudgeUnavailable),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("injected fault at {0:?}")]
    Injected(FaultPoint),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::SessionNotFound(_) => 404,
            ServiceError::Validation(_) => 400,
            ServiceError::HintAfterSubmission | ServiceError::NoCurrentProblem | ServiceError::WrongProblem { .. } => 409,
            ServiceError::JudgeUnavailable(_) => 503,
            ServiceError::Store(_) | ServiceError::Injected(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::SessionNotFound(_) => "session_not_found",
            ServiceError::Validation(_) => "invalid_request",
            ServiceError::HintAfterSubmission => "hint_after_submission",
            ServiceError::NoCurrentProblem => "no_current_problem",
            ServiceError::WrongProblem { .. } => "wrong_problem",
            ServiceError::JudgeUnavailable(_) => "judge_unavailable",
            ServiceError::Store(_) => "storage_error",
            ServiceError::Injected(_) => "injected_fault",
        }
    }
}

/// Where a test can make the service fail as if the process had died.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// The submission is on disk; no feedback has been produced.
    AfterSubmitPersisted,
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_millis(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_millis(&self) -> i64 {
        chrono::Utc::now().timestamp_millis()
    }
}

/// Starts at `start` and advances `step` ms on every read.
#[derive(Debug)]
pub struct ManualClock {
    now: AtomicI64,
    step: i64,
}

impl ManualClock {
    pub fn new(start: i64, step: i64) -> Self {
        Self { now: AtomicI64::new(start), step }
    }
}

impl Clock for ManualClock {
    fn now_millis(&self) -> i64 {
        self.now.fetch_add(self.step, Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub comparison: Comparison,
    pub snapshot_every: usize,
    pub llm: LlmClientConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { comparison: Comparison::C1, snapshot_every: 16, llm: LlmClientConfig::for_feedback() }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSessionRequest {
    pub student_id: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SubmitRequest {
    pub code: String,
    /// Defaults to the current problem.
    #[serde(default)]
    pub question_id: Option<String>,
    /// Defaults to a hash of session, problem and code.
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub student_id: String,
    pub created_at: i64,
    pub current_problem: Option<ProblemView>,
    pub hint_available: bool,
    pub attempts: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintResponse {
    pub session_id: String,
    pub question_id: String,
    pub model_prob: f64,
    pub feedback: FeedbackBundle,
    pub feedback_degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub session_id: String,
    pub question_id: String,
    pub idempotency_key: String,
    pub correct: bool,
    pub model_prob: f64,
    pub feedback: FeedbackBundle,
    pub feedback_degraded: bool,
    pub next_problem: Option<ProblemView>,
    /// True when this answers a repeated request.
    pub replayed: bool,
}

/// Interactions of the session's student across all sessions, plus this
/// session's events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub session_id: String,
    pub student_id: String,
    pub interactions: Vec<Interaction>,
    pub events: Vec<EventHead>,
}

struct LiveSession {
    view: SessionView,
    since_snapshot: usize,
}

#[derive(Clone)]
struct StudentEntry {
    key: String,
    session_id: String,
    interaction: Interaction,
}

pub struct ServiceBuilder {
    bank: ProblemBank,
    llm: Box<dyn LlmClient>,
    judge: Box<dyn Judge>,
    predictor: Box<dyn Predictor>,
    baseline: Option<Box<dyn Predictor>>,
    templates: FeedbackTemplates,
    clock: Box<dyn Clock>,
    config: ServiceConfig,
}

impl ServiceBuilder {
    pub fn judge(mut self, judge: impl Judge + 'static) -> Self {
        self.judge = Box::new(judge);
        self
    }

    pub fn predictor(mut self, predictor: Box<dyn Predictor>) -> Self {
        self.predictor = predictor;
        self
    }

    /// Probability source for the `c2` prompts.
    pub fn baseline(mut self, predictor: Box<dyn Predictor>) -> Self {
        self.baseline = Some(predictor);
        self
    }

    pub fn templates(mut self, templates: FeedbackTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn clock(mut self, clock: impl Clock + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn config(mut self, config: ServiceConfig) -> Self {
        self.config = config;
        self
    }

    /// Opens the store under `data_dir` and rebuilds every session from disk.
    pub fn open(self, data_dir: &Path) -> Result<Service, ServiceError> {
        if self.config.snapshot_every == 0 {
            return Err(ServiceError::Validation("snapshot_every must be positive".into()));
        }
        let store = FileStore::open(data_dir)?;
        let mut sessions = HashMap::new();
        let mut students: BTreeMap<String, Vec<StudentEntry>> = BTreeMap::new();
        for id in store.session_ids()? {
            store.repair(&id)?;
            let view = store.load(&id)?;
            let entries = students.entry(view.student_id.clone()).or_default();
            for (rec, it) in view.submissions.iter().zip(&view.history) {
                entries.push(StudentEntry { key: rec.idempotency_key.clone(), session_id: id.clone(), interaction: it.clone() });
            }
            sessions.insert(id, Arc::new(Mutex::new(LiveSession { view, since_snapshot: 0 })));
        }
        for entries in students.values_mut() {
            entries.sort_by(|a, b| {
                (a.interaction.timestamp, &a.session_id).cmp(&(b.interaction.timestamp, &b.session_id))
            });
        }
        tracing::info!(sessions = sessions.len(), "session store opened");
        Ok(Service {
            store,
            bank: self.bank,
            llm: self.llm,
            judge: self.judge,
            predictor: self.predictor,
            baseline: self.baseline,
            templates: self.templates,
            clock: self.clock,
            config: self.config,
            counter: AtomicU64::new(sessions.len() as u64),
            sessions: Mutex::new(sessions),
            students: Mutex::new(students),
            fault: Mutex::new(None),
        })
    }
}

pub struct Service {
    store: FileStore,
    bank: ProblemBank,
    llm: Box<dyn LlmClient>,
    judge: Box<dyn Judge>,
    predictor: Box<dyn Predictor>,
    baseline: Option<Box<dyn Predictor>>,
    templates: FeedbackTemplates,
    clock: Box<dyn Clock>,
    config: ServiceConfig,
    counter: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Mutex<LiveSession>>>>,
    students: Mutex<BTreeMap<String, Vec<StudentEntry>>>,
    fault: Mutex<Option<FaultPoint>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn clamp_prob(p: f64) -> f64 {
    if p.is_finite() {
        p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    } else {
        0.5
    }
}

/// Default idempotency key of a submission.
pub fn submission_key(session_id: &str, question_id: &str, code: &str) -> String {
    let mut h = Sha256::new();
    for part in [session_id, question_id, code] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn fallback_bundle(mode: Mode, comparison: Comparison, correct: Option<bool>) -> FeedbackBundle {
    let text = match correct {
        Some(c) => format!(
            "Your answer was judged {}. Detailed feedback is unavailable right now, please try again later.",
            Correctness::from(c)
        ),
        None => "Hints are unavailable right now. Reread the problem statement and try a small example by hand.".into(),
    };
    let mut components = IndexMap::new();
    components.insert(POSITIVE_FEEDBACK.to_string(), text);
    FeedbackBundle {
        mode,
        comparison: Some(comparison),
        components,
        preamble: String::new(),
        overflow: Vec::new(),
        protocol_violation: false,
        raw_response: String::new(),
    }
}

impl Service {
    pub fn builder(bank: ProblemBank, llm: Box<dyn LlmClient>) -> ServiceBuilder {
        ServiceBuilder {
            bank,
            llm,
            judge: Box::new(ReferenceJudge),
            predictor: Box::new(PriorPredictor::default()),
            baseline: None,
            templates: FeedbackTemplates::default(),
            clock: Box::new(SystemClock),
            config: ServiceConfig::default(),
        }
    }

    pub fn bank(&self) -> &ProblemBank {
        &self.bank
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Makes the next pass through `point` fail.
    pub fn inject_fault(&self, point: FaultPoint) {
        *lock(&self.fault) = Some(point);
    }

    fn trip(&self, point: FaultPoint) -> Result<(), ServiceError> {
        let mut f = lock(&self.fault);
        if *f == Some(point) {
            *f = None;
            return Err(ServiceError::Injected(point));
        }
        Ok(())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ServiceError> {
        lock(&self.sessions).get(id).cloned().ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    fn append(&self, live: &mut LiveSession, body: EventBody) -> Result<(), ServiceError> {
        let event = Event {
            seq: live.view.last_seq().map_or(0, |s| s + 1),
            timestamp: self.clock.now_millis(),
            body,
        };
        let session_id = match &event.body {
            EventBody::SessionCreated { session_id, .. } => session_id.clone(),
            _ => live.view.session_id.clone(),
        };
        self.store.append(&session_id, &event)?;
        events::apply(&mut live.view, &event);
        live.since_snapshot += 1;
        if live.since_snapshot >= self.config.snapshot_every {
            let snapshot = Snapshot { upto_seq: event.seq, view: live.view.clone() };
            if let Err(e) = self.store.write_snapshot(&session_id, &snapshot) {
                tracing::warn!(error = %e, "snapshot write failed");
            } else {
                live.since_snapshot = 0;
            }
        }
        Ok(())
    }

    fn student_history(&self, student_id: &str) -> Vec<StudentEntry> {
        lock(&self.students).get(student_id).cloned().unwrap_or_default()
    }

    /// Lowest-index problem the student has never submitted; failing that,
    /// the lowest-index problem not yet solved.
    fn next_problem(&self, student_id: &str) -> Option<String> {
        let history = self.student_history(student_id);
        let attempted = |q: &str| history.iter().any(|e| e.interaction.question_id == q);
        let solved = |q: &str| history.iter().any(|e| e.interaction.question_id == q && e.interaction.correct);
        let problems = self.bank.problems();
        problems
            .iter()
            .find(|p| !attempted(&p.question_id))
            .or_else(|| problems.iter().find(|p| !solved(&p.question_id)))
            .map(|p| p.question_id.clone())
    }

    fn predictor_for(&self, comparison: Comparison) -> &dyn Predictor {
        match (comparison, &self.baseline) {
            (Comparison::C2, Some(b)) => b.as_ref(),
            _ => self.predictor.as_ref(),
        }
    }

    fn model_prob(&self, history: &[Interaction], problem: &Problem) -> f64 {
        let predictor = self.predictor_for(self.config.comparison);
        match predictor.predict(history, problem) {
            Ok(p) => clamp_prob(p),
            Err(e) => {
                tracing::warn!(predictor = predictor.name(), error = %e, "prediction failed, using 0.5");
                0.5
            }
        }
    }

    fn context(&self, history: &[Interaction], problem: &Problem, model_prob: f64) -> LearnerContext {
        LearnerContext {
            problem_text_past: history
                .iter()
                .map(|h| PastProblemText {
                    question_text: h.question_text.clone().unwrap_or_else(|| h.question_id.clone()),
                    correct: h.correct,
                })
                .collect(),
            problem_past_ids: history
                .iter()
                .map(|h| PastProblemIds { kc_id: h.kc_id.clone(), question_id: h.question_id.clone(), correct: h.correct })
                .collect(),
            problem_text_present: problem.question_text.clone(),
            problem_present_ids: ProblemIds { kc_id: problem.kc_id.clone(), question_id: problem.question_id.clone() },
            response_code_present: None,
            response_code_ast: None,
            model_prob,
            correctness: None,
        }
    }

    /// Calls the LLM and parses its answer, degrading to a fallback bundle on
    /// any failure. The exchange is returned for logging when one happened.
    fn feedback(
        &self,
        mode: Mode,
        prompt: Result<String, crate::feedback::FeedbackError>,
        correct: Option<bool>,
    ) -> (FeedbackBundle, bool, Option<LlmExchange>) {
        let comparison = self.config.comparison;
        let exchange = prompt.and_then(|p| generate_feedback(&p, self.llm.as_ref(), &self.config.llm));
        let exchange = match exchange {
            Ok(x) => x,
            Err(e) => {
                tracing::warn!(%mode, error = %e, "feedback generation failed");
                return (fallback_bundle(mode, comparison, correct), true, None);
            }
        };
        match parse_feedback(&exchange.response, mode, correct.map(Correctness::from)) {
            Ok(mut bundle) => {
                bundle.comparison = Some(comparison);
                (bundle, false, Some(exchange))
            }
            Err(e) => {
                tracing::warn!(%mode, error = %e, "feedback response unusable");
                let mut bundle = fallback_bundle(mode, comparison, correct);
                bundle.raw_response = exchange.response.clone();
                (bundle, true, Some(exchange))
            }
        }
    }

    fn state_of(&self, view: &SessionView) -> SessionState {
        SessionState {
            session_id: view.session_id.clone(),
            student_id: view.student_id.clone(),
            created_at: view.created_at,
            current_problem: view.current_problem.as_deref().and_then(|q| self.bank.view(q)),
            hint_available: view.current_problem.is_some() && !view.current_answered,
            attempts: view.history.len(),
            completed: view.current_problem.is_none(),
        }
    }

    pub fn create_session(&self, request: &CreateSessionRequest) -> Result<SessionState, ServiceError> {
        let student_id = request.student_id.trim();
        if student_id.is_empty() {
            return Err(ServiceError::Validation("student_id must not be empty".into()));
        }
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let now = self.clock.now_millis();
        let mut id = hex::encode(Sha256::digest(format!("{student_id}\0{now}\0{n}").as_bytes()))[..16].to_string();
        while self.store.exists(&id) {
            id = hex::encode(Sha256::digest(id.as_bytes()))[..16].to_string();
        }
        let mut live = LiveSession { view: SessionView::default(), since_snapshot: 0 };
        let question_id = self.next_problem(student_id);
        self.append(
            &mut live,
            EventBody::SessionCreated { session_id: id.clone(), student_id: student_id.to_string(), question_id },
        )?;
        let state = self.state_of(&live.view);
        lock(&self.sessions).insert(id, Arc::new(Mutex::new(live)));
        Ok(state)
    }

    pub fn get_session(&self, session_id: &str) -> Result<SessionState, ServiceError> {
        let s = self.session(session_id)?;
        let live = lock(&s);
        Ok(self.state_of(&live.view))
    }

    /// The in-memory projection of a session.
    pub fn projection(&self, session_id: &str) -> Result<SessionView, ServiceError> {
        let s = self.session(session_id)?;
        let view = lock(&s).view.clone();
        Ok(view)
    }

    /// The projection folded from the session's event log on disk.
    pub fn replay(&self, session_id: &str) -> Result<SessionView, ServiceError> {
        Ok(self.store.replay(session_id)?)
    }

    pub fn history(&self, session_id: &str) -> Result<HistoryView, ServiceError> {
        let s = self.session(session_id)?;
        let live = lock(&s);
        Ok(HistoryView {
            session_id: live.view.session_id.clone(),
            student_id: live.view.student_id.clone(),
            interactions: self.student_history(&live.view.student_id).into_iter().map(|e| e.interaction).collect(),
            events: live.view.events.clone(),
        })
    }

    fn current_problem(&self, view: &SessionView) -> Result<&Problem, ServiceError> {
        let q = view.current_problem.as_deref().ok_or(ServiceError::NoCurrentProblem)?;
        self.bank
            .get(q)
            .map(|(_, p)| p)
            .ok_or_else(|| ServiceError::Validation(format!("problem `{q}` is no longer in the bank")))
    }

    pub fn request_hint(&self, session_id: &str) -> Result<HintResponse, ServiceError> {
        let s = self.session(session_id)?;
        let mut live = lock(&s);
        if live.view.current_problem.is_some() && live.view.current_answered {
            return Err(ServiceError::HintAfterSubmission);
        }
        let problem = self.current_problem(&live.view)?.clone();
        self.append(&mut live, EventBody::HintRequested { question_id: problem.question_id.clone() })?;
        let history: Vec<Interaction> =
            self.student_history(&live.view.student_id).into_iter().map(|e| e.interaction).collect();
        let model_prob = self.model_prob(&history, &problem);
        let ctx = self.context(&history, &problem, model_prob);
        let prompt = build_hint_prompt(&ctx, self.config.comparison, &self.templates);
        let (feedback, degraded, exchange) = self.feedback(Mode::Hint, prompt, None);
        if let Some(exchange) = exchange {
            self.append(&mut live, EventBody::LlmExchange { exchange })?;
        }
        self.append(
            &mut live,
            EventBody::HintReturned {
                question_id: problem.question_id.clone(),
                model_prob,
                feedback: feedback.clone(),
                feedback_degraded: degraded,
            },
        )?;
        Ok(HintResponse {
            session_id: session_id.to_string(),
            question_id: problem.question_id,
            model_prob,
            feedback,
            feedback_degraded: degraded,
        })
    }

    /// Judges and records a submission, then asks for feedback on it.
    ///
    /// The interaction is persisted before feedback is generated. Repeating a
    /// request with the same idempotency key never records it twice; if the
    /// first attempt died before feedback, the repeat completes it.
    pub fn submit(&self, session_id: &str, request: &SubmitRequest) -> Result<SubmitResponse, ServiceError> {
        if request.code.trim().is_empty() {
            return Err(ServiceError::Validation("code must not be empty".into()));
        }
        let s = self.session(session_id)?;
        let mut live = lock(&s);
        let question_id = match (&request.question_id, &live.view.current_problem) {
            (Some(q), _) => q.clone(),
            (None, Some(q)) => q.clone(),
            (None, None) => return Err(ServiceError::NoCurrentProblem),
        };
        let key = request
            .idempotency_key
            .clone()
            .unwrap_or_else(|| submission_key(session_id, &question_id, &request.code));

        if let Some(rec) = live.view.submission(&key).cloned() {
            if let Some(feedback) = rec.feedback {
                return Ok(SubmitResponse {
                    session_id: session_id.to_string(),
                    question_id: rec.question_id,
                    idempotency_key: key,
                    correct: rec.correct,
                    model_prob: rec.model_prob,
                    feedback,
                    feedback_degraded: rec.feedback_degraded,
                    next_problem: live.view.current_problem.as_deref().and_then(|q| self.bank.view(q)),
                    replayed: true,
                });
            }
            tracing::info!(session = session_id, "completing a submission interrupted before feedback");
            let mut response = self.finish_submission(&mut live, &key)?;
            response.replayed = true;
            return Ok(response);
        }

        let problem = self.current_problem(&live.view)?.clone();
        if problem.question_id != question_id {
            return Err(ServiceError::WrongProblem { expected: problem.question_id, got: question_id });
        }
        let correct = self.judge.judge(&problem, &request.code)?;
        let history: Vec<Interaction> =
            self.student_history(&live.view.student_id).into_iter().map(|e| e.interaction).collect();
        let model_prob = self.model_prob(&history, &problem);
        let mut interaction =
            Interaction::new(live.view.student_id.as_str(), problem.question_id.as_str(), problem.kc_id.as_str(), correct)
                .with_texts(problem.kc_text.as_str(), problem.question_text.as_str())
                .with_code(request.code.as_str())
                .with_timestamp(self.clock.now_millis());
        interaction.language = problem.language;
        self.append(
            &mut live,
            EventBody::Submitted { idempotency_key: key.clone(), interaction: interaction.clone(), model_prob },
        )?;
        {
            let mut students = lock(&self.students);
            students.entry(live.view.student_id.clone()).or_default().push(StudentEntry {
                key: key.clone(),
                session_id: session_id.to_string(),
                interaction,
            });
        }
        self.trip(FaultPoint::AfterSubmitPersisted)?;
        self.finish_submission(&mut live, &key)
    }

    fn finish_submission(&self, live: &mut LiveSession, key: &str) -> Result<SubmitResponse, ServiceError> {
        let rec = live.view.submission(key).cloned().expect("submission recorded");
        let entries = self.student_history(&live.view.student_id);
        let pos = entries.iter().position(|e| e.key == key).expect("submission indexed");
        let interaction = entries[pos].interaction.clone();
        let history: Vec<Interaction> = entries[..pos].iter().map(|e| e.interaction.clone()).collect();
        let problem = self
            .bank
            .get(&rec.question_id)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| ServiceError::Validation(format!("problem `{}` is no longer in the bank", rec.question_id)))?;

        let ast = match interaction.language {
            Language::Other => AST_UNSUPPORTED.to_string(),
            lang => extract_ast(&interaction.answer_code, lang).unwrap_or_else(|_| AST_UNAVAILABLE.to_string()),
        };
        let mut ctx = self.context(&history, &problem, rec.model_prob);
        ctx.response_code_present = Some(interaction.answer_code.clone());
        ctx.response_code_ast = Some(ast);
        ctx.correctness = Some(rec.correct.into());
        let prompt = build_correctness_prompt(&ctx, self.config.comparison, &self.templates);
        let (feedback, degraded, exchange) = self.feedback(Mode::Correctness, prompt, Some(rec.correct));
        if let Some(exchange) = exchange {
            self.append(live, EventBody::LlmExchange { exchange })?;
        }
        self.append(
            live,
            EventBody::FeedbackReturned {
                idempotency_key: key.to_string(),
                feedback: feedback.clone(),
                feedback_degraded: degraded,
            },
        )?;
        if rec.correct && live.view.current_problem.as_deref() == Some(rec.question_id.as_str()) {
            let next = self.next_problem(&live.view.student_id);
            self.append(live, EventBody::ProblemAdvanced { question_id: next })?;
        }
        Ok(SubmitResponse {
            session_id: live.view.session_id.clone(),
            question_id: rec.question_id,
            idempotency_key: key.to_string(),
            correct: rec.correct,
            model_prob: rec.model_prob,
            feedback,
            feedback_degraded: degraded,
            next_problem: live.view.current_problem.as_deref().and_then(|q| self.bank.view(q)),
            replayed: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{ANALYSIS, CHEERING_UP, CORRECTION, KEY_NOTIONS, NEXT_CHALLENGE, RELATED_HISTORY, SIMILAR_PROBLEMS};
    use crate::llm::{LlmError, StubLlm};

    fn bank() -> ProblemBank {
        let p = |i: usize, reference: &str| Problem {
            question_id: format!("p{i}"),
            kc_id: format!("k{i}"),
            kc_text: "loops".into(),
            question_text: format!("Problem {i}: print the numbers"),
            language: Language::Java,
            reference: ReferencePredicate::Contains(reference.into()),
        };
        ProblemBank::new(vec![p(0, "for"), p(1, "while"), p(2, "do")]).unwrap()
    }

    fn answer(components: &[&str]) -> String {
        components.iter().enumerate().map(|(i, c)| format!("{}. {c}:\ntext {i}\n", i + 1)).collect()
    }

    fn stub() -> StubLlm {
        StubLlm::new()
            .with_rule("Analysis about the answer", answer(&[POSITIVE_FEEDBACK, ANALYSIS, CORRECTION, NEXT_CHALLENGE, CHEERING_UP]))
            .with_default(answer(&[POSITIVE_FEEDBACK, RELATED_HISTORY, SIMILAR_PROBLEMS, KEY_NOTIONS]))
    }

    fn service(dir: &Path, llm: StubLlm) -> Service {
        Service::builder(bank(), Box::new(llm)).clock(ManualClock::new(1_000, 10)).open(dir).unwrap()
    }

    fn submit(code: &str) -> SubmitRequest {
        SubmitRequest { code: code.into(), ..Default::default() }
    }

    #[test]
    fn hint_then_correct_submission_advances() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), stub());
        let s = svc.create_session(&CreateSessionRequest { student_id: "alice".into() }).unwrap();
        assert_eq!(s.current_problem.as_ref().unwrap().question_id, "p0");
        assert!(s.hint_available);
        let hint = svc.request_hint(&s.session_id).unwrap();
        assert!(!hint.feedback_degraded);
        assert_eq!(hint.feedback.components.len(), 4);
        let r = svc.submit(&s.session_id, &submit("for (;;) {}")).unwrap();
        assert!(r.correct);
        assert_eq!(r.feedback.components.len(), 5);
        assert_eq!(r.next_problem.unwrap().question_id, "p1");
        assert!(svc.get_session(&s.session_id).unwrap().hint_available);
    }

    #[test]
    fn incorrect_submission_stays_and_blocks_hints() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), stub());
        let s = svc.create_session(&CreateSessionRequest { student_id: "bob".into() }).unwrap();
        let r = svc.submit(&s.session_id, &submit("print(1)")).unwrap();
        assert!(!r.correct);
        assert!(r.feedback.protocol_violation);
        assert!(!r.feedback.components.contains_key(NEXT_CHALLENGE));
        assert_eq!(r.next_problem.unwrap().question_id, "p0");
        assert!(matches!(svc.request_hint(&s.session_id), Err(ServiceError::HintAfterSubmission)));
    }

    #[test]
    fn llm_failure_degrades_without_losing_the_interaction() {
        let dir = tempfile::tempdir().unwrap();
        let llm = StubLlm::from_fn(|_| Err(LlmError::Status { status: 500, body: "down".into() }));
        let svc = Service::builder(bank(), Box::new(llm))
            .config(ServiceConfig {
                llm: LlmClientConfig { max_retries: 0, ..LlmClientConfig::for_feedback() },
                ..Default::default()
            })
            .open(dir.path())
            .unwrap();
        let s = svc.create_session(&CreateSessionRequest { student_id: "c".into() }).unwrap();
        let r = svc.submit(&s.session_id, &submit("for")).unwrap();
        assert!(r.feedback_degraded);
        assert_eq!(r.feedback.components.len(), 1);
        assert_eq!(svc.history(&s.session_id).unwrap().interactions.len(), 1);
    }

    struct DownJudge;
    impl Judge for DownJudge {
        fn judge(&self, _: &Problem, _: &str) -> Result<bool, JudgeUnavailable> {
            Err(JudgeUnavailable("sandbox offline".into()))
        }
    }

    #[test]
    fn judge_outage_persists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let svc = Service::builder(bank(), Box::new(stub())).judge(DownJudge).open(dir.path()).unwrap();
        let s = svc.create_session(&CreateSessionRequest { student_id: "d".into() }).unwrap();
        let before = svc.replay(&s.session_id).unwrap();
        let err = svc.submit(&s.session_id, &submit("for")).unwrap_err();
        assert_eq!(err.status(), 503);
        assert_eq!(svc.replay(&s.session_id).unwrap(), before);
    }

    #[test]
    fn sessions_of_one_student_share_history() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), stub());
        let a = svc.create_session(&CreateSessionRequest { student_id: "e".into() }).unwrap();
        svc.submit(&a.session_id, &submit("for")).unwrap();
        let b = svc.create_session(&CreateSessionRequest { student_id: "e".into() }).unwrap();
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(b.current_problem.unwrap().question_id, "p1");
        assert_eq!(svc.history(&b.session_id).unwrap().interactions.len(), 1);
        assert!(svc.projection(&b.session_id).unwrap().history.is_empty());
    }

    #[test]
    fn crash_after_persist_replays_once() {
        let dir = tempfile::tempdir().unwrap();
        let (id, live) = {
            let svc = service(dir.path(), stub());
            let s = svc.create_session(&CreateSessionRequest { student_id: "f".into() }).unwrap();
            svc.inject_fault(FaultPoint::AfterSubmitPersisted);
            assert!(matches!(svc.submit(&s.session_id, &submit("for")), Err(ServiceError::Injected(_))));
            (s.session_id.clone(), svc.projection(&s.session_id).unwrap())
        };
        let svc = service(dir.path(), stub());
        let replayed = svc.projection(&id).unwrap();
        assert_eq!(serde_json::to_string(&replayed).unwrap(), serde_json::to_string(&live).unwrap());
        let r = svc.submit(&id, &submit("for")).unwrap();
        assert!(r.replayed);
        assert_eq!(svc.history(&id).unwrap().interactions.len(), 1);
        let again = svc.submit(&id, &SubmitRequest { question_id: Some("p0".into()), ..submit("for") }).unwrap();
        assert_eq!(again.feedback, r.feedback);
        assert_eq!(svc.projection(&id).unwrap().history.len(), 1);
    }

    #[test]
    fn snapshots_do_not_change_the_projection() {
        let dir = tempfile::tempdir().unwrap();
        let svc = Service::builder(bank(), Box::new(stub()))
            .config(ServiceConfig { snapshot_every: 3, ..Default::default() })
            .open(dir.path())
            .unwrap();
        let s = svc.create_session(&CreateSessionRequest { student_id: "g".into() }).unwrap();
        for code in ["x", "y", "z"] {
            svc.submit(&s.session_id, &submit(code)).unwrap();
        }
        let live = svc.projection(&s.session_id).unwrap();
        let reopened = service(dir.path(), stub());
        assert_eq!(reopened.projection(&s.session_id).unwrap(), live);
        assert_eq!(svc.replay(&s.session_id).unwrap(), live);
    }
}
