//! Session events and the projection folded from them.

use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::feedback::FeedbackBundle;
use crate::llm::LlmExchange;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    SessionCreated {
        session_id: String,
        student_id: String,
        question_id: Option<String>,
    },
    HintRequested {
        question_id: String,
    },
    HintReturned {
        question_id: String,
        model_prob: f64,
        feedback: FeedbackBundle,
        feedback_degraded: bool,
    },
    Submitted {
        idempotency_key: String,
        interaction: Interaction,
        model_prob: f64,
    },
    FeedbackReturned {
        idempotency_key: String,
        feedback: FeedbackBundle,
        feedback_degraded: bool,
    },
    LlmExchange {
        exchange: LlmExchange,
    },
    ProblemAdvanced {
        question_id: Option<String>,
    },
}

impl EventBody {
    pub fn event_type(&self) -> &'static str {
        match self {
            EventBody::SessionCreated { .. } => "session_created",
            EventBody::HintRequested { .. } => "hint_requested",
            EventBody::HintReturned { .. } => "hint_returned",
            EventBody::Submitted { .. } => "submitted",
            EventBody::FeedbackReturned { .. } => "feedback_returned",
            EventBody::LlmExchange { .. } => "llm_exchange",
            EventBody::ProblemAdvanced { .. } => "problem_advanced",
        }
    }
}

/// One line of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventHead {
    pub seq: u64,
    pub event_type: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub idempotency_key: String,
    pub question_id: String,
    pub correct: bool,
    pub model_prob: f64,
    pub feedback: Option<FeedbackBundle>,
    pub feedback_degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintRecord {
    pub question_id: String,
    pub model_prob: Option<f64>,
    pub feedback: Option<FeedbackBundle>,
    pub feedback_degraded: bool,
}

/// State of one session, derived only from its events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub student_id: String,
    pub created_at: i64,
    pub current_problem: Option<String>,
    /// Whether the current problem has a submission in this session.
    pub current_answered: bool,
    pub history: Vec<Interaction>,
    pub submissions: Vec<SubmissionRecord>,
    pub hints: Vec<HintRecord>,
    pub llm_calls: usize,
    pub events: Vec<EventHead>,
}

impl SessionView {
    pub fn submission(&self, key: &str) -> Option<&SubmissionRecord> {
        self.submissions.iter().find(|s| s.idempotency_key == key)
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.events.last().map(|e| e.seq)
    }
}

/// Folds one event into `view`.
pub fn apply(view: &mut SessionView, event: &Event) {
    view.events.push(EventHead {
        seq: event.seq,
        event_type: event.body.event_type().to_string(),
        timestamp: event.timestamp,
    });
    match &event.body {
        EventBody::SessionCreated { session_id, student_id, question_id } => {
            view.session_id = session_id.clone();
            view.student_id = student_id.clone();
            view.created_at = event.timestamp;
            view.current_problem = question_id.clone();
            view.current_answered = false;
        }
        EventBody::HintRequested { question_id } => view.hints.push(HintRecord {
            question_id: question_id.clone(),
            model_prob: None,
            feedback: None,
            feedback_degraded: false,
        }),
        EventBody::HintReturned { question_id, model_prob, feedback, feedback_degraded } => {
            if let Some(h) = view.hints.iter_mut().rev().find(|h| &h.question_id == question_id && h.feedback.is_none()) {
                h.model_prob = Some(*model_prob);
                h.feedback = Some(feedback.clone());
                h.feedback_degraded = *feedback_degraded;
            }
        }
        EventBody::Submitted { idempotency_key, interaction, model_prob } => {
            view.history.push(interaction.clone());
            view.submissions.push(SubmissionRecord {
                idempotency_key: idempotency_key.clone(),
                question_id: interaction.question_id.clone(),
                correct: interaction.correct,
                model_prob: *model_prob,
                feedback: None,
                feedback_degraded: false,
            });
            if view.current_problem.as_deref() == Some(interaction.question_id.as_str()) {
                view.current_answered = true;
            }
        }
        EventBody::FeedbackReturned { idempotency_key, feedback, feedback_degraded } => {
            if let Some(s) = view.submissions.iter_mut().find(|s| &s.idempotency_key == idempotency_key) {
                s.feedback = Some(feedback.clone());
                s.feedback_degraded = *feedback_degraded;
            }
        }
        EventBody::LlmExchange { .. } => view.llm_calls += 1,
        EventBody::ProblemAdvanced { question_id } => {
            view.current_problem = question_id.clone();
            view.current_answered = false;
        }
    }
}

pub fn project<'a, I>(events: I) -> SessionView
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut view = SessionView::default();
    for e in events {
        apply(&mut view, e);
    }
    view
}
