//! Next-attempt probability sources for feedback prompts.

use crate::data::Interaction;
use crate::dkt::DktModel;
use crate::model::KtModel;

use super::problems::Problem;

/// Probability that the student solves `problem` given their history.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, history: &[Interaction], problem: &Problem) -> Result<f64, String>;
}

/// Ignores history and always returns the same prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorPredictor(pub f64);

impl Default for PriorPredictor {
    fn default() -> Self {
        Self(0.5)
    }
}

impl Predictor for PriorPredictor {
    fn name(&self) -> &str {
        "prior"
    }

    fn predict(&self, _: &[Interaction], _: &Problem) -> Result<f64, String> {
        Ok(self.0)
    }
}

pub struct LktPredictor(pub KtModel);

impl Predictor for LktPredictor {
    fn name(&self) -> &str {
        "lkt"
    }

    fn predict(&self, history: &[Interaction], problem: &Problem) -> Result<f64, String> {
        let candidate = Interaction::new(
            history.first().map(|h| h.student_id.as_str()).unwrap_or("-"),
            problem.question_id.as_str(),
            problem.kc_id.as_str(),
            false,
        )
        .with_texts(problem.kc_text.as_str(), problem.question_text.as_str());
        self.0.predict_next(history, &candidate).map_err(|e| e.to_string())
    }
}

pub struct DktPredictor(pub DktModel);

impl Predictor for DktPredictor {
    fn name(&self) -> &str {
        "dkt"
    }

    fn predict(&self, history: &[Interaction], problem: &Problem) -> Result<f64, String> {
        self.0.predict_next(history, &problem.kc_id).map_err(|e| e.to_string())
    }
}
