//! Seeded synthetic interaction logs for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Interaction, InteractionLog};

/// Shape of a generated log.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub students: usize,
    pub steps_per_student: usize,
    pub kcs: usize,
    pub questions_per_kc: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { students: 40, steps_per_student: 12, kcs: 6, questions_per_kc: 3, seed: 0 }
    }
}

const TOPICS: [&str; 12] = [
    "loops", "recursion", "arrays", "strings", "conditionals", "maps", "sorting", "classes", "exceptions",
    "booleans", "integers", "lists",
];

pub fn kc_text(k: usize) -> String {
    let topic = TOPICS[k % TOPICS.len()];
    if k < TOPICS.len() {
        topic.to_string()
    } else {
        format!("{topic} {}", k / TOPICS.len())
    }
}

pub fn question_text(k: usize, q: usize) -> String {
    format!("practice {} exercise {q}", kc_text(k))
}

/// Enriched log where an answer is correct exactly when its KC index is even.
///
/// Students draw KCs and questions uniformly; timestamps are sequential.
pub fn parity_log(spec: &SyntheticSpec) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.students * spec.steps_per_student);
    for s in 0..spec.students {
        for t in 0..spec.steps_per_student {
            let k = rng.random_range(0..spec.kcs);
            let q = rng.random_range(0..spec.questions_per_kc.max(1));
            let it = Interaction::new(format!("s{s:03}"), format!("k{k}q{q}"), format!("k{k}"), k % 2 == 0)
                .with_texts(kc_text(k), question_text(k, q))
                .with_code(format!("// attempt {t} on k{k}q{q}"))
                .with_timestamp((s * spec.steps_per_student + t) as i64);
            out.push(it);
        }
    }
    InteractionLog::from_interactions(out).expect("generated log is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_labels_and_shape() {
        let log = parity_log(&SyntheticSpec { students: 5, steps_per_student: 4, ..Default::default() });
        assert_eq!(log.num_students(), 5);
        assert_eq!(log.num_interactions(), 20);
        for it in log.iter() {
            let k: usize = it.kc_id[1..].parse().unwrap();
            assert_eq!(it.correct, k % 2 == 0);
            assert!(it.is_enriched());
        }
        assert_eq!(parity_log(&SyntheticSpec::default()).iter().count(), 480);
    }
}
