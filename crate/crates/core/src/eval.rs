//! Outcome classification, rule-ness, and the two analytic decision models.
//!
//! Predictions on the held-out combination BX are sorted into three bins:
//! the label of BW (`rule_consistent`, the single-feature rule answer), the
//! label of AX (`exemplar_alternative`, the equally-similar alternative),
//! or anything else. Rule-ness is the gain in predictive-feature-consistent
//! responses over a control condition where no single feature predicts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimuli::{PartialExposureSpec, StimulusClass};

/// Default exponential-kernel scale for the exemplar model; sharp enough
/// that the nearest exposed combination dominates the across-both-slots one.
pub const DEFAULT_SIMILARITY_SCALE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("histogram has no observations")]
    EmptyHistogram,
    #[error("empty context")]
    EmptyContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    RuleConsistent,
    ExemplarAlternative,
    Other,
}

/// Counts of classified predictions. The three bins partition the label
/// space, so the counts always sum to the number of observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeHistogram {
    pub rule_consistent: u64,
    pub exemplar_alternative: u64,
    pub other: u64,
}

impl OutcomeHistogram {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::RuleConsistent => self.rule_consistent += 1,
            Outcome::ExemplarAlternative => self.exemplar_alternative += 1,
            Outcome::Other => self.other += 1,
        }
    }

    pub fn n(&self) -> u64 {
        self.rule_consistent + self.exemplar_alternative + self.other
    }

    pub fn merge(&mut self, other: &OutcomeHistogram) {
        self.rule_consistent += other.rule_consistent;
        self.exemplar_alternative += other.exemplar_alternative;
        self.other += other.other;
    }

    pub fn frequencies(&self) -> [f64; 3] {
        let n = self.n().max(1) as f64;
        [
            self.rule_consistent as f64 / n,
            self.exemplar_alternative as f64 / n,
            self.other as f64 / n,
        ]
    }
}

/// Sorts a predicted label into the outcome bins for one episode spec.
pub fn classify_outcome(spec: &PartialExposureSpec, predicted: usize) -> Outcome {
    if predicted == spec.label_b {
        Outcome::RuleConsistent
    } else if predicted == spec.label_a {
        Outcome::ExemplarAlternative
    } else {
        Outcome::Other
    }
}

/// Difference in predictive-feature-consistent proportions between a
/// partial-exposure condition and its control, with Wald intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RulenessScore {
    pub p_predictive_partial: f64,
    pub p_predictive_control: f64,
    pub ruleness: f64,
    pub partial_halfwidth: f64,
    pub control_halfwidth: f64,
    pub ruleness_halfwidth: f64,
}

fn wald_halfwidth(p: f64, n: f64) -> f64 {
    1.96 * (p * (1.0 - p) / n).sqrt()
}

/// `rule_consistent` is read as "consistent with the predictive dimension";
/// the caller maps its own categories into the histogram accordingly.
pub fn ruleness(
    partial: &OutcomeHistogram,
    control: &OutcomeHistogram,
) -> Result<RulenessScore, EvalError> {
    let (np, nc) = (partial.n(), control.n());
    if np == 0 || nc == 0 {
        return Err(EvalError::EmptyHistogram);
    }
    let (np, nc) = (np as f64, nc as f64);
    let pp = partial.rule_consistent as f64 / np;
    let pc = control.rule_consistent as f64 / nc;
    let hp = wald_halfwidth(pp, np);
    let hc = wald_halfwidth(pc, nc);
    Ok(RulenessScore {
        p_predictive_partial: pp,
        p_predictive_control: pc,
        ruleness: pp - pc,
        partial_halfwidth: hp,
        control_halfwidth: hc,
        ruleness_halfwidth: (hp * hp + hc * hc).sqrt(),
    })
}

/// Exemplar decision model: label probabilities proportional to summed
/// exponential-kernel similarity, `p(label) ∝ Σ exp(-c · ||query - x||)`.
/// Returns probabilities indexed by label, length `max label + 1`.
pub fn exemplar_oracle(
    context: &[(Vec<f32>, usize)],
    query: &[f32],
    similarity_scale: f64,
) -> Result<Vec<f64>, EvalError> {
    if context.is_empty() {
        return Err(EvalError::EmptyContext);
    }
    let labels = context.iter().map(|(_, l)| *l).max().unwrap() + 1;
    let mut mass = vec![0.0f64; labels];
    for (exemplar, label) in context {
        let d2: f64 = exemplar
            .iter()
            .zip(query)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        mass[*label] += (-similarity_scale * d2.sqrt()).exp();
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        for m in &mut mass {
            *m /= total;
        }
    }
    Ok(mass)
}

/// Outcome of the rule decision model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleDecision {
    Label(usize),
    /// Zero or several feature slots are individually label-consistent, or
    /// the consistent slot never saw the query's value: no unique rule.
    NoUniqueRule,
}

/// Rule decision model: for each feature slot, test whether the slot value
/// alone determines the label across the exposed combinations; if exactly
/// one slot is consistent, classify the query by it.
pub fn rule_oracle(
    exposed: &[(StimulusClass, usize)],
    query: &StimulusClass,
) -> Result<RuleDecision, EvalError> {
    if exposed.is_empty() {
        return Err(EvalError::EmptyContext);
    }
    let slots = query.0.len();
    let mut consistent_slots: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for slot in 0..slots {
        let mut map: Vec<(usize, usize)> = Vec::new();
        let mut consistent = true;
        for (class, label) in exposed {
            let value = class.0[slot];
            match map.iter().find(|(v, _)| *v == value) {
                Some((_, l)) if *l != *label => {
                    consistent = false;
                    break;
                }
                Some(_) => {}
                None => map.push((value, *label)),
            }
        }
        if consistent {
            consistent_slots.push((slot, map));
        }
    }
    if consistent_slots.len() != 1 {
        return Ok(RuleDecision::NoUniqueRule);
    }
    let (slot, map) = &consistent_slots[0];
    match map.iter().find(|(v, _)| *v == query.0[*slot]) {
        Some((_, label)) => Ok(RuleDecision::Label(*label)),
        None => Ok(RuleDecision::NoUniqueRule),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PartialExposureSpec {
        PartialExposureSpec {
            a: 0,
            b: 1,
            x: 0,
            w: 1,
            c: StimulusClass::pair(2, 2),
            label_a: 0,
            label_b: 1,
            label_c: 2,
        }
    }

    #[test]
    fn classification_follows_definitions() {
        let s = spec();
        assert_eq!(classify_outcome(&s, 1), Outcome::RuleConsistent);
        assert_eq!(classify_outcome(&s, 0), Outcome::ExemplarAlternative);
        assert_eq!(classify_outcome(&s, 2), Outcome::Other);
    }

    #[test]
    fn histogram_counts_partition_n() {
        let s = spec();
        let mut h = OutcomeHistogram::default();
        for p in [0, 1, 2, 1, 1] {
            h.record(classify_outcome(&s, p));
        }
        assert_eq!(h.n(), 5);
        assert_eq!(h.rule_consistent, 3);
        assert_eq!(h.exemplar_alternative, 1);
        assert_eq!(h.other, 1);
    }

    #[test]
    fn ruleness_arithmetic() {
        let partial = OutcomeHistogram {
            rule_consistent: 80,
            exemplar_alternative: 20,
            other: 0,
        };
        let control = OutcomeHistogram {
            rule_consistent: 50,
            exemplar_alternative: 50,
            other: 0,
        };
        let s = ruleness(&partial, &control).unwrap();
        assert!((s.ruleness - 0.3).abs() < 1e-12);
        assert!((s.p_predictive_partial - 0.8).abs() < 1e-12);
    }

    #[test]
    fn equal_conditions_give_zero_ruleness() {
        let h = OutcomeHistogram {
            rule_consistent: 500,
            exemplar_alternative: 500,
            other: 0,
        };
        let s = ruleness(&h, &h).unwrap();
        assert_eq!(s.ruleness, 0.0);
    }

    #[test]
    fn ruleness_halfwidth_bounds_binomial_noise() {
        // 0.5 vs 0.5 at n = 10^4 each: the 95% halfwidth stays under 0.02.
        let h = OutcomeHistogram {
            rule_consistent: 5_000,
            exemplar_alternative: 5_000,
            other: 0,
        };
        let s = ruleness(&h, &h).unwrap();
        assert!(s.ruleness.abs() < 0.02);
        assert!(s.ruleness_halfwidth < 0.02, "{}", s.ruleness_halfwidth);
    }

    #[test]
    fn ruleness_requires_observations() {
        let empty = OutcomeHistogram::default();
        assert!(ruleness(&empty, &empty).is_err());
    }

    #[test]
    fn exemplar_oracle_hand_computed_tie() {
        // 4-dim stimuli, zero noise: A=(0,0), B=(1,0) on slot 1 and
        // X=(0,0), W=(1,0) on slot 2. Query BX is at distance 1 from both
        // exemplars, so the mass splits exactly in half.
        let context = vec![
            (vec![0.0, 0.0, 0.0, 0.0], 0usize), // AX
            (vec![1.0, 0.0, 1.0, 0.0], 1usize), // BW
        ];
        let query = vec![1.0, 0.0, 0.0, 0.0]; // BX
        let p = exemplar_oracle(&context, &query, DEFAULT_SIMILARITY_SCALE).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exemplar_oracle_single_exemplar_is_certain() {
        let context = vec![(vec![0.5, -1.0], 2usize)];
        let p = exemplar_oracle(&context, &[3.0, 3.0], 1.0).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[2], 1.0);
        assert_eq!(p[0] + p[1], 0.0);
    }

    #[test]
    fn exemplar_oracle_sums_to_one() {
        let context = vec![
            (vec![0.1, 0.2], 0usize),
            (vec![1.5, -0.3], 1usize),
            (vec![-2.0, 0.8], 2usize),
        ];
        let p = exemplar_oracle(&context, &[0.0, 0.0], 1.0).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rule_oracle_partial_exposure_enumeration() {
        // {AX->0, AW->0, BW->1}: slot 1 consistent (A->0, B->1), slot 2
        // inconsistent (W maps to both); query BX -> 1.
        let exposed = vec![
            (StimulusClass::pair(0, 0), 0usize),
            (StimulusClass::pair(0, 1), 0usize),
            (StimulusClass::pair(1, 1), 1usize),
        ];
        let q = StimulusClass::pair(1, 0);
        assert_eq!(rule_oracle(&exposed, &q).unwrap(), RuleDecision::Label(1));
    }

    #[test]
    fn rule_oracle_control_has_no_unique_rule() {
        let exposed = vec![
            (StimulusClass::pair(0, 0), 0usize),
            (StimulusClass::pair(1, 1), 1usize),
        ];
        let q = StimulusClass::pair(1, 0);
        assert_eq!(rule_oracle(&exposed, &q).unwrap(), RuleDecision::NoUniqueRule);
    }

    #[test]
    fn rule_oracle_single_class_is_degenerate() {
        let exposed = vec![(StimulusClass::pair(4, 7), 2usize)];
        let q = StimulusClass::pair(4, 7);
        assert_eq!(rule_oracle(&exposed, &q).unwrap(), RuleDecision::NoUniqueRule);
    }

    #[test]
    fn rule_oracle_always_answers_label_b_on_partial_specs() {
        use crate::stimuli::VocabConfig;
        let cfg = VocabConfig::default();
        for i in 0..500 {
            let mut r = crate::rng::rng_for(13, crate::rng::stream::ORACLE, i);
            let spec = PartialExposureSpec::random(&mut r, &cfg);
            let decision = rule_oracle(&spec.exposed(), &spec.query_class()).unwrap();
            assert_eq!(decision, RuleDecision::Label(spec.label_b));
        }
    }
}
