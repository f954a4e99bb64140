//! Ranking and calibration metrics on simulated clicks, plus the rule-based
//! relevance and diversity rubrics on a few hand-made lists.

use gqs::context::ContextBundle;
use gqs::metrics::{
    auc, expected_calibration_error, list_relevance, logloss, rubric_diversity, spearman, RubricThresholds,
};
use gqs::rng;
use gqs::suggestion::SuggestionList;
use gqs::tokens::TokenSequence;
use rand::Rng;

fn seq(t: &[u32]) -> TokenSequence {
    TokenSequence::new(t.to_vec())
}

fn main() -> gqs::Result<()> {
    let mut r = rng::stream(0, "metrics-example", 0);
    let truth: Vec<f64> = (0..2000).map(|_| r.gen_range(0.05..0.95)).collect();
    let labels: Vec<u8> = truth.iter().map(|&p| u8::from(r.gen_bool(p))).collect();
    let noisy: Vec<f64> = truth
        .iter()
        .map(|p| (p + r.gen_range(-0.2..0.2)).clamp(0.01, 0.99))
        .collect();
    let flat = vec![0.5; truth.len()];

    println!(
        "{:>8} {:>6} {:>8} {:>6} {:>8}",
        "scores", "AUC", "logloss", "ECE", "spearman"
    );
    for (name, s) in [("truth", &truth), ("noisy", &noisy), ("flat", &flat)] {
        println!(
            "{name:>8} {:>6.3} {:>8.4} {:>6.3} {:>8.3}",
            auc(s, &labels)?,
            logloss(s, &labels)?,
            expected_calibration_error(s, &truth, 10)?,
            spearman(s, &truth).unwrap_or(f64::NAN)
        );
    }

    let ctx = ContextBundle {
        current_query: seq(&[10, 11, 12, 13]),
        assistant_response: seq(&[20, 21, 22]),
        history: seq(&[30, 31]),
        ..ContextBundle::default()
    };
    let lists = [
        (
            "repeats",
            SuggestionList::new(vec![seq(&[40, 41]), seq(&[40, 41]), seq(&[40, 41])]),
        ),
        (
            "echoes query",
            SuggestionList::new(vec![seq(&[10, 11, 12, 13]), seq(&[10, 11, 12, 14]), seq(&[50])]),
        ),
        (
            "distinct",
            SuggestionList::new(vec![seq(&[40, 41]), seq(&[42, 43]), seq(&[44, 45])]),
        ),
    ];
    for (name, l) in &lists {
        println!(
            "{name:>13}: relevance {:.2}, diversity {:.2}",
            list_relevance(l, &ctx, RubricThresholds::default()),
            rubric_diversity(l, &ctx, 0.85)
        );
    }
    Ok(())
}
