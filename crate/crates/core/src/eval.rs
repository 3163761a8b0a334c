//! Answer normalization, per-instruction accuracy and evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Category, DatasetRecord, ObjectColor, DESCRIPTION_TEMPLATES};
use crate::error::{Error, Result};

/// Lowercases, trims, drops terminal `.`, `!`, `?`, collapses whitespace,
/// and reduces answers that open with a yes/no word to that word.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut s = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    while s.ends_with(['.', '!', '?']) {
        s.pop();
        s.truncate(s.trim_end().len());
    }
    for word in ["yes", "no"] {
        if let Some(rest) = s.strip_prefix(word) {
            if rest.is_empty() || rest.starts_with([',', ' ', '.', '!', ';']) {
                return word.to_string();
            }
        }
    }
    s
}

fn has_word(text: &str, word: &str) -> bool {
    text.split(|c: char| !c.is_alphanumeric())
        .any(|w| w == word)
}

/// Whether `text` instantiates one of the description templates with a
/// valid color, category and shape word.
pub fn matches_description_template(text: &str) -> bool {
    let got = normalize_answer(text);
    let words: Vec<&str> = got.split(' ').collect();
    let colors: Vec<&str> = ObjectColor::ALL.iter().map(|c| c.name()).collect();
    let categories: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
    let shapes = ["round", "long", "boxy"];
    DESCRIPTION_TEMPLATES.iter().any(|t| {
        let pattern = normalize_answer(t);
        let slots: Vec<&str> = pattern.split(' ').collect();
        slots.len() == words.len()
            && slots.iter().zip(&words).all(|(slot, w)| match *slot {
                "{color}" => colors.contains(w),
                "{category}" => categories.contains(w),
                "{shape}" => shapes.contains(w),
                other => other == *w,
            })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub value: f64,
    /// Records without a prediction; they count as wrong.
    pub missing: usize,
}

/// Exact match after normalization. For the category question a whole
/// word equal to the gold category also counts. The describe question is
/// scored as the template-match rate.
pub fn instruction_accuracy(
    predictions: &BTreeMap<String, String>,
    gold: &[DatasetRecord],
    instruction_id: u8,
) -> Accuracy {
    if gold.is_empty() {
        return Accuracy {
            value: 0.0,
            missing: 0,
        };
    }
    let mut hits = 0;
    let mut missing = 0;
    for rec in gold {
        let Some(pred) = predictions.get(&rec.id) else {
            missing += 1;
            continue;
        };
        let answer = rec.answer(instruction_id).unwrap_or_default();
        let p = normalize_answer(pred);
        let ok = match instruction_id {
            1 => p == normalize_answer(answer) || has_word(&p, rec.category.name()),
            5 => matches_description_template(pred),
            _ => p == normalize_answer(answer),
        };
        hits += ok as usize;
    }
    Accuracy {
        value: hits as f64 / gold.len() as f64,
        missing,
    }
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub samples: usize,
    /// Instruction id to accuracy, rounded to four decimals.
    pub accuracy: BTreeMap<u8, f64>,
    pub missing: BTreeMap<u8, usize>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(model_tag: impl Into<String>, samples: usize, config: serde_json::Value) -> Self {
        Self {
            model_tag: model_tag.into(),
            samples,
            accuracy: BTreeMap::new(),
            missing: BTreeMap::new(),
            config,
        }
    }

    pub fn record(&mut self, instruction_id: u8, acc: Accuracy) {
        self.accuracy.insert(instruction_id, round4(acc.value));
        if acc.missing > 0 {
            self.missing.insert(instruction_id, acc.missing);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (id, a) in &self.accuracy {
            if !(1..=5).contains(id) || !(0.0..=1.0).contains(a) {
                return Err(Error::Validation(format!("instruction {id} accuracy {a}")));
            }
        }
        Ok(())
    }
}

/// Rows are instructions, columns are model tags; blank where a model
/// was not scored on an instruction.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut header = vec!["Instruction".to_string()];
    header.extend(reports.iter().map(|r| r.model_tag.clone()));
    let mut rows = vec![header];
    for (i, q) in crate::dataset::INSTRUCTIONS.iter().enumerate() {
        let id = i as u8 + 1;
        let mut row = vec![format!("{id}. {q}")];
        for r in reports {
            row.push(r.accuracy.get(&id).map_or(String::new(), |a| format!("{a:.4}")));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (n, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if c == 0 {
                    format!("{cell:<w$}", w = widths[c])
                } else {
                    format!("{cell:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if n == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Writes `<stem>.json` (all reports) and `<stem>.txt` (the table).
pub fn write_reports(reports: &[EvalReport], json_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
    let txt = json_path.with_extension("txt");
    fs::write(&txt, render_table(reports)).map_err(|e| Error::io(&txt, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AttributeSet, QaPair, INSTRUCTIONS};
    use proptest::prelude::*;

    fn record(id: &str, category: Category, answers: [&str; 5]) -> DatasetRecord {
        DatasetRecord {
            id: id.into(),
            image_path: format!("images/{id}.ppm"),
            reconstructed_image_path: format!("recon/{id}.ppm"),
            occlusion_ratio: 0.3,
            category,
            attributes: AttributeSet {
                round: answers[1] == "yes",
                long: answers[2] == "yes",
                thin: answers[3] == "yes",
                category,
                description_template: 0,
            },
            qa: (0..5)
                .map(|i| QaPair {
                    instruction_id: i as u8 + 1,
                    question: INSTRUCTIONS[i].into(),
                    answer: answers[i].into(),
                })
                .collect(),
        }
    }

    fn gold() -> Vec<DatasetRecord> {
        vec![
            record("a", Category::Ball, ["ball", "yes", "no", "no", "It is a red ball with a round shape."]),
            record("b", Category::Rod, ["rod", "no", "yes", "yes", "A long blue rod held in the hand."]),
            record("c", Category::Box, ["box", "no", "no", "no", "It is a green box with a boxy shape."]),
            record("d", Category::Can, ["can", "yes", "no", "no", "It is a red can with a round shape."]),
        ]
    }

    fn preds(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("Yes."), "yes");
        assert_eq!(normalize_answer("  A  ball "), "a ball");
        assert_eq!(normalize_answer("No, it is not."), "no");
        assert_eq!(normalize_answer("Nothing?!"), "nothing");
        assert_eq!(normalize_answer("yesterday"), "yesterday");
    }

    #[test]
    fn exact_and_partial_accuracy() {
        let g = gold();
        let all = preds(&[("a", "ball"), ("b", "rod"), ("c", "box"), ("d", "can")]);
        assert_eq!(instruction_accuracy(&all, &g, 1).value, 1.0);
        let three = preds(&[("a", "Yes."), ("b", "no"), ("c", "No, it is not."), ("d", "no")]);
        assert_eq!(instruction_accuracy(&three, &g, 2).value, 0.75);
    }

    #[test]
    fn category_word_counts_for_the_first_question() {
        let g = gold();
        let p = preds(&[("a", "It is a ball."), ("b", "a rodent"), ("c", "box"), ("d", "can")]);
        assert_eq!(instruction_accuracy(&p, &g, 1).value, 0.75);
    }

    #[test]
    fn missing_predictions_count_wrong() {
        let g = gold();
        let acc = instruction_accuracy(&preds(&[("a", "ball")]), &g, 1);
        assert_eq!((acc.value, acc.missing), (0.25, 3));
    }

    #[test]
    fn describe_is_scored_by_template() {
        assert!(matches_description_template("It is a purple bowl with a round shape."));
        assert!(matches_description_template("a long blue rod held in the hand"));
        assert!(!matches_description_template("It is a purple bowl."));
        assert!(!matches_description_template("It is a pink bowl with a round shape."));
        let g = gold();
        let p = preds(&[("a", "It is a blue box with a boxy shape."), ("b", "rod"), ("c", "x"), ("d", "y")]);
        assert_eq!(instruction_accuracy(&p, &g, 5).value, 0.25);
    }

    #[test]
    fn table_layout_and_rounding() {
        let mut r = EvalReport::new("fused", 4, serde_json::json!({"alpha": 0.5}));
        r.record(1, Accuracy { value: 0.519_44, missing: 0 });
        let mut b = EvalReport::new("occluded-only", 4, serde_json::json!({"alpha": 1.0}));
        b.record(1, Accuracy { value: 0.320_9, missing: 0 });
        let t = render_table(&[r.clone(), b]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].starts_with("Instruction") && lines[0].ends_with("occluded-only"));
        assert!(lines[2].ends_with("0.5194         0.3209"), "{}", lines[2]);
        assert_eq!(r.accuracy[&1], 0.5194);
        r.validate().unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn accuracy_is_bounded_and_order_free(
            answers in proptest::collection::vec(prop_oneof![Just("yes"), Just("no"), Just("maybe")], 4),
            rot in 0usize..4,
        ) {
            let g = gold();
            let p: BTreeMap<String, String> = g.iter().zip(&answers).map(|(r, a)| (r.id.clone(), a.to_string())).collect();
            let a = instruction_accuracy(&p, &g, 2).value;
            let mut shuffled = g.clone();
            shuffled.rotate_left(rot);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, instruction_accuracy(&p, &shuffled, 2).value);
        }
    }
}
